"""Backward recursion for the stochastic Riccati pair (Sigma, Phi).

The decoupling field Sigma solves, node by node, the matrix equation

    Sigma_k = E_k[Sigma_{k+1}] - dt * S(Sigma_k, Phi_k),
    Phi_k   = z_from_next(Sigma_{k+1}),

with Sigma at the final level identically zero and

    S(Sigma, Phi) = -(A Sigma + Sigma A') + Sigma Q Sigma - B N^{-1} B'
                    + Phi G1 Phi - Phi H' C' - C H (Phi + Sigma C'),

where H = (I + Sigma R)^{-1} and G1 = R H (= (R^{-1} + Sigma)^{-1}, symmetric).
S maps symmetric (Sigma, Phi) to a symmetric matrix, so the per-node root
find F(Sigma) = Sigma - E_k[Sigma_{k+1}] + dt S(Sigma, Phi) = 0 is run as a
damped Newton iteration in the upper-triangle coordinates of Sigma.  The
directional derivative of S has the compact form

    dS(D) = -(A D + D A') + D Q Sigma + Sigma Q D - V D V',   V = Phi G1 - C H,

which is what the Newton matrix is assembled from.  Nodes whose initial
residual already meets the tolerance are left untouched (so degenerate
problems reproduce the conditional expectation bit for bit), and the step
length is halved per node until the residual decreases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._errors import RiccatiError
from .model import CoefficientSet
from .tree import ScenarioTree

_NEWTON_TOL = 1e-12
_MAX_NEWTON = 50
_MAX_BACKTRACK = 30


@dataclass
class RiccatiSolution:
    sigma: list                 # levels 0..n_steps, (2**k, n, n)
    phi: list                   # levels 0..n_steps - 1, (2**k, n, n)
    symmetry_defect: float      # max |Sigma - Sigma'| entry over all nodes
    min_sigma_eig: float        # most negative eigenvalue of any Sigma node
    min_conditioner_sv: float   # min singular value of I + Sigma R over nodes
    newton_iterations: int      # worst per-level Newton iteration count
    _cache: dict = field(default_factory=dict, repr=False, compare=False)


def _t(mats: np.ndarray) -> np.ndarray:
    return np.swapaxes(mats, -1, -2)


def _sym_basis(n: int) -> list:
    basis = []
    for i in range(n):
        for j in range(i, n):
            e = np.zeros((n, n))
            e[i, j] = 1.0
            e[j, i] = 1.0
            basis.append(e)
    return basis


def _drift(A, Q, BNB, C, sigma, phi, H, G1):
    return (
        -(A @ sigma + sigma @ _t(A)) + sigma @ Q @ sigma - BNB
        + phi @ G1 @ phi - phi @ _t(H) @ _t(C) - C @ H @ (phi + sigma @ _t(C))
    )


def _conditioners(sigma, R, eye):
    H = np.linalg.inv(eye[None] + sigma @ R)
    return H, R @ H


def solve_riccati(tree: ScenarioTree, coeffs: CoefficientSet,
                  tol: float = _NEWTON_TOL,
                  max_iterations: int = _MAX_NEWTON) -> RiccatiSolution:
    """Run the backward recursion over all levels; raises RiccatiError on a
    node where the Newton iteration fails to meet the residual tolerance."""
    n, n_steps, dt = coeffs.n, tree.n_steps, tree.dt
    eye = np.eye(n)
    basis = _sym_basis(n)
    iu = np.triu_indices(n)
    d = len(basis)

    sigma: list = [None] * (n_steps + 1)
    phi: list = [None] * n_steps
    sigma[n_steps] = np.zeros((tree.n_nodes(n_steps), n, n))

    min_eig = np.inf
    min_sv = np.inf
    worst_iters = 0
    for k in range(n_steps - 1, -1, -1):
        A, Q, C, R = coeffs.A[k], coeffs.Q[k], coeffs.C[k], coeffs.R[k]
        BNB = coeffs.B[k] @ np.linalg.solve(coeffs.N[k], _t(coeffs.B[k]))
        phik = tree.z_from_next(sigma[k + 1])
        cond = tree.cond_expect(sigma[k + 1])

        sig = cond.copy()
        H, G1 = _conditioners(sig, R, eye)
        res = sig - cond + dt * _drift(A, Q, BNB, C, sig, phik, H, G1)
        res_norm = np.linalg.norm(res, axis=(1, 2))
        tol_vec = tol * (1.0 + np.linalg.norm(sig, axis=(1, 2)))
        active = res_norm > tol_vec

        iters = 0
        while active.any():
            if iters >= max_iterations:
                j = int(np.argmax(np.where(active, res_norm, -np.inf)))
                raise RiccatiError(
                    f"Newton failed at level {k}: {int(active.sum())} nodes "
                    f"above tolerance after {max_iterations} iterations "
                    f"(worst residual {res_norm[j]:.3e} at node {j})"
                )
            iters += 1
            V = phik @ G1 - C @ H
            jac = np.empty((sig.shape[0], d, d))
            for b, eb in enumerate(basis):
                ds = (-(A @ eb + eb @ _t(A)) + eb @ (Q @ sig) + sig @ (Q @ eb)
                      - V @ eb @ _t(V))
                jac[:, :, b] = (eb[None] + dt * ds)[:, iu[0], iu[1]]
            try:
                step_vec = np.linalg.solve(jac, -res[:, iu[0], iu[1], None])[:, :, 0]
            except np.linalg.LinAlgError as exc:
                raise RiccatiError(
                    f"singular Newton matrix at level {k}: {exc}"
                ) from exc
            step = np.zeros_like(sig)
            step[:, iu[0], iu[1]] = step_vec
            step[:, iu[1], iu[0]] = step_vec

            alpha = np.where(active, 1.0, 0.0)
            pending = active.copy()
            for _ in range(_MAX_BACKTRACK + 1):
                trial = sig + alpha[:, None, None] * step
                Ht, G1t = _conditioners(trial, R, eye)
                res_t = trial - cond + dt * _drift(A, Q, BNB, C, trial, phik, Ht, G1t)
                rn_t = np.linalg.norm(res_t, axis=(1, 2))
                improved = rn_t <= (1.0 - 1e-4 * alpha) * res_norm
                pending &= ~improved
                if not pending.any():
                    break
                alpha[pending] *= 0.5
            if pending.any():
                j = int(np.argmax(np.where(pending, res_norm, -np.inf)))
                raise RiccatiError(
                    f"Newton line search stalled at level {k}, node {j} "
                    f"(residual {res_norm[j]:.3e})"
                )
            sig, H, G1 = trial, Ht, G1t
            res, res_norm = res_t, rn_t
            tol_vec = tol * (1.0 + np.linalg.norm(sig, axis=(1, 2)))
            active = res_norm > tol_vec

        sigma[k], phi[k] = sig, phik
        worst_iters = max(worst_iters, iters)
        min_eig = min(min_eig, float(np.linalg.eigvalsh(sig)[:, 0].min()))
        min_sv = min(min_sv, float(
            np.linalg.svd(eye[None] + sig @ R, compute_uv=False)[:, -1].min()
        ))

    defect = 0.0
    for mats in sigma[:n_steps]:
        defect = max(defect, float(np.abs(mats - _t(mats)).max()))
    return RiccatiSolution(
        sigma=sigma, phi=phi, symmetry_defect=defect,
        min_sigma_eig=min_eig, min_conditioner_sv=min_sv,
        newton_iterations=worst_iters,
    )
