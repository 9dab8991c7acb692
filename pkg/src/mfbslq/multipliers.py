"""Mean-constrained solver: decoupled fields, probed operators, multipliers.

The constrained subproblem fixes target level means eta = (alpha, beta,
gamma) for (state, martingale term, control) and enforces them with
deterministic per-level multipliers lam = (lam1, lam2, lam3).  Given
(lam, eta) the optimality system decouples through the Riccati pair into

  * an auxiliary backward equation for (phi, vtheta):
        d phi = E ds + vtheta dW,   phi(T) = -xi,
        E = (Sigma Q - A) phi + (Phi R - C) H vtheta
            - Sigma lam1 - B N^{-1} lam3 - (Phi + C S) H' lam2
            + A_bar alpha + B_bar gamma + C_bar beta,
  * a forward equation for the adjoint x:
        dx = [(A' - Q Sigma) x + Q phi - lam1] ds
           + [(C' - G1 (Phi + S C')) x + G1 (S lam2 + vtheta) - lam2] dW,
        x(0) = (I + G Sigma(0))^{-1} G phi(0),
  * and the reconstruction
        u = N^{-1} (B' x - lam3),
        y = Sigma x - phi,
        z = H ((Phi + S C') x - S lam2 - vtheta),

with H = (I + S R)^{-1} and G1 = R H.  Drift-side occurrences use the
level value Sigma = Sigma_k; the martingale-side algebra uses the centered
value S = (Sigma_k + E_k[Sigma_{k+1}]) / 2, because the exact discrete
martingale elimination conditions on the *next* level (one-sided Sigma_k
doubles the consistency constant, one-sided Sigma_{k+1} collapses the
scheme onto the discrete optimizer and hides genuine time-step error).

The map (lam, eta) -> level means of (y, z, u) is affine, as is the map
to the mean-coupling functionals (E[A_bar' x], E[C_bar' x], E[B_bar' x]);
both are probed column by column with unit impulses, the probe is
cross-checked by superposition on a dense test vector, and the multiplier
equation L lam = eta - p_xi - P_eta eta is solved by SVD with a certified
residual.

The outer optimality conditions couple the two probed maps: at the
optimum the multipliers must equal the mean-cost gradients minus the
mean-coupling feedback,

    lam1_k = E[Q_bar_k] alpha_k - E[A_bar_k' x_k],
    lam2_k = E[R_bar_k] beta_k  - E[C_bar_k' x_k],
    lam3_k = E[N_bar_k] gamma_k - E[B_bar_k' x_k],

while the realized means equal eta.  `solve_outer_system` assembles the
resulting linear system in (eta, lam) from the probes and solves it
directly; with all barred coefficients zero it yields lam = 0 and the
plain feedback control identically.

Vector layout: means and multipliers are stacked [y-block | z-block |
u-block], each block time-major over levels 0..n_steps-1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._errors import InfeasibleEtaError, NumericsError
from .bsde import solve_forward_sde
from .model import CoefficientSet
from .riccati import RiccatiSolution
from .tree import ScenarioTree

_RANK_TOL = 1e-10
_CERT_TOL = 1e-8
_GUARD_TOL = 1e-10


def _t(mats: np.ndarray) -> np.ndarray:
    return np.swapaxes(mats, -1, -2)


def _mv(mats: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    return np.einsum("kij,kj->ki", mats, vecs)


def eta_dimension(tree: ScenarioTree, coeffs: CoefficientSet) -> int:
    return tree.n_steps * (2 * coeffs.n + coeffs.m)


def split_blocks(vec: np.ndarray, tree: ScenarioTree, coeffs: CoefficientSet):
    """Unstack a means/multiplier vector into per-level (y, z, u) components."""
    n, m, n_steps = coeffs.n, coeffs.m, tree.n_steps
    a = vec[: n_steps * n].reshape(n_steps, n)
    b = vec[n_steps * n: 2 * n_steps * n].reshape(n_steps, n)
    g = vec[2 * n_steps * n:].reshape(n_steps, m)
    return a, b, g


def pack_blocks(a: np.ndarray, b: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.concatenate([a.ravel(), b.ravel(), g.ravel()])


@dataclass
class DecoupledWorkspace:
    """Per-level matrices shared by every (lam, eta) solve on one Riccati pair."""

    H: list            # (I + S R)^{-1}, S the centered Sigma
    G1: list           # R H
    sig_c: list        # S = (Sigma_k + E_k[Sigma_{k+1}]) / 2
    phi_step: list     # (I + dt (Sigma Q - A))^{-1}
    vtheta_coef: list  # (Phi R - C) H
    lam2_coef: list    # (Phi + C S) H'
    BNinv: list        # B N^{-1}
    Ninv: list         # N^{-1}
    x_drift: list      # A' - Q Sigma
    x_diff: list       # C' - G1 (Phi + S C')
    zx: list           # H (Phi + S C')


def build_workspace(tree: ScenarioTree, coeffs: CoefficientSet,
                    ric: RiccatiSolution) -> DecoupledWorkspace:
    key = "decoupled_workspace"
    cached = ric._cache.get(key)
    if cached is not None and cached[0] is coeffs:
        return cached[1]
    n = coeffs.n
    eye = np.eye(n)
    ws = DecoupledWorkspace([], [], [], [], [], [], [], [], [], [], [])
    for k in range(tree.n_steps):
        sig, phi = ric.sigma[k], ric.phi[k]
        A, C, Q, R = coeffs.A[k], coeffs.C[k], coeffs.Q[k], coeffs.R[k]
        sig_c = 0.5 * (sig + tree.cond_expect(ric.sigma[k + 1]))
        H = np.linalg.inv(eye[None] + sig_c @ R)
        G1 = R @ H
        mart = phi + sig_c @ _t(C)
        ws.H.append(H)
        ws.G1.append(G1)
        ws.sig_c.append(sig_c)
        ws.phi_step.append(np.linalg.inv(eye[None] + tree.dt * (sig @ Q - A)))
        ws.vtheta_coef.append((phi @ R - C) @ H)
        ws.lam2_coef.append((phi + C @ sig_c) @ _t(H))
        ws.BNinv.append(_t(np.linalg.solve(coeffs.N[k], _t(coeffs.B[k]))))
        ws.Ninv.append(np.linalg.inv(coeffs.N[k]))
        ws.x_drift.append(_t(A) - Q @ sig)
        ws.x_diff.append(_t(C) - G1 @ mart)
        ws.zx.append(H @ mart)
    ric._cache[key] = (coeffs, ws)
    return ws


@dataclass
class DecoupledSolution:
    phi: list      # levels 0..n_steps
    vtheta: list   # levels 0..n_steps - 1
    x: list        # levels 0..n_steps
    u: list        # levels 0..n_steps - 1
    y: list        # levels 0..n_steps
    z: list        # levels 0..n_steps - 1
    means: np.ndarray
    coupling: np.ndarray   # stacked E[A_bar' x], E[C_bar' x], E[B_bar' x]
    guard: float   # worst pointwise defect of N u - B' x + lam3


def solve_decoupled(tree: ScenarioTree, coeffs: CoefficientSet, ric: RiccatiSolution,
                    lam_vec: np.ndarray, eta_vec: np.ndarray) -> DecoupledSolution:
    """Solve the (lam, eta) optimality system and return fields plus means."""
    ws = build_workspace(tree, coeffs, ric)
    n_steps, dt = tree.n_steps, tree.dt
    lam1, lam2, lam3 = split_blocks(lam_vec, tree, coeffs)
    alpha, beta, gamma = split_blocks(eta_vec, tree, coeffs)

    # backward sweep for (phi, vtheta)
    phi: list = [None] * (n_steps + 1)
    vtheta: list = [None] * n_steps
    phi[n_steps] = -coeffs.xi
    for k in range(n_steps - 1, -1, -1):
        vth = tree.z_from_next(phi[k + 1])
        cond = tree.cond_expect(phi[k + 1])
        rest = (
            _mv(ws.vtheta_coef[k], vth)
            - ric.sigma[k] @ lam1[k] - ws.BNinv[k] @ lam3[k]
            - ws.lam2_coef[k] @ lam2[k]
            + coeffs.A_bar[k] @ alpha[k] + coeffs.B_bar[k] @ gamma[k]
            + coeffs.C_bar[k] @ beta[k]
        )
        phi[k] = _mv(ws.phi_step[k], cond - dt * rest)
        vtheta[k] = vth

    # forward sweep for the adjoint
    g_mat = coeffs.G
    x0 = np.linalg.solve(np.eye(coeffs.n) + g_mat @ ric.sigma[0][0], g_mat @ phi[0][0])

    def drift(k: int, x: np.ndarray) -> np.ndarray:
        return -(_mv(ws.x_drift[k], x) + _mv(coeffs.Q[k], phi[k]) - lam1[k][None])

    def diffusion(k: int, x: np.ndarray) -> np.ndarray:
        aff = _mv(ws.G1[k], ws.sig_c[k] @ lam2[k] + vtheta[k]) - lam2[k][None]
        return -(_mv(ws.x_diff[k], x) + aff)

    x = solve_forward_sde(tree, x0, drift, diffusion)

    # reconstruction, means, and mean-coupling functionals
    u: list = [None] * n_steps
    y: list = [None] * (n_steps + 1)
    z: list = [None] * n_steps
    means = np.empty(eta_dimension(tree, coeffs))
    coupling = np.empty(eta_dimension(tree, coeffs))
    n, m = coeffs.n, coeffs.m
    guard = 0.0
    y[n_steps] = _mv(ric.sigma[n_steps], x[n_steps]) - phi[n_steps]
    for k in range(n_steps):
        bx = _mv(_t(coeffs.B[k]), x[k])
        u[k] = _mv(ws.Ninv[k], bx - lam3[k][None])
        y[k] = _mv(ric.sigma[k], x[k]) - phi[k]
        z[k] = _mv(ws.zx[k], x[k]) - _mv(ws.H[k], ws.sig_c[k] @ lam2[k] + vtheta[k])
        defect = np.abs(_mv(coeffs.N[k], u[k]) - bx + lam3[k][None]).max()
        guard = max(guard, float(defect) / (1.0 + float(np.abs(bx).max())))
        prob = tree.node_probability(k)
        means[k * n:(k + 1) * n] = tree.expect(y[k])
        coupling[k * n:(k + 1) * n] = prob * np.einsum(
            "jxy,jx->y", coeffs.A_bar[k], x[k])
        off = n_steps * n
        means[off + k * n: off + (k + 1) * n] = tree.expect(z[k])
        coupling[off + k * n: off + (k + 1) * n] = prob * np.einsum(
            "jxy,jx->y", coeffs.C_bar[k], x[k])
        off = 2 * n_steps * n
        means[off + k * m: off + (k + 1) * m] = tree.expect(u[k])
        coupling[off + k * m: off + (k + 1) * m] = prob * np.einsum(
            "jxy,jx->y", coeffs.B_bar[k], x[k])
    if guard > _GUARD_TOL:
        raise NumericsError(
            f"control reconstruction defect {guard:.3e} exceeds {_GUARD_TOL:.1e}"
        )
    return DecoupledSolution(phi, vtheta, x, u, y, z, means, coupling, guard)


@dataclass
class MeanOperators:
    """Probed affine maps out of (lam, eta).

    means    = p_xi + P_eta eta + L lam        (realized level means)
    coupling = q_xi + Q_eta eta + M lam        (mean-coupling functionals
                                                E[A_bar' x], E[C_bar' x],
                                                E[B_bar' x], stacked)
    """

    p_xi: np.ndarray
    P_eta: np.ndarray
    L: np.ndarray
    q_xi: np.ndarray
    Q_eta: np.ndarray
    M: np.ndarray
    svd: tuple       # (U, s, Vt) of L
    rank: int

    def solve_lambda(self, rhs: np.ndarray) -> np.ndarray:
        u_mat, s, vt = self.svd
        coef = u_mat.T @ rhs
        coef = np.where(np.arange(s.size) < self.rank, coef / np.where(s > 0, s, 1.0), 0.0)
        return vt.T @ coef


def probe_operators(tree: ScenarioTree, coeffs: CoefficientSet,
                    ric: RiccatiSolution) -> MeanOperators:
    """Assemble the affine maps by unit impulses; memoized on the Riccati pair."""
    key = "mean_operators"
    cached = ric._cache.get(key)
    if cached is not None and cached[0] is coeffs:
        return cached[1]
    d = eta_dimension(tree, coeffs)
    zero = np.zeros(d)
    base = solve_decoupled(tree, coeffs, ric, zero, zero)
    p_xi, q_xi = base.means, base.coupling
    l_mat = np.empty((d, d))
    p_mat = np.empty((d, d))
    m_mat = np.empty((d, d))
    q_mat = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        s_lam = solve_decoupled(tree, coeffs, ric, e, zero)
        s_eta = solve_decoupled(tree, coeffs, ric, zero, e)
        l_mat[:, i] = s_lam.means - p_xi
        m_mat[:, i] = s_lam.coupling - q_xi
        p_mat[:, i] = s_eta.means - p_xi
        q_mat[:, i] = s_eta.coupling - q_xi

    # superposition cross-check on a dense deterministic pattern
    lam_t = np.cos(np.arange(1, d + 1, dtype=float))
    eta_t = np.sin(np.arange(1, d + 1, dtype=float))
    direct = solve_decoupled(tree, coeffs, ric, lam_t, eta_t)
    predicted = np.concatenate([
        p_xi + p_mat @ eta_t + l_mat @ lam_t,
        q_xi + q_mat @ eta_t + m_mat @ lam_t,
    ])
    got = np.concatenate([direct.means, direct.coupling])
    err = float(np.linalg.norm(got - predicted))
    if err > 1e-8 * (1.0 + float(np.linalg.norm(got))):
        raise NumericsError(
            f"probed mean operators fail superposition: error {err:.3e}"
        )

    u_mat, s, vt = np.linalg.svd(l_mat)
    rank = int(np.sum(s > _RANK_TOL * (s[0] if s.size else 1.0)))
    ops = MeanOperators(p_xi, p_mat, l_mat, q_xi, q_mat, m_mat, (u_mat, s, vt), rank)
    ric._cache[key] = (coeffs, ops)
    return ops


def mean_cost_weights(tree: ScenarioTree, coeffs: CoefficientSet) -> np.ndarray:
    """Block-diagonal map eta -> mean-cost gradients (E[Q_bar] alpha, ...)."""
    n, m, n_steps = coeffs.n, coeffs.m, tree.n_steps
    d = eta_dimension(tree, coeffs)
    w = np.zeros((d, d))
    for k in range(n_steps):
        sl = slice(k * n, (k + 1) * n)
        w[sl, sl] = coeffs.Q_bar[k].mean(axis=0)
        sl = slice(n_steps * n + k * n, n_steps * n + (k + 1) * n)
        w[sl, sl] = coeffs.R_bar[k].mean(axis=0)
        sl = slice(2 * n_steps * n + k * m, 2 * n_steps * n + (k + 1) * m)
        w[sl, sl] = coeffs.N_bar[k].mean(axis=0)
    return w


def solve_outer_system(tree: ScenarioTree, coeffs: CoefficientSet,
                       ric: RiccatiSolution,
                       ops: MeanOperators | None = None):
    """Solve the outer first-order conditions for (eta, lam).

    Two blocks of equations: the realized means equal eta (feasibility),
    and the multipliers equal the mean-cost gradient minus the probed
    mean-coupling feedback (stationarity in eta).  Both are affine in
    (eta, lam), so the pair is a single linear solve.  Returns
    (eta, lam, residual, singular): `residual` is the worst equation
    defect of the computed pair, `singular` flags a least-squares
    fallback on a rank-deficient system.
    """
    if ops is None:
        ops = probe_operators(tree, coeffs, ric)
    d = eta_dimension(tree, coeffs)
    eye = np.eye(d)
    weights = mean_cost_weights(tree, coeffs)
    a_sys = np.block([
        [eye - ops.P_eta, -ops.L],
        [weights - ops.Q_eta, -(eye + ops.M)],
    ])
    rhs = np.concatenate([ops.p_xi, ops.q_xi])
    singular = False
    try:
        sol = np.linalg.solve(a_sys, rhs)
    except np.linalg.LinAlgError:
        singular = True
        sol = np.linalg.lstsq(a_sys, rhs, rcond=None)[0]
    residual = float(np.abs(a_sys @ sol - rhs).max())
    return sol[:d], sol[d:], residual, singular


@dataclass
class ConstrainedSolution:
    """Solution of the mean-constrained subproblem at a given eta."""

    u: list
    y: list
    z: list
    x: list
    phi: list
    vtheta: list
    lam: np.ndarray
    eta: np.ndarray
    means: np.ndarray
    lambda_residual: float        # ||L lam - rhs|| of the multiplier solve
    constraint_residual: np.ndarray   # realized means - eta, stacked


def solve_constrained_problem(tree: ScenarioTree, coeffs: CoefficientSet,
                              ric: RiccatiSolution, eta_vec: np.ndarray,
                              ops: MeanOperators | None = None) -> ConstrainedSolution:
    """Pick multipliers hitting the target means, certify, and solve."""
    if ops is None:
        ops = probe_operators(tree, coeffs, ric)
    eta_vec = np.asarray(eta_vec, dtype=float)
    rhs = eta_vec - ops.p_xi - ops.P_eta @ eta_vec
    lam = ops.solve_lambda(rhs)
    residual = float(np.linalg.norm(ops.L @ lam - rhs))
    if residual > _CERT_TOL * (1.0 + float(np.linalg.norm(rhs))):
        raise InfeasibleEtaError(
            f"target means are not attainable: multiplier residual {residual:.3e} "
            f"(operator rank {ops.rank} of {ops.L.shape[0]})"
        )
    sol = solve_decoupled(tree, coeffs, ric, lam, eta_vec)
    return ConstrainedSolution(
        u=sol.u, y=sol.y, z=sol.z, x=sol.x, phi=sol.phi, vtheta=sol.vtheta,
        lam=lam, eta=eta_vec, means=sol.means,
        lambda_residual=residual,
        constraint_residual=sol.means - eta_vec,
    )


def constrained_solution_at(tree: ScenarioTree, coeffs: CoefficientSet,
                            ric: RiccatiSolution, lam_vec: np.ndarray,
                            eta_vec: np.ndarray,
                            ops: MeanOperators | None = None) -> ConstrainedSolution:
    """Solve at an explicitly given multiplier/mean pair and certify that the
    realized means do hit the targets (the outer system guarantees this up
    to roundoff; the gate still applies)."""
    if ops is None:
        ops = probe_operators(tree, coeffs, ric)
    eta_vec = np.asarray(eta_vec, dtype=float)
    lam_vec = np.asarray(lam_vec, dtype=float)
    rhs = eta_vec - ops.p_xi - ops.P_eta @ eta_vec
    residual = float(np.linalg.norm(ops.L @ lam_vec - rhs))
    if residual > _CERT_TOL * (1.0 + float(np.linalg.norm(rhs))):
        raise InfeasibleEtaError(
            f"multiplier/mean pair is inconsistent: residual {residual:.3e}"
        )
    sol = solve_decoupled(tree, coeffs, ric, lam_vec, eta_vec)
    return ConstrainedSolution(
        u=sol.u, y=sol.y, z=sol.z, x=sol.x, phi=sol.phi, vtheta=sol.vtheta,
        lam=lam_vec, eta=eta_vec, means=sol.means,
        lambda_residual=residual,
        constraint_residual=sol.means - eta_vec,
    )


def riccati_control(tree: ScenarioTree, coeffs: CoefficientSet,
                    ric: RiccatiSolution) -> list:
    """Unconstrained feedback control (zero multipliers, zero target means).
    With all barred coefficients zero this is the classical Riccati control."""
    zero = np.zeros(eta_dimension(tree, coeffs))
    return solve_decoupled(tree, coeffs, ric, zero, zero).u


def decoupling_residual(tree: ScenarioTree, coeffs: CoefficientSet,
                        ric: RiccatiSolution, sol: ConstrainedSolution) -> dict:
    """How far the reconstructed (y, z, u) is from solving the discrete
    backward recursion it represents.

    Two defects are reported in the probability-and-dt weighted rms norm
    (the same norm used for control errors): the state-recursion residual
    and the martingale-representation defect z - z_from_next(y).  Both are
    first order in the step size for a consistent reconstruction.
    """
    alpha, beta, gamma = split_blocks(sol.eta, tree, coeffs)
    eye = np.eye(coeffs.n)
    y_sq = 0.0
    z_sq = 0.0
    for k in range(tree.n_steps):
        weight = tree.dt * tree.node_probability(k)
        lhs = _mv(eye[None] - tree.dt * coeffs.A[k], sol.y[k])
        rhs = tree.cond_expect(sol.y[k + 1]) + tree.dt * (
            _mv(coeffs.B[k], sol.u[k]) + _mv(coeffs.C[k], sol.z[k])
            + coeffs.A_bar[k] @ alpha[k] + coeffs.B_bar[k] @ gamma[k]
            + coeffs.C_bar[k] @ beta[k]
        )
        y_sq += weight * float(((lhs - rhs) ** 2).sum())
        z_sq += weight * float(
            ((sol.z[k] - tree.z_from_next(sol.y[k + 1])) ** 2).sum())
    return {"y_recursion": math.sqrt(y_sq), "z_defect": math.sqrt(z_sq),
            "combined": math.sqrt(y_sq + z_sq)}


def picard_cross_check(tree: ScenarioTree, coeffs: CoefficientSet,
                       ric: RiccatiSolution, sol: ConstrainedSolution,
                       max_iterations: int = 400, tol: float = 1e-12) -> dict:
    """Re-solve the optimality system at sol's multipliers by plain
    alternation (no Riccati decoupling) and report the disagreement.

    Alternates: backward solve for (y, z) given u with the target means
    frozen; explicit forward step for the adjoint x given (y, z); control
    update u = N^{-1}(B' x - lam3).  The alternation contracts only on
    short horizons, which is why callers run it on a truncated problem.
    """
    lam1, lam2, lam3 = split_blocks(sol.lam, tree, coeffs)
    alpha, beta, gamma = split_blocks(sol.eta, tree, coeffs)
    ws = build_workspace(tree, coeffs, ric)
    n_steps, dt = tree.n_steps, tree.dt
    eye = np.eye(coeffs.n)
    u = [_mv(ws.Ninv[k], np.tile(-lam3[k][None], (tree.n_nodes(k), 1)))
         for k in range(n_steps)]

    y: list = [None] * (n_steps + 1)
    z: list = [None] * n_steps
    x: list = []
    converged = False
    iterations = 0
    for it in range(max_iterations):
        iterations = it + 1
        y[n_steps] = coeffs.xi
        for k in range(n_steps - 1, -1, -1):
            z[k] = tree.z_from_next(y[k + 1])
            rhs = tree.cond_expect(y[k + 1]) + dt * (
                _mv(coeffs.B[k], u[k]) + _mv(coeffs.C[k], z[k])
                + coeffs.A_bar[k] @ alpha[k] + coeffs.B_bar[k] @ gamma[k]
                + coeffs.C_bar[k] @ beta[k]
            )
            y[k] = np.linalg.solve(eye[None] - dt * coeffs.A[k],
                                   rhs[:, :, None])[:, :, 0]

        def drift(k: int, xk: np.ndarray) -> np.ndarray:
            return -(_mv(_t(coeffs.A[k]), xk) - _mv(coeffs.Q[k], y[k])
                     - lam1[k][None])

        def diffusion(k: int, xk: np.ndarray) -> np.ndarray:
            return -(_mv(_t(coeffs.C[k]), xk) - _mv(coeffs.R[k], z[k])
                     - lam2[k][None])

        x = solve_forward_sde(tree, -(coeffs.G @ y[0][0]), drift, diffusion)
        change = 0.0
        scale = 1.0
        for k in range(n_steps):
            u_new = _mv(ws.Ninv[k], _mv(_t(coeffs.B[k]), x[k]) - lam3[k][None])
            change = max(change, float(np.abs(u_new - u[k]).max()))
            scale = max(scale, float(np.abs(u_new).max()))
            u[k] = u_new
        if change <= tol * scale:
            converged = True
            break

    y_diff = max(float(np.abs(y[k] - sol.y[k]).max()) for k in range(n_steps + 1))
    x_diff = max(float(np.abs(x[k] - sol.x[k]).max()) for k in range(n_steps + 1))
    return {"y_diff": y_diff, "x_diff": x_diff,
            "iterations": iterations, "converged": converged}
