"""Backward stochastic Riccati recursion.

Reference values: a hand-solvable linear-growth case, a closed-form scalar
flow (Riccati ODE with constant coefficients, solved by the tanh formula),
an inline Runge-Kutta integrator for the matrix-valued deterministic flow.
"""

import math

import numpy as np
import pytest

from mfbslq import RiccatiError, build_tree, realize, solve_riccati
from conftest import scalar_spec


def test_linear_growth_exact():
    # Q = 0, A = C = 0, B = N = 1: each backward step adds exactly dt
    spec = scalar_spec(B=1.0, N=1.0, R=1.0)
    for nt in (7, 16):
        tree = build_tree(1.0, nt)
        ric = solve_riccati(tree, realize(spec, tree))
        for k in range(nt + 1):
            expected = (nt - k) * tree.dt
            assert np.abs(ric.sigma[k] - expected).max() <= 1e-12
        assert ric.symmetry_defect <= 1e-12
        for k in range(nt):
            assert np.abs(ric.phi[k]).max() <= 1e-12


def _rk4(rhs, y0, steps, total):
    h = total / steps
    y = y0
    for _ in range(steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def test_scalar_flow_against_closed_form():
    # A = 1, Q = 1, B = N = 1, C = 0: backward-time flow s' = 2s - s^2 + 1,
    # s(0) = 0, with closed form s = 1 + sqrt(2) tanh(sqrt(2) t + atanh(-1/sqrt(2)))
    rhs = lambda s: 2 * s - s * s + 1.0
    ref = _rk4(rhs, 0.0, 4096, 1.0)
    closed = 1.0 + math.sqrt(2) * math.tanh(math.sqrt(2) + math.atanh(-1 / math.sqrt(2)))
    assert abs(ref - closed) < 1e-12

    spec = scalar_spec(A=1.0, Q=1.0, B=1.0, N=1.0, R=1.0)
    tree = build_tree(1.0, 16)
    ric = solve_riccati(tree, realize(spec, tree))
    assert abs(float(ric.sigma[0][0, 0, 0]) - ref) <= 2 * tree.dt


def test_matrix_flow_against_rk4(d2):
    # deterministic coefficients: the recursion is an implicit Euler
    # discretization of the matrix flow below; initial value must land
    # within 2 dt of a fine Runge-Kutta reference
    tree = build_tree(1.0, 16)
    coeffs = realize(d2, tree)
    A = coeffs.A[0][0]
    Q = coeffs.Q[0][0]
    C = coeffs.C[0][0]
    R = coeffs.R[0][0]
    BNB = coeffs.B[0][0] @ np.linalg.solve(coeffs.N[0][0], coeffs.B[0][0].T)
    eye = np.eye(2)

    def rhs(s):
        cond = np.linalg.solve(eye + s @ R, s)
        return A @ s + s @ A.T - s @ Q @ s + BNB + C @ cond @ C.T

    ref = _rk4(rhs, np.zeros((2, 2)), 2048, 1.0)
    got = ric0 = solve_riccati(tree, coeffs).sigma[0][0]
    assert np.abs(got - ref).max() <= 2 * tree.dt
    assert np.allclose(ric0, ric0.T, atol=1e-12)


def test_solution_structure_and_guards(m1, m1_random):
    tree = build_tree(1.0, 6)
    for spec, random_coeffs in ((m1, False), (m1_random, True)):
        ric = solve_riccati(tree, realize(spec, tree))
        for k in range(7):
            assert ric.sigma[k].shape == (tree.n_nodes(k), 1, 1)
        assert ric.symmetry_defect <= 1e-10
        assert ric.min_sigma_eig >= -1e-12
        assert ric.min_conditioner_sv > 0.5
        assert ric.newton_iterations <= 20
        phi_max = max(np.abs(p).max() for p in ric.phi)
        if random_coeffs:
            # node-dependent coefficients make the pair genuinely stochastic
            assert phi_max > 1e-6
        else:
            assert phi_max <= 1e-12


def test_martingale_consistency(m1_random):
    # the recursion must reproduce sigma_k from its children:
    # sigma_k + dt * drift(sigma_k, phi_k) = E_k[sigma_{k+1}], and phi is the
    # representation integrand of sigma_{k+1}
    tree = build_tree(1.0, 5)
    coeffs = realize(m1_random, tree)
    ric = solve_riccati(tree, coeffs)
    for k in range(5):
        assert np.allclose(ric.phi[k], tree.z_from_next(ric.sigma[k + 1]),
                           atol=1e-12)


def test_newton_tolerance_enforced(m1):
    tree = build_tree(1.0, 3)
    coeffs = realize(m1, tree)
    with pytest.raises(RiccatiError):
        solve_riccati(tree, coeffs, max_iterations=0)
