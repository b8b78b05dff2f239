import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from milcci.errors import NumericError, ParameterError
from milcci.solvers import (
    LassoProblem,
    cd_lasso_variant,
    fit_transition,
    linear_sum_assignment,
    smoothed_objective,
    soft_threshold,
    solve_traces,
    trace_objective,
)
from milcci.solvers.traces import banded_matvec, normal_equations


# -- soft threshold and LASSO -------------------------------------------------


@pytest.mark.parametrize("x,tau,expected", [(2.0, 0.5, 1.5), (-0.3, 0.5, 0.0), (0.0, 0.0, 0.0)])
def test_soft_threshold_examples(x, tau, expected):
    assert soft_threshold(x, tau) == expected


def test_cd_scalar_example_matches_closed_form_and_grid():
    prob = LassoProblem(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]), gamma1=1.0)
    a = cd_lasso_variant(prob)
    assert a[0, 0] == pytest.approx(1.5, abs=1e-12)
    grid = np.arange(-5, 5 + 1e-9, 1e-4)
    vals = (2.0 - grid) ** 2 + np.abs(grid)
    assert a[0, 0] == pytest.approx(grid[np.argmin(vals)], abs=1e-4)


def test_cd_without_penalties_is_least_squares():
    rng = np.random.default_rng(0)
    phi = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    r = rng.standard_normal((4, 3))
    a = cd_lasso_variant(LassoProblem(r, phi), max_sweeps=5000, tol=1e-14)
    np.testing.assert_allclose(a, r @ np.linalg.inv(phi), atol=1e-8)


def test_cd_dominant_anchor_returns_anchor():
    rng = np.random.default_rng(1)
    phi = rng.standard_normal((2, 20))
    r = rng.standard_normal((5, 20))
    anchor = rng.standard_normal((5, 2))
    w = 1e8
    a = cd_lasso_variant(LassoProblem(r, phi, anchor, w), max_sweeps=5000, tol=1e-14)
    direct = (r @ phi.T + w * anchor) @ np.linalg.inv(phi @ phi.T + w * np.eye(2))
    np.testing.assert_allclose(a, direct, atol=1e-8)
    np.testing.assert_allclose(a, anchor, atol=1e-4)


def test_cd_nonneg_and_masked():
    rng = np.random.default_rng(2)
    phi = rng.standard_normal((3, 30))
    r = rng.standard_normal((6, 30))
    mask = rng.random((6, 30)) > 0.3
    prob = LassoProblem(r, phi, gamma1=0.2, nonneg=True, mask=mask)
    a = cd_lasso_variant(prob, max_sweeps=2000, tol=1e-13)
    assert np.all(a >= 0)
    # KKT for the masked nonnegative problem: gradient >= -gamma1 where a == 0, == -gamma1 where a > 0
    grad = np.zeros_like(a)
    err = np.where(mask, r - a @ phi, 0.0)
    grad = -2 * err @ phi.T
    live = a > 0
    np.testing.assert_allclose(grad[live], -0.2, atol=1e-6)
    assert np.all(grad[~live] >= -0.2 - 1e-6)


def test_cd_nan_input_raises():
    with pytest.raises(NumericError):
        LassoProblem(np.array([[np.nan, 1.0]]), np.ones((1, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 2), st.floats(0, 5))
def test_cd_objective_never_above_warm_start(seed, gamma1, w):
    rng = np.random.default_rng(seed)
    prob = LassoProblem(
        rng.standard_normal((4, 15)), rng.standard_normal((2, 15)),
        rng.standard_normal((4, 2)), w, gamma1,
    )
    start = rng.standard_normal((4, 2))
    out = cd_lasso_variant(prob, start, max_sweeps=1)
    assert prob.objective(out) <= prob.objective(start) + 1e-12


# -- trace objective and solver ---------------------------------------------


def test_trace_objective_examples():
    y = np.random.default_rng(0).standard_normal((3, 7))
    assert trace_objective(y, None, np.eye(3), y, 0, 0) == 0.0
    phi = np.random.default_rng(1).standard_normal((1, 5))
    assert trace_objective(phi, None, np.ones((1, 1)), phi, 0, 3.0) == 0.0
    row = np.array([1.0, -2.0, 0.5, 3.0])
    phi2 = np.vstack([row, row])
    a = np.random.default_rng(2).standard_normal((4, 2))
    val = trace_objective(a @ phi2, None, a, phi2, 0.0, 1.0)
    # brute-force double loop over ordered pairs
    brute = sum(
        abs(phi2[i] @ phi2[j]) / (np.linalg.norm(phi2[i]) * np.linalg.norm(phi2[j]))
        for i in range(2) for j in range(2) if i != j
    )
    assert val == pytest.approx(2.0, abs=1e-12) and brute == pytest.approx(2.0)


def test_solve_traces_identity_loading():
    y = np.random.default_rng(3).standard_normal((4, 9))
    np.testing.assert_allclose(solve_traces(y, None, np.eye(4)), y, atol=1e-12)


def test_solve_traces_two_point_example():
    phi = solve_traces(np.array([[0.0, 2.0]]), None, np.array([[1.0]]), gamma3=1.0)
    np.testing.assert_allclose(phi, [[2 / 3, 4 / 3]], atol=1e-12)
    _, grad = smoothed_objective(np.array([[0.0, 2.0]]), None, np.array([[1.0]]), phi, 1.0, 0.0)
    np.testing.assert_allclose(grad, 0, atol=1e-10)


def test_solve_traces_nonneg_projection():
    phi = solve_traces(np.array([[-5.0, -5.0]]), None, np.array([[1.0]]), nonneg=True)
    np.testing.assert_allclose(phi, 0.0, atol=1e-12)


def test_solve_traces_masked_exact_path_matches_dense_solve():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((6, 3))
    y = rng.standard_normal((6, 12))
    mask = rng.random(y.shape) > 0.25
    phi = solve_traces(y, mask, a, gamma3=0.3)
    ab, rhs = normal_equations(y, mask, a, 0.3)
    res = banded_matvec(ab, phi.T.ravel()) - rhs.T.ravel()
    assert np.linalg.norm(res) <= 1e-8 * np.linalg.norm(rhs)


def test_solve_traces_with_decorrelation_beats_warm_start():
    rng = np.random.default_rng(5)
    a = np.abs(rng.standard_normal((8, 3)))
    y = a @ rng.standard_normal((3, 20))
    start = rng.standard_normal((3, 20))
    phi = solve_traces(y, None, a, 0.1, 0.5, warm_start=start)
    assert trace_objective(y, None, a, phi, 0.1, 0.5) <= trace_objective(y, None, a, start, 0.1, 0.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.booleans(), st.floats(0, 1), st.floats(0, 1))
def test_solve_traces_never_worse_than_warm_start(seed, nonneg, g3, g4):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((5, 2))
    y = rng.standard_normal((5, 8))
    start = np.abs(rng.standard_normal((2, 8)))
    phi = solve_traces(y, None, a, g3, g4, nonneg, warm_start=start)
    assert trace_objective(y, None, a, phi, g3, g4) <= trace_objective(y, None, a, start, g3, g4) + 1e-12
    if nonneg:
        assert np.all(phi >= 0)


# -- transition fit ----------------------------------------------------------


def _simulate(w0, t_len, p, seed):
    rng = np.random.default_rng(seed)
    phi = np.zeros((p, t_len))
    phi[:, 0] = rng.standard_normal(p)
    for t in range(1, t_len):
        phi[:, t] = w0 @ phi[:, t - 1]
    return phi


def test_fit_transition_recovers_simulated_dynamics():
    theta = 0.3
    w0 = 0.97 * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    phi = _simulate(w0, 50, 2, 0)
    np.testing.assert_allclose(fit_transition(phi, 1e-10), w0, atol=1e-6)


def test_fit_transition_large_ridge_gives_identity():
    phi = np.random.default_rng(0).standard_normal((3, 40))
    np.testing.assert_allclose(fit_transition(phi, 1e10), np.eye(3), atol=1e-6)


def test_fit_transition_constant_trace_has_zero_residual():
    phi = np.full((1, 10), 2.5)
    w = fit_transition(phi, 0.0)
    assert np.sum((phi[:, 1:] - w @ phi[:, :-1]) ** 2) == pytest.approx(0.0, abs=1e-20)


def test_fit_transition_singular_without_ridge_raises():
    with pytest.raises(NumericError):
        fit_transition(np.ones((2, 10)), 0.0)
    with pytest.raises(ParameterError):
        fit_transition(np.ones((2, 10)), -1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-6, 10))
def test_fit_transition_satisfies_normal_equations(seed, g5):
    phi = np.random.default_rng(seed).standard_normal((3, 25))
    w = fit_transition(phi, g5)
    prev, nxt = phi[:, :-1], phi[:, 1:]
    lhs = w @ (prev @ prev.T + g5 * np.eye(3))
    rhs = nxt @ prev.T + g5 * np.eye(3)
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(rhs)


# -- assignment --------------------------------------------------------------


def test_assignment_examples():
    cost = 1.0 - np.eye(4)
    np.testing.assert_array_equal(linear_sum_assignment(cost), np.arange(4))
    perm = linear_sum_assignment(np.array([[4.0, 1.0], [2.0, 8.0]]))
    assert tuple(perm) == (1, 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6)).map(lambda s: (s[0], s[0])),
              elements=st.floats(-100, 100)))
def test_assignment_matches_brute_force(cost):
    n = cost.shape[0]
    perm = linear_sum_assignment(cost)
    assert sorted(perm) == list(range(n))
    best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    assert sum(cost[i, perm[i]] for i in range(n)) == pytest.approx(best, abs=1e-9)


def test_exact_trace_solve_handles_singular_normal_equations():
    # more components than channels: the quadratic has a flat direction
    rng = np.random.default_rng(9)
    a = rng.standard_normal((3, 5))
    y = rng.standard_normal((3, 12))
    phi = solve_traces(y, None, a, 0.3, 0.0)
    ab, rhs = normal_equations(y, None, a, 0.3)
    b = rhs.T.reshape(-1)
    res = banded_matvec(ab, phi.T.reshape(-1)) - b
    assert np.linalg.norm(res) <= 1e-10 * np.linalg.norm(b)
