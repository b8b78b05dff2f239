import itertools
import math

import numpy as np
import pytest

from milcci import evaluate as E
from milcci.errors import ParameterError, SchemaError
from milcci.model import CategorySpec, Label, ModelState, Trial, TrialSet

from conftest import make_state, trials_from_state


@pytest.fixture
def truth_state(two_categories):
    labels = [Label((m % 3, m % 2)) for m in range(12)]
    return make_state(two_categories, 10, labels, t_len=20, seed=11, nonneg=True)


def _permuted(state, perm):
    """Reorder components within each category by ``perm`` (a list per category)."""
    out = state.copy()
    gi = state.group_index
    order = np.arange(gi.total)
    for k, p in enumerate(perm):
        out.components[k] = state.components[k][:, p, :].copy()
        order[gi.slice(k)] = gi.starts[k] + np.asarray(p)
    out.traces = [phi[order] for phi in state.traces]
    return out


def test_match_truth_against_itself(truth_state):
    r = E.match_and_score(truth_state, truth_state)
    assert r.mean_component_correlation == pytest.approx(1.0)
    assert r.mean_trace_correlation == pytest.approx(1.0)
    np.testing.assert_array_equal(r.permutation, np.arange(3))


def test_match_undoes_permutation(truth_state):
    shuffled = _permuted(truth_state, [[1, 0], [0]])
    r = E.match_and_score(shuffled, truth_state)
    assert r.mean_component_correlation == pytest.approx(1.0)
    assert r.mean_trace_correlation == pytest.approx(1.0)
    np.testing.assert_array_equal(r.permutation, [1, 0, 2])
    base = E.match_and_score(truth_state, truth_state)
    np.testing.assert_allclose(r.component_correlations, base.component_correlations)


def test_match_is_robust_to_small_noise(truth_state):
    rng = np.random.default_rng(0)
    noisy = truth_state.copy()
    for k, a in enumerate(noisy.components):
        unit = a / np.abs(a).sum(axis=0, keepdims=True)
        noisy.components[k] = unit + 0.01 * rng.standard_normal(a.shape) * np.abs(unit).max()
    r = E.match_and_score(noisy, truth_state)
    assert r.mean_component_correlation >= 0.99


def test_match_requires_same_component_count(truth_state):
    other = make_state([CategorySpec("x", ("a",), 2)], 10, truth_state.labels[:1])
    with pytest.raises(SchemaError):
        E.match_and_score(other, truth_state)


def test_pearson_constant_vector_warns():
    with pytest.warns(RuntimeWarning):
        assert E.pearson(np.ones(4), np.arange(4.0)) == 0.0


def test_reconstruction_metrics_examples(truth_state):
    trials = trials_from_state(truth_state)
    assert E.reconstruction_metrics(truth_state, trials)["pooled_mse"] == pytest.approx(0.0, abs=1e-20)
    zero = truth_state.copy()
    zero.components = [np.zeros_like(a) for a in zero.components]
    assert E.reconstruction_metrics(zero, trials)["pooled_relative_mse"] == pytest.approx(1.0)

    cat = CategorySpec("c", ("a",), 1)
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    state = ModelState([cat], [np.array([[[1.0]], [[0.0]]])], [np.array([[1.0, 0.0]])], [Label((0,))], ["t"])
    out = E.reconstruction_metrics(state, TrialSet([cat], [Trial(y, Label((0,)), "t")]))
    assert out["mse"][0] == pytest.approx(0.25) and out["relative_mse"][0] == pytest.approx(0.5)


def test_information_criteria_formula():
    out = E.criteria_from_fit(100.0, 100, 10)
    assert out["loglik"] == pytest.approx(-50 * (math.log(2 * math.pi) + 1))
    assert out["loglik"] == pytest.approx(-141.894, abs=1e-3)
    assert out["aic"] == pytest.approx(303.787, abs=1e-3)
    zero_k = E.criteria_from_fit(100.0, 100, 0)
    assert zero_k["aic"] == -2 * zero_k["loglik"]
    more = E.criteria_from_fit(100.0, 100, 11)
    for key in ("aic", "bic", "hqc"):
        assert more[key] > out[key]
    with pytest.warns(RuntimeWarning):
        assert E.criteria_from_fit(0.0, 10, 1)["loglik"] == math.inf


def test_information_criteria_modes(truth_state):
    trials = trials_from_state(truth_state, noise=0.1)
    nnz = E.information_criteria(truth_state, trials)
    full = E.information_criteria(truth_state, trials, "components_plus_traces")
    assert full["k"] == nnz["k"] + sum(p.size for p in truth_state.traces)
    with pytest.raises(ParameterError):
        E.information_criteria(truth_state, trials, "everything")


def _toy():
    cat = CategorySpec("c", ("a",), 1)
    y = np.array([[1.0, 0.0], [0.0, 0.0]])
    state = ModelState([cat], [np.array([[[1.0]], [[0.0]]])], [np.array([[0.9, 0.0]])], [Label((0,))], ["t"])
    return state, TrialSet([cat], [Trial(y, Label((0,)), "t")])


def test_leave_one_out_toy_by_hand():
    state, trials = _toy()
    out = E.leave_one_out(state, trials)
    base = 0.01 / 4  # only entry (0, 0) is off, by 0.1
    omit0 = 1.0 / 4  # removing channel 0 zeroes its reconstruction
    assert out["baseline_mse"] == pytest.approx(base)
    assert out["mse"][0] == pytest.approx(omit0)
    assert out["contribution"][0] == pytest.approx(100 * (omit0 - base) / base)
    assert out["contribution"][1] == 0.0  # channel 1 is absent from every component


def test_leave_one_out_bounds(truth_state):
    trials = trials_from_state(truth_state, noise=0.2)
    assert np.all(E.leave_one_out(truth_state, trials)["contribution"] >= -100)


def _brute_shapley(value, n):
    phi = np.zeros(n)
    perms = list(itertools.permutations(range(n)))
    for order in perms:
        mask = np.zeros(n, bool)
        prev = value(mask)
        for ch in order:
            mask[ch] = True
            cur = value(mask)
            phi[ch] += cur - prev
            prev = cur
    return phi / len(perms)


def test_exhaustive_shapley_matches_permutation_oracle():
    cat = CategorySpec("c", ("a", "b"), 2)
    labels = [Label((m % 2,)) for m in range(4)]
    state = make_state([cat], 6, labels, t_len=5, seed=2)
    trials = trials_from_state(state, noise=0.3)
    exact = E.shapley_approx(state, trials, None)
    oracle = _brute_shapley(lambda mask: E.coalition_value(state, trials, mask), 6)
    np.testing.assert_allclose(exact, oracle, atol=1e-10)
    full = E.coalition_value(state, trials, np.ones(6, bool))
    empty = E.coalition_value(state, trials, np.zeros(6, bool))
    assert exact.sum() == pytest.approx(full - empty, abs=1e-9)


def test_symmetric_channels_share_credit():
    cat = CategorySpec("c", ("a",), 1)
    rng = np.random.default_rng(4)
    a = np.abs(rng.standard_normal((5, 1, 1)))
    a[1] = a[0]
    phi = rng.standard_normal((1, 8))
    y = a[:, :, 0] @ phi + 0.05 * rng.standard_normal((5, 8))
    y[1] = y[0]
    state = ModelState([cat], [a], [phi], [Label((0,))], ["t"])
    trials = TrialSet([cat], [Trial(y, Label((0,)), "t")])
    est = E.shapley_approx(state, trials, 2000, seed=0)
    assert abs(est[0] - est[1]) <= 0.05 * abs(est[0])
    assert np.all(np.isfinite(E.shapley_approx(state, trials, 1, seed=0)))
    with pytest.raises(ParameterError):
        E.shapley_approx(state, trials, 0)


def test_permutation_p_values_formula(truth_state):
    trials = trials_from_state(truth_state, noise=0.05)
    out = E.permutation_tests(truth_state, trials, n_perm=1, seed=0)
    for p in out["p_values"].values():
        assert p in (0.5, 1.0)
    assert E.permutation_pvalue(1.0, np.array([0.5, 2.0, 3.0])) == pytest.approx(0.5)
    with pytest.raises(ParameterError):
        E.permutation_tests(truth_state, trials, n_perm=0)


def test_validate_report_shapes(truth_state):
    trials = trials_from_state(truth_state, noise=0.05)
    rep = E.validate(truth_state, trials, n_perm=20, n_coalitions=5, seed=1)
    doc = rep.to_dict()
    assert len(doc["leave_one_out_mse"]) == 10 and len(doc["shapley"]) == 10
    assert set(doc["p_values"]) == set(E.NULLS)
    assert all(0 < p <= 1 for p in doc["p_values"].values())
    assert len(doc["component_p_values"]) == 3


def test_frobenius_distance_examples():
    a = np.array([[1.0, 2.0], [3.0, -1.0]])
    assert E.frobenius_distance(a, a) == 0.0
    assert E.frobenius_distance(a, -a) == pytest.approx(math.sqrt(2))
    assert E.frobenius_distance([[1.0, 0.0]], [[0.0, 1.0]]) == pytest.approx(1.0)
    assert E.frobenius_distance(np.zeros(3), np.zeros(3)) == 0.0
    b = np.random.default_rng(0).standard_normal((2, 2))
    assert E.frobenius_distance(a, b) == E.frobenius_distance(b, a)
    assert 0 <= E.frobenius_distance(a, b) <= math.sqrt(2)
    with pytest.raises(SchemaError):
        E.frobenius_distance(np.zeros(2), np.zeros(3))
