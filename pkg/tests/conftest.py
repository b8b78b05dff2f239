import numpy as np
import pytest

from milcci.model import CategorySpec, Label, ModelState, Trial, TrialSet


def make_state(categories, n, labels, t_len=6, seed=0, nonneg=False):
    """Random model state with the given label list."""
    rng = np.random.default_rng(seed)
    comps = [rng.standard_normal((n, c.n_components, c.size)) for c in categories]
    if nonneg:
        comps = [np.abs(a) for a in comps]
    p = sum(c.n_components for c in categories)
    traces = [rng.standard_normal((p, t_len)) for _ in labels]
    ids = [f"t{m}" for m in range(len(labels))]
    return ModelState(categories, comps, traces, list(labels), ids)


def trials_from_state(state, noise=0.0, seed=1):
    from milcci.model import build_loading

    rng = np.random.default_rng(seed)
    trials = []
    for m, lab in enumerate(state.labels):
        y = build_loading(state, lab) @ state.traces[m]
        y = y + noise * rng.standard_normal(y.shape)
        trials.append(Trial(y, lab, state.trial_ids[m]))
    return TrialSet(state.categories, trials)


@pytest.fixture
def two_categories():
    return [
        CategorySpec("difficulty", ("1", "2", "3"), 2, "ordinal", 1.0),
        CategorySpec("choice", ("I", "II"), 1),
    ]


@pytest.fixture
def small_problem(two_categories):
    labels = [Label((i % 3, i % 2)) for i in range(12)]
    state = make_state(two_categories, 8, labels, t_len=10, seed=3, nonneg=True)
    return state, trials_from_state(state)
