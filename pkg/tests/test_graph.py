import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milcci.graph import build_graph, raw_kernel
from milcci.model import CategorySpec


def test_categorical_three_values():
    g = build_graph(CategorySpec("c", ("a", "b", "c")))
    for i, row in enumerate(g.weights):
        expected = np.full(3, 0.5)
        expected[i] = 0.0
        np.testing.assert_allclose(row, expected)


def test_ordinal_example_values():
    cat = CategorySpec("o", ("1", "2", "3"), kind="ordinal", bandwidth=1.0)
    raw = raw_kernel(cat)
    # independent scalar evaluation of exp(-d^2 / 2)
    np.testing.assert_allclose(raw[0, 1:], [np.exp(-0.5), np.exp(-2.0)], rtol=1e-12)
    np.testing.assert_allclose(raw[0, 1:], [0.60653, 0.13534], atol=1e-5)
    g = build_graph(cat)
    np.testing.assert_allclose(g.weights[0, 1:], [0.81757, 0.18243], atol=1e-5)


def test_single_value_graph_is_zero():
    g = build_graph(CategorySpec("c", ("only",)))
    assert g.weights.shape == (1, 1) and g.weights[0, 0] == 0.0


def test_free_variant_row_is_zero():
    g = build_graph(CategorySpec("c", ("a", "b", "c"), free_variants=frozenset({1})))
    assert not g.weights[1].any()
    np.testing.assert_allclose(g.weights.sum(axis=1), [1, 0, 1])


def test_weights_are_read_only():
    g = build_graph(CategorySpec("c", ("a", "b")))
    with pytest.raises(ValueError):
        g.weights[0, 1] = 3.0


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.integers(-40, 40).map(lambda v: v / 4), min_size=2, max_size=7, unique=True),
    st.floats(0.1, 20),
)
def test_ordinal_kernel_properties(values, sigma):
    cat = CategorySpec("o", tuple(repr(v) for v in values), kind="ordinal", bandwidth=sigma)
    raw = raw_kernel(cat)
    np.testing.assert_array_equal(raw, raw.T)
    g = build_graph(cat)
    assert np.all(g.weights >= 0) and np.all(np.diag(g.weights) == 0)
    sums = g.weights.sum(axis=1)
    assert np.all((np.abs(sums - 1) <= 1e-12) | (sums == 0))
    x = cat.numeric_values()
    # closer values never get less weight (strictly more unless the kernel underflows)
    for i in range(len(x)):
        d = np.abs(x - x[i])
        for a in range(len(x)):
            for b in range(len(x)):
                if a != i and b != i and d[a] < d[b]:
                    assert raw[i, a] >= raw[i, b]
                    if raw[i, b] > 0:
                        assert raw[i, a] > raw[i, b]
