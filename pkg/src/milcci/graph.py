"""Label-similarity graphs used by the cross-variant consistency penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .model import CategorySpec

KERNELS = ("gaussian",)


@dataclass(frozen=True)
class SimilarityGraph:
    category: CategorySpec
    weights: np.ndarray  # |k| x |k|, zero diagonal, rows sum to 1 or 0

    def column_mass(self, i: int) -> float:
        """Total weight pulling variant ``i`` toward its siblings."""
        return float(self.weights[:, i].sum())


def raw_kernel(category: CategorySpec, kernel: str = "gaussian") -> np.ndarray:
    """Pre-normalization similarity matrix, diagonal included."""
    if kernel not in KERNELS:
        raise ParameterError(f"unknown kernel {kernel!r}; available: {KERNELS}")
    k = category.size
    if category.kind == "categorical":
        return np.ones((k, k))
    sigma = category.bandwidth
    if sigma is None or not sigma > 0:
        raise ParameterError(f"category {category.name!r}: bandwidth must be > 0")
    x = category.numeric_values()
    d2 = (x[:, None] - x[None, :]) ** 2
    return np.exp(-d2 / (2.0 * sigma**2))


def build_graph(category: CategorySpec, kernel: str = "gaussian") -> SimilarityGraph:
    w = raw_kernel(category, kernel)
    np.fill_diagonal(w, 0.0)
    for i in category.free_variants:
        w[i, :] = 0.0
    sums = np.abs(w).sum(axis=1, keepdims=True)
    w = np.divide(w, sums, out=np.zeros_like(w), where=sums > 0)
    w.setflags(write=False)
    return SimilarityGraph(category, w)


def build_graphs(categories, kernel: str = "gaussian") -> list[SimilarityGraph]:
    return [build_graph(c, kernel) for c in categories]
