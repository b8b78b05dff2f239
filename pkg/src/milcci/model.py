"""Domain types shared by every stage: dataset schema, hyperparameters, model state."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError, SchemaError

CATEGORY_KINDS = ("categorical", "ordinal")
PREPROCESS_MODES = ("none", "tanh")


@dataclass(frozen=True)
class CategorySpec:
    """One metadata axis (e.g. difficulty) and the components it owns.

    ``values`` is ordered; the position of a token is its variant index.
    ``free_variants`` lists value indices that are exempt from the
    cross-variant consistency penalty.
    """

    name: str
    values: tuple[str, ...]
    n_components: int = 1
    kind: str = "categorical"
    bandwidth: Optional[float] = None
    free_variants: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(str(v) for v in self.values))
        object.__setattr__(self, "free_variants", frozenset(int(i) for i in self.free_variants))
        if not self.name:
            raise SchemaError("category name must be non-empty")
        if self.kind not in CATEGORY_KINDS:
            raise SchemaError(f"category {self.name!r}: unknown kind {self.kind!r}")
        if len(self.values) < 1:
            raise SchemaError(f"category {self.name!r}: needs at least one value")
        if len(set(self.values)) != len(self.values):
            raise SchemaError(f"category {self.name!r}: duplicate values")
        if int(self.n_components) < 1:
            raise SchemaError(f"category {self.name!r}: n_components must be >= 1")
        for i in self.free_variants:
            if not 0 <= i < len(self.values):
                raise SchemaError(f"category {self.name!r}: free variant index {i} out of range")
        if self.kind == "ordinal":
            self.numeric_values()  # raises on non-numeric tokens
            if self.bandwidth is None or not math.isfinite(self.bandwidth) or self.bandwidth <= 0:
                raise ParameterError(
                    f"category {self.name!r}: ordinal categories need a finite bandwidth > 0"
                )

    @property
    def size(self) -> int:
        return len(self.values)

    def numeric_values(self) -> np.ndarray:
        try:
            out = np.array([float(v) for v in self.values])
        except ValueError:
            raise SchemaError(
                f"category {self.name!r}: ordinal values must be numeric, got {self.values}"
            ) from None
        if not np.all(np.isfinite(out)):
            raise SchemaError(f"category {self.name!r}: ordinal values must be finite")
        return out


def value_index(category: CategorySpec, token: str) -> int:
    """Return the 0-based variant index of ``token`` within ``category``."""
    try:
        return category.values.index(str(token))
    except ValueError:
        raise SchemaError(
            f"category {category.name!r} has no value {token!r} (known: {list(category.values)})"
        ) from None


@dataclass(frozen=True)
class Label:
    """Per-trial variant indices, one per category in declaration order."""

    entries: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(int(e) for e in self.entries))

    def __getitem__(self, k: int) -> int:
        return self.entries[k]

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_tokens(cls, categories: Sequence[CategorySpec], tokens: Sequence[str]) -> "Label":
        if len(tokens) != len(categories):
            raise SchemaError(
                f"label has {len(tokens)} entries but there are {len(categories)} categories"
            )
        return cls(tuple(value_index(c, t) for c, t in zip(categories, tokens)))

    def tokens(self, categories: Sequence[CategorySpec]) -> list[str]:
        return [c.values[i] for c, i in zip(categories, self.entries)]

    def check(self, categories: Sequence[CategorySpec]) -> None:
        if len(self.entries) != len(categories):
            raise SchemaError(
                f"label has {len(self.entries)} entries but there are {len(categories)} categories"
            )
        for c, i in zip(categories, self.entries):
            if not 0 <= i < c.size:
                raise SchemaError(f"label index {i} out of range for category {c.name!r}")


@dataclass
class Trial:
    data: np.ndarray
    label: Label
    id: str
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise SchemaError(f"trial {self.id!r}: data must be a 2-D (channels x time) matrix")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape:
                raise SchemaError(f"trial {self.id!r}: mask shape differs from data shape")
            if self.mask.all():
                self.mask = None
        if self.data.shape[1] < 2:
            raise SchemaError(f"trial {self.id!r}: needs at least 2 time points")
        observed = self.data if self.mask is None else self.data[self.mask]
        if not np.all(np.isfinite(observed)):
            raise SchemaError(f"trial {self.id!r}: observed entries must be finite")
        if self.mask is not None:
            # unobserved entries never enter a fidelity sum; keep them as 0
            self.data = np.where(self.mask, self.data, 0.0)

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[1]

    @property
    def observed(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.data.shape, dtype=bool)
        return self.mask


@dataclass
class TrialSet:
    categories: list[CategorySpec]
    trials: list[Trial]
    channel_names: Optional[list[str]] = None
    preprocess: str = "none"
    preprocessed: bool = False  # True once ``preprocess`` has been applied to ``trials``

    def __post_init__(self):
        self.categories = list(self.categories)
        self.trials = list(self.trials)
        if not self.categories:
            raise SchemaError("at least one category is required")
        if len({c.name for c in self.categories}) != len(self.categories):
            raise SchemaError("category names must be unique")
        if not self.trials:
            raise SchemaError("a dataset needs at least one trial")
        if self.preprocess not in PREPROCESS_MODES:
            raise SchemaError(f"unknown preprocess mode {self.preprocess!r}")
        n = self.trials[0].data.shape[0]
        if self.channel_names is None:
            self.channel_names = [f"ch{i}" for i in range(n)]
        self.channel_names = [str(c) for c in self.channel_names]
        if len(self.channel_names) != n:
            raise SchemaError(f"{len(self.channel_names)} channel names for {n} channels")
        ids = set()
        for t in self.trials:
            if t.data.shape[0] != n:
                raise SchemaError(
                    f"trial {t.id!r} has {t.data.shape[0]} channels, expected {n}"
                )
            if t.id in ids:
                raise SchemaError(f"duplicate trial id {t.id!r}")
            ids.add(t.id)
            t.label.check(self.categories)

    @property
    def n_channels(self) -> int:
        return self.trials[0].data.shape[0]

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def labels(self) -> list[Label]:
        return [t.label for t in self.trials]

    def group_index(self) -> "GroupIndex":
        return GroupIndex.from_categories(self.categories)

    def apply_preprocess(self) -> "TrialSet":
        """Return a copy with the declared nonlinearity applied to the data."""
        if self.preprocess == "none" or self.preprocessed:
            return self
        # tanh rounds to +-1 for |x| > ~19; keep values strictly inside (-1, 1)
        edge = np.nextafter(1.0, 0.0)
        trials = [
            Trial(np.clip(np.tanh(t.data), -edge, edge), t.label, t.id, t.mask) for t in self.trials
        ]
        return TrialSet(self.categories, trials, self.channel_names, self.preprocess, True)


@dataclass(frozen=True)
class GroupIndex:
    """Contiguous trace-row ranges owned by each category."""

    starts: tuple[int, ...]
    sizes: tuple[int, ...]

    @classmethod
    def from_categories(cls, categories: Sequence[CategorySpec]) -> "GroupIndex":
        sizes = tuple(int(c.n_components) for c in categories)
        starts = tuple(int(s) for s in np.concatenate([[0], np.cumsum(sizes)[:-1]]))
        return cls(starts, sizes)

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def __len__(self) -> int:
        return len(self.sizes)

    def slice(self, k: int) -> slice:
        return slice(self.starts[k], self.starts[k] + self.sizes[k])

    def owner(self, row: int) -> tuple[int, int]:
        """Map a global trace row to (category, component-within-category)."""
        for k, (s, p) in enumerate(zip(self.starts, self.sizes)):
            if s <= row < s + p:
                return k, row - s
        raise IndexError(row)


@dataclass
class TraceSolverParams:
    max_grad_iters: int = 500
    step_size: Optional[float] = None  # None: 1/L from power iteration
    huber_eps: float = 1e-8

    def validate(self):
        if self.max_grad_iters < 1:
            raise ParameterError("max_grad_iters must be >= 1")
        if not self.huber_eps > 0:
            raise ParameterError("huber_eps must be > 0")
        if self.step_size is not None and not self.step_size > 0:
            raise ParameterError("step_size must be > 0")


@dataclass
class Hyperparams:
    gamma1: float = 0.05
    gamma2: float = 0.05
    gamma3: float = 0.1
    gamma4: float = 0.0
    gamma5: float = 0.1
    nonneg_components: bool = False
    nonneg_traces: bool = False
    max_outer_iters: int = 50
    tol: float = 1e-6
    trace_solver: TraceSolverParams = field(default_factory=TraceSolverParams)
    lds_enabled: bool = False
    lds_inner_iters: int = 3
    cd_max_sweeps: int = 200
    cd_tol: float = 1e-7
    extrapolate: bool = True
    init_iters: int = 30
    assignment_probe_iters: int = 10  # outer iterations spent scoring each atom-to-category split
    max_assignment_probes: int = 24
    reseed_every: int = 20  # outer iterations between variant restart attempts (0: never)
    reseed_rounds: int = 5  # update/re-solve rounds spent on each restart candidate
    gamma1_init: Optional[float] = None
    seed: int = 0

    def validate(self) -> "Hyperparams":
        for name in ("gamma1", "gamma2", "gamma3", "gamma4", "gamma5"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ParameterError(f"{name} must be a finite nonnegative number, got {v}")
        if self.gamma1_init is not None and not self.gamma1_init >= 0:
            raise ParameterError("gamma1_init must be >= 0")
        if not self.tol > 0:
            raise ParameterError("tol must be > 0")
        if self.max_outer_iters < 0:
            raise ParameterError("max_outer_iters must be >= 0")
        if not 3 <= self.lds_inner_iters <= 5:
            raise ParameterError("lds_inner_iters must lie in [3, 5]")
        if self.cd_max_sweeps < 1 or not self.cd_tol > 0:
            raise ParameterError("cd_max_sweeps must be >= 1 and cd_tol > 0")
        if self.init_iters < 1:
            raise ParameterError("init_iters must be >= 1")
        if self.reseed_every < 0 or self.reseed_rounds < 1:
            raise ParameterError("reseed_every must be >= 0 and reseed_rounds >= 1")
        if self.assignment_probe_iters < 0 or self.max_assignment_probes < 1:
            raise ParameterError("assignment_probe_iters must be >= 0 and max_assignment_probes >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed must be a 64-bit unsigned integer")
        self.trace_solver.validate()
        return self


@dataclass
class ModelState:
    """Fitted (or initialized) parameters for a dataset.

    ``components[k]`` has shape (N, p_k, |k|); ``traces[m]`` has shape
    (P, T_m). ``labels`` and ``trial_ids`` tie the traces to trials.
    """

    categories: list[CategorySpec]
    components: list[np.ndarray]
    traces: list[np.ndarray]
    labels: list[Label]
    trial_ids: list[str]
    transitions: Optional[list[np.ndarray]] = None
    objective_history: list[float] = field(default_factory=list)
    converged: bool = False
    noise_variance_estimate: float = 0.0

    @property
    def group_index(self) -> GroupIndex:
        return GroupIndex.from_categories(self.categories)

    @property
    def n_channels(self) -> int:
        return self.components[0].shape[0]

    @property
    def n_total_components(self) -> int:
        return self.group_index.total

    def copy(self) -> "ModelState":
        return ModelState(
            categories=list(self.categories),
            components=[a.copy() for a in self.components],
            traces=[p.copy() for p in self.traces],
            labels=list(self.labels),
            trial_ids=list(self.trial_ids),
            transitions=None if self.transitions is None else [w.copy() for w in self.transitions],
            objective_history=list(self.objective_history),
            converged=self.converged,
            noise_variance_estimate=self.noise_variance_estimate,
        )

    def check(self) -> None:
        gi = self.group_index
        n = self.n_channels
        for cat, a in zip(self.categories, self.components):
            if a.shape != (n, cat.n_components, cat.size):
                raise SchemaError(
                    f"component tensor for {cat.name!r} has shape {a.shape}, "
                    f"expected {(n, cat.n_components, cat.size)}"
                )
        if len(self.traces) != len(self.labels) or len(self.labels) != len(self.trial_ids):
            raise SchemaError("traces, labels and trial ids must align")
        for phi in self.traces:
            if phi.shape[0] != gi.total:
                raise SchemaError(f"trace matrix has {phi.shape[0]} rows, expected {gi.total}")


def build_loading(state: ModelState, label: Label) -> np.ndarray:
    """Concatenate the label-selected variant of every category (N x P)."""
    label.check(state.categories)
    return np.concatenate(
        [a[:, :, label.entries[k]] for k, a in enumerate(state.components)], axis=1
    )
