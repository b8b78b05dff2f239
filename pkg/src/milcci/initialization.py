"""Dictionary-learning warm start and its expansion into per-category variant tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError, SchemaError
from .model import CategorySpec, Label, ModelState, TrialSet
from .solvers.lasso import LassoProblem, cd_lasso_variant


@dataclass
class InitResult:
    dictionary: np.ndarray  # N x P, columns with unit L1 norm (or zero)
    codes: list[np.ndarray]  # per trial, P x T_m
    n_iters_run: int
    error_history: list[float] = field(default_factory=list)
    warning: Optional[str] = None


def _stack(trials: TrialSet):
    y = np.concatenate([t.data for t in trials.trials], axis=1)
    mask = np.concatenate([t.observed for t in trials.trials], axis=1)
    bounds = np.cumsum([0] + [t.n_timepoints for t in trials.trials])
    return y, (None if mask.all() else mask), bounds


def _recon_error(y, mask, d, c) -> float:
    err = y - d @ c
    if mask is not None:
        err = err[mask]
    return float(np.sum(err**2))


def dict_learn(
    trials: TrialSet,
    n_atoms: int,
    gamma1_init: float = 0.05,
    n_iters: int = 30,
    seed: int = 0,
    nonneg: bool = False,
    cd_max_sweeps: int = 200,
    cd_tol: float = 1e-7,
) -> InitResult:
    """Alternate LASSO coding of all time points and a least-squares dictionary update.

    Both steps are coordinate descent on the observed entries only. After each
    round the atoms are scaled to unit L1 norm and the codes absorb the scale.
    """
    if n_atoms < 1:
        raise ParameterError("number of atoms must be >= 1")
    if n_iters < 1:
        raise ParameterError("dictionary learning needs n_iters >= 1")
    if gamma1_init < 0:
        raise ParameterError("gamma1_init must be >= 0")
    y, mask, bounds = _stack(trials)
    n = y.shape[0]

    def split(c):
        return [c[:, bounds[i] : bounds[i + 1]].copy() for i in range(len(bounds) - 1)]

    observed = y if mask is None else y[mask]
    if not np.any(observed):
        c = np.zeros((n_atoms, y.shape[1]))
        return InitResult(np.zeros((n, n_atoms)), split(c), 0, [0.0], "all-zero data")

    rng = np.random.default_rng(seed)
    low = 0.01 if nonneg else 0.0
    d = rng.uniform(low, 1.0, size=(n, n_atoms))
    d /= np.abs(d).sum(axis=0, keepdims=True)
    c = np.zeros((n_atoms, y.shape[1]))
    mask_t = None if mask is None else mask.T
    history = []
    for _ in range(n_iters):
        coding = LassoProblem(y.T, d.T, gamma1=gamma1_init, nonneg=nonneg, mask=mask_t)
        c = cd_lasso_variant(coding, c.T, cd_max_sweeps, cd_tol).T
        fitting = LassoProblem(y, c, nonneg=nonneg, mask=mask)
        d = cd_lasso_variant(fitting, d, cd_max_sweeps, cd_tol)
        scale = np.abs(d).sum(axis=0)
        live = scale > 0
        d[:, live] /= scale[live]
        c[live] *= scale[live, None]
        history.append(_recon_error(y, mask, d, c))
    return InitResult(d, split(c), n_iters, history)


def seed_model(
    init: InitResult,
    categories: Sequence[CategorySpec],
    labels: Sequence[Label],
    trial_ids: Sequence[str],
    order: Optional[Sequence[int]] = None,
) -> ModelState:
    """Give the first p_a atoms to the first category, the next p_b to the second, ...

    ``order`` reorders the atoms first (default: as learned). Every variant
    of a category starts as a copy of its block of atoms.
    """
    total = sum(c.n_components for c in categories)
    if init.dictionary.shape[1] != total:
        raise SchemaError(
            f"dictionary has {init.dictionary.shape[1]} atoms but categories need {total}"
        )
    if len(init.codes) != len(labels):
        raise SchemaError("one code matrix per trial is required")
    order = np.arange(total) if order is None else np.asarray(order, dtype=int)
    if sorted(order.tolist()) != list(range(total)):
        raise SchemaError(f"atom order must be a permutation of 0..{total - 1}")
    dictionary = init.dictionary[:, order]
    components = []
    start = 0
    for cat in categories:
        block = dictionary[:, start : start + cat.n_components]
        components.append(np.repeat(block[:, :, None], cat.size, axis=2))
        start += cat.n_components
    return ModelState(
        categories=list(categories),
        components=components,
        traces=[c[order].copy() for c in init.codes],
        labels=list(labels),
        trial_ids=[str(i) for i in trial_ids],
    )
