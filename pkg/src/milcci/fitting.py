"""Alternating fit: per-variant component LASSO, normalization, per-trial trace solves."""

from __future__ import annotations

import itertools
import logging
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import NumericError, SchemaError
from .graph import SimilarityGraph, build_graphs
from .initialization import dict_learn, seed_model
from .model import Hyperparams, ModelState, Trial, TrialSet, build_loading
from .solvers.assignment import linear_sum_assignment
from .solvers.dynamics import fit_transition, least_squares_transition
from .solvers.lasso import LassoProblem, cd_lasso_variant
from .solvers.traces import solve_traces, trace_objective

log = logging.getLogger(__name__)

# blend factors tried when a full variant update would raise the objective
_BACKTRACK = (0.5, 0.25, 0.125, 0.0625, 0.03125)


@dataclass
class FitReport:
    state: ModelState
    iters: int
    final_objective: float
    per_iter_timing: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def n_workers() -> int:
    raw = os.environ.get("MILCCI_THREADS", "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError:
        return 1
    if n == 0:
        return os.cpu_count() or 1
    return max(n, 1)


def _check_alignment(state: ModelState, trials: TrialSet) -> None:
    if len(state.traces) != trials.n_trials:
        raise SchemaError("model and dataset have different trial counts")
    if state.n_channels != trials.n_channels:
        raise SchemaError("model and dataset have different channel counts")


def members(state: ModelState, k: int, i: int) -> list[int]:
    """Trials whose label selects variant ``i`` of category ``k``."""
    return [m for m, lab in enumerate(state.labels) if lab.entries[k] == i]


def category_reconstruction(state: ModelState, m: int, k: int) -> np.ndarray:
    a = state.components[k][:, :, state.labels[m].entries[k]]
    return a @ state.traces[m][state.group_index.slice(k)]


def reconstruct(state: ModelState, m: int) -> np.ndarray:
    return build_loading(state, state.labels[m]) @ state.traces[m]


def partial_residual(state: ModelState, trial: Trial, m: int, k: int) -> np.ndarray:
    """Data minus every other category's contribution; unobserved entries are 0."""
    res = trial.data.copy()
    for kk in range(len(state.categories)):
        if kk != k:
            res -= category_reconstruction(state, m, kk)
    if trial.mask is not None:
        res[~trial.mask] = 0.0
    return res


def _anchor(a: np.ndarray, graph: SimilarityGraph, i: int):
    col = graph.weights[:, i].copy()
    col[i] = 0.0
    mass = float(col.sum())
    if mass <= 0:
        return np.zeros(a.shape[:2]), 0.0
    return np.tensordot(a, col, axes=([2], [0])) / mass, mass


def update_variant(
    state: ModelState,
    trials: TrialSet,
    k: int,
    i: int,
    graph: SimilarityGraph,
    hyper: Hyperparams,
) -> tuple[Optional[np.ndarray], list[int]]:
    """Solve the consistency-regularized LASSO for one variant slice.

    Returns the new (N x p_k) slice, or None when the variant has neither
    trials nor siblings pulling on it, together with the member trials.
    The state is not modified.
    """
    tensor = state.components[k]
    idx = members(state, k, i)
    anchor, mass = _anchor(tensor, graph, i)
    weight = hyper.gamma2 * mass
    if not idx and weight == 0:
        return None, idx
    rows = state.group_index.slice(k)
    n = state.n_channels
    if idx:
        res = np.concatenate([partial_residual(state, trials.trials[m], m, k) for m in idx], axis=1)
        phi = np.concatenate([state.traces[m][rows] for m in idx], axis=1)
        if any(trials.trials[m].mask is not None for m in idx):
            mask = np.concatenate([trials.trials[m].observed for m in idx], axis=1)
        else:
            mask = None
    else:
        res = np.zeros((n, 0))
        phi = np.zeros((tensor.shape[1], 0))
        mask = None
    problem = LassoProblem(
        residual_stack=res,
        trace_stack=phi,
        anchor=anchor,
        anchor_weight=weight,
        gamma1=hyper.gamma1,
        nonneg=hyper.nonneg_components,
        mask=mask,
    )
    new = cd_lasso_variant(problem, tensor[:, :, i], hyper.cd_max_sweeps, hyper.cd_tol)
    return new, idx


def normalize_variant(state: ModelState, k: int, i: int) -> list[int]:
    """Scale each column of variant ``i`` to unit L1 norm; traces absorb the scale.

    Returns the indices of dead (all-zero) columns.
    """
    tensor = state.components[k]
    scale = np.abs(tensor[:, :, i]).sum(axis=0)
    dead = [int(j) for j in np.nonzero(scale == 0)[0]]
    factor = np.where(scale > 0, scale, 1.0)
    if np.all(factor == 1.0):
        return dead
    tensor[:, :, i] /= factor
    rows = state.group_index.slice(k)
    for m in members(state, k, i):
        state.traces[m][rows] *= factor[:, None]
    return dead


def normalize_components(state: ModelState) -> list[str]:
    """Normalize every variant slice in place; warns about all-zero columns."""
    notes = []
    for k, cat in enumerate(state.categories):
        for i in range(cat.size):
            for j in normalize_variant(state, k, i):
                notes.append(f"dead component {cat.name}[{j}] in variant {cat.values[i]!r}")
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    return notes


def consistency_penalty(tensor: np.ndarray, graph: SimilarityGraph) -> float:
    """0.5 * sum_i sum_{i' != i} lambda_{i',i} ||A_i' - A_i||_F^2."""
    k = tensor.shape[2]
    total = 0.0
    for i in range(k):
        for ip in range(k):
            lam = graph.weights[ip, i]
            if ip != i and lam:
                total += lam * float(np.sum((tensor[:, :, ip] - tensor[:, :, i]) ** 2))
    return 0.5 * total


def align_variants(state: ModelState, graphs: Sequence[SimilarityGraph], tol: float = 1e-12) -> int:
    """Relabel component columns inside each variant to agree with its siblings.

    Permuting the columns of one variant together with the matching trace
    rows of its member trials changes only the consistency penalty, so the
    fit cannot undo a swap on its own when gamma2 is small. Each variant is
    given the Hungarian-optimal order against its graph neighbours, and the
    permutation is kept only when the penalty drops. Returns how many
    variants were relabelled.
    """
    gi = state.group_index
    moved = 0
    for k, (tensor, graph) in enumerate(zip(state.components, graphs)):
        p = tensor.shape[1]
        if p < 2 or tensor.shape[2] < 2:
            continue
        for i in range(tensor.shape[2]):
            w = graph.weights[:, i] + graph.weights[i, :]
            w[i] = 0.0
            if not w.any():
                continue
            cur = tensor[:, :, i]
            # cost[target, source]: weighted distance of source column to siblings' target column
            cost = np.zeros((p, p))
            for ip in np.flatnonzero(w):
                sib = tensor[:, :, ip]
                d = np.sum((sib[:, :, None] - cur[:, None, :]) ** 2, axis=0)
                cost += w[ip] * d
            perm = linear_sum_assignment(cost)
            if np.array_equal(perm, np.arange(p)):
                continue
            before = float(np.trace(cost))
            after = float(cost[np.arange(p), perm].sum())
            if before - after <= tol * max(before, 1.0):
                continue
            tensor[:, :, i] = cur[:, perm]
            rows = gi.starts[k] + np.arange(p)
            order = np.arange(gi.total)
            order[rows] = rows[perm]
            for m in members(state, k, i):
                state.traces[m] = state.traces[m][order]
                if state.transitions is not None:
                    state.transitions[m] = state.transitions[m][np.ix_(order, order)]
            moved += 1
    return moved


def component_terms(state: ModelState, graphs: Sequence[SimilarityGraph], hyper: Hyperparams) -> float:
    val = 0.0
    for a, g in zip(state.components, graphs):
        val += hyper.gamma1 * float(np.abs(a).sum())
        if hyper.gamma2:
            val += hyper.gamma2 * consistency_penalty(a, g)
    return val


def trial_term(state: ModelState, trial: Trial, m: int, hyper: Hyperparams, loading=None) -> float:
    if loading is None:
        loading = build_loading(state, state.labels[m])
    w = state.transitions[m] if (hyper.lds_enabled and state.transitions) else None
    val = trace_objective(
        trial.data, trial.mask, loading, state.traces[m], hyper.gamma3, hyper.gamma4, w
    )
    if w is not None and hyper.gamma3:
        val += hyper.gamma3 * hyper.gamma5 * float(np.sum((w - np.eye(w.shape[0])) ** 2))
    return val


def trial_terms(state, trials, hyper, subset=None) -> np.ndarray:
    idx = range(trials.n_trials) if subset is None else subset
    cache: dict = {}
    out = []
    for m in idx:
        lab = state.labels[m]
        if lab not in cache:
            cache[lab] = build_loading(state, lab)
        out.append(trial_term(state, trials.trials[m], m, hyper, cache[lab]))
    return np.array(out, dtype=float)


def total_objective(state, trials, graphs, hyper) -> float:
    return component_terms(state, graphs, hyper) + float(trial_terms(state, trials, hyper).sum())


def _update_components(state, trials, graphs, hyper, per_trial: np.ndarray, notes: list[str]):
    """Gauss-Seidel sweep over all variants; each accepted step never raises the objective."""
    comp_val = component_terms(state, graphs, hyper)
    for k, cat in enumerate(state.categories):
        rows = state.group_index.slice(k)
        for i in range(cat.size):
            new, idx = update_variant(state, trials, k, i, graphs[k], hyper)
            if new is None:
                notes.append(f"variant {cat.name}={cat.values[i]!r} has no trials; left unchanged")
                continue
            old = state.components[k][:, :, i].copy()
            old_rows = {m: state.traces[m][rows].copy() for m in idx}
            current = comp_val + float(per_trial.sum())
            accepted = False
            for alpha in (1.0,) + _BACKTRACK:
                state.components[k][:, :, i] = old + alpha * (new - old)
                normalize_variant(state, k, i)
                cand_comp = component_terms(state, graphs, hyper)
                cand_trials = trial_terms(state, trials, hyper, idx)
                cand = cand_comp + float(per_trial.sum() - per_trial[idx].sum() + cand_trials.sum())
                if cand <= current:
                    comp_val = cand_comp
                    per_trial[idx] = cand_trials
                    accepted = True
                    break
                state.components[k][:, :, i] = old
                for m, r in old_rows.items():
                    state.traces[m][rows] = r
            if not accepted:
                log.debug("variant %s=%s: no descent step, kept", cat.name, cat.values[i])
            for j in np.nonzero(np.abs(state.components[k][:, :, i]).sum(axis=0) == 0)[0]:
                notes.append(f"dead component {cat.name}[{j}] in variant {cat.values[i]!r}")


def _resolve_members(state, trials, idx, hyper):
    for m in idx:
        loading = build_loading(state, state.labels[m])
        phi, w = _solve_trial(state, trials.trials[m], m, loading, hyper)
        state.traces[m] = phi
        if w is not None:
            state.transitions[m] = w


def reseed_variants(state, trials, graphs, hyper, objective: float) -> tuple[ModelState, float]:
    """Try restarting each variant from its siblings' weighted average.

    A variant can settle on a poor local solution (for example two columns
    collapsing onto one pattern) that its own LASSO step never leaves. Each
    candidate replaces the whole slice, or a single column of it, by the
    graph-weighted sibling mean, then alternates variant updates with member
    trace solves for ``hyper.reseed_rounds`` rounds. A candidate is kept only
    if the total objective goes down.
    """
    for k, cat in enumerate(state.categories):
        for i in range(cat.size):
            anchor, mass = _anchor(state.components[k], graphs[k], i)
            idx = members(state, k, i)
            if mass == 0 or not idx or not np.abs(anchor).sum(axis=0).all():
                continue
            for col in [None] + list(range(cat.n_components)):
                cand = state.copy()
                if col is None:
                    cand.components[k][:, :, i] = anchor
                else:
                    cand.components[k][:, col, i] = anchor[:, col]
                normalize_variant(cand, k, i)
                _resolve_members(cand, trials, idx, hyper)
                for _ in range(hyper.reseed_rounds):
                    new, _ = update_variant(cand, trials, k, i, graphs[k], hyper)
                    if new is None or not np.abs(new).sum(axis=0).all():
                        break
                    cand.components[k][:, :, i] = new
                    normalize_variant(cand, k, i)
                    _resolve_members(cand, trials, idx, hyper)
                obj = total_objective(cand, trials, graphs, hyper)
                if np.isfinite(obj) and obj < objective:
                    what = cat.values[i] if col is None else f"{cat.values[i]} column {col}"
                    log.info("restarted variant %s=%s: %.10g -> %.10g", cat.name, what, objective, obj)
                    state, objective = cand, obj
    return state, objective


def _solve_trial(state, trial, m, loading, hyper):
    phi0 = state.traces[m]
    if not hyper.lds_enabled:
        phi = solve_traces(
            trial.data, trial.mask, loading, hyper.gamma3, hyper.gamma4,
            hyper.nonneg_traces, None, hyper.trace_solver, phi0,
        )
        return phi, None
    w = state.transitions[m]
    phi = phi0
    eye = np.eye(w.shape[0])

    def joint(p_, w_):
        val = trace_objective(trial.data, trial.mask, loading, p_, hyper.gamma3, hyper.gamma4, w_)
        return val + hyper.gamma3 * hyper.gamma5 * float(np.sum((w_ - eye) ** 2))

    for _ in range(hyper.lds_inner_iters):
        phi = solve_traces(
            trial.data, trial.mask, loading, hyper.gamma3, hyper.gamma4,
            hyper.nonneg_traces, w, hyper.trace_solver, phi,
        )
        try:
            w_new = fit_transition(phi, hyper.gamma5)
        except NumericError:
            break
        if joint(phi, w_new) <= joint(phi, w):
            w = w_new
    return phi, w


def update_traces(state: ModelState, trials: TrialSet, hyper: Hyperparams, workers: int = 1):
    """Re-solve every trial's traces given the current loadings (in place)."""
    cache = {}
    for lab in state.labels:
        if lab not in cache:
            cache[lab] = build_loading(state, lab)
    jobs = [(m, t) for m, t in enumerate(trials.trials)]

    def run(job):
        m, t = job
        return _solve_trial(state, t, m, cache[state.labels[m]], hyper)

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for (m, _), (phi, w) in zip(jobs, results):
        state.traces[m] = phi
        if w is not None:
            state.transitions[m] = w
    return state


def _init_transitions(state: ModelState, trials: TrialSet, hyper: Hyperparams, workers: int):
    """LDS start: smoothness-prior traces, then an unregularized transition fit."""
    smooth = Hyperparams(**{**hyper.__dict__, "lds_enabled": False})
    update_traces(state, trials, smooth, workers)
    state.transitions = [least_squares_transition(phi) for phi in state.traces]


def noise_variance(state: ModelState, trials: TrialSet) -> float:
    ssr, count = 0.0, 0
    for m, t in enumerate(trials.trials):
        err = t.data - reconstruct(state, m)
        obs = t.observed
        ssr += float(np.sum(err[obs] ** 2))
        count += int(obs.sum())
    return ssr / count if count else 0.0


def atom_splits(sizes: Sequence[int]) -> Iterator[list[int]]:
    """Every way to deal atoms 0..P-1 into groups of the given sizes (order within a group ignored)."""

    def rec(pool, rest):
        if not rest:
            yield []
            return
        for group in itertools.combinations(pool, rest[0]):
            remaining = [a for a in pool if a not in group]
            for tail in rec(remaining, rest[1:]):
                yield list(group) + tail

    yield from rec(list(range(sum(sizes))), list(sizes))


def n_atom_splits(sizes: Sequence[int]) -> int:
    out, left = 1, sum(sizes)
    for s in sizes:
        out *= math.comb(left, s)
        left -= s
    return out


def outer_step(state, trials, graphs, hyper, notes, workers=1) -> float:
    """Column relabelling, one component sweep and one trace update; returns the new objective."""
    align_variants(state, graphs)
    per_trial = trial_terms(state, trials, hyper)
    _update_components(state, trials, graphs, hyper, per_trial, notes)
    update_traces(state, trials, hyper, workers)
    return total_objective(state, trials, graphs, hyper)


def initialize(trials: TrialSet, hyper: Hyperparams, workers: int = 1) -> ModelState:
    """Dictionary-learning start, then pick how atoms are split among categories.

    Which learned atom belongs to which category is not identified by the
    shared dictionary, and a wrong split is rarely undone by the alternating
    updates. When the number of splits is small, each one is run for a few
    outer iterations and the lowest objective wins.
    """
    sizes = [c.n_components for c in trials.categories]
    g1 = hyper.gamma1 if hyper.gamma1_init is None else hyper.gamma1_init
    init = dict_learn(
        trials, sum(sizes), g1, hyper.init_iters, hyper.seed,
        nonneg=hyper.nonneg_components or hyper.nonneg_traces,
        cd_max_sweeps=hyper.cd_max_sweeps, cd_tol=hyper.cd_tol,
    )
    ids = [t.id for t in trials.trials]

    def seeded(order):
        state = seed_model(init, trials.categories, trials.labels, ids, order)
        if hyper.nonneg_traces:
            state.traces = [np.maximum(p, 0.0) for p in state.traces]
        if hyper.lds_enabled:
            _init_transitions(state, trials, hyper, workers)
        return state

    n_splits = n_atom_splits(sizes)
    if hyper.assignment_probe_iters == 0 or n_splits == 1 or n_splits > hyper.max_assignment_probes:
        return seeded(None)
    graphs = build_graphs(trials.categories)
    best, best_obj = None, np.inf
    for order in atom_splits(sizes):
        state = seeded(order)
        obj = total_objective(state, trials, graphs, hyper)
        for _ in range(hyper.assignment_probe_iters):
            obj = outer_step(state, trials, graphs, hyper, [], workers)
        log.info("atom split %s scores %.10g", order, obj)
        if obj < best_obj:
            best, best_obj = state, obj
    return best


class _Extrapolator:
    """Line-search jumps along the last outer step (as in accelerated ALS for CP).

    A jump is kept only when it lowers the objective, so monotonicity holds.
    """

    max_fail = 4

    def __init__(self):
        self.power = 2.0
        self.fails = 0

    def attempt(self, it, before: ModelState, state: ModelState, obj, trials, graphs, hyper):
        jump = it ** (1.0 / self.power)
        cand = state.copy()
        cand.components = [b + jump * (a - b) for a, b in zip(state.components, before.components)]
        cand.traces = [b + jump * (a - b) for a, b in zip(state.traces, before.traces)]
        if hyper.nonneg_components:
            cand.components = [np.maximum(a, 0.0) for a in cand.components]
        if hyper.nonneg_traces:
            cand.traces = [np.maximum(p, 0.0) for p in cand.traces]
        normalize_components(cand)
        cand_obj = total_objective(cand, trials, graphs, hyper)
        if np.isfinite(cand_obj) and cand_obj < obj:
            self.fails = 0
            return cand, cand_obj
        self.fails += 1
        if self.fails == self.max_fail:
            self.power += 1.0
            self.fails = 0
        return state, obj


def fit(
    trials: TrialSet,
    hyper: Optional[Hyperparams] = None,
    callback: Optional[Callable[[int, float, float], None]] = None,
    init_state: Optional[ModelState] = None,
) -> FitReport:
    """Run graph construction, initialization, and the alternating updates."""
    hyper = (hyper or Hyperparams()).validate()
    workers = n_workers()
    graphs = build_graphs(trials.categories)
    notes: list[str] = []
    timings: list[float] = []

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        state = init_state.copy() if init_state is not None else initialize(trials, hyper, workers)
        _check_alignment(state, trials)
        if hyper.lds_enabled and state.transitions is None:
            _init_transitions(state, trials, hyper, workers)
        state.objective_history = [total_objective(state, trials, graphs, hyper)]
        state.converged = False
        it = 0
        before = None
        jumper = _Extrapolator() if hyper.extrapolate else None
        try:
            for it in range(1, hyper.max_outer_iters + 1):
                t0 = time.perf_counter()
                before = state.copy()
                obj = outer_step(state, trials, graphs, hyper, notes, workers)
                if jumper and it > 5:
                    state, obj = jumper.attempt(it, before, state, obj, trials, graphs, hyper)
                if hyper.reseed_every and it % hyper.reseed_every == 0:
                    state, obj = reseed_variants(state, trials, graphs, hyper, obj)
                if not np.isfinite(obj):
                    raise NumericError(f"objective became non-finite at iteration {it}")
                prev = state.objective_history[-1]
                state.objective_history.append(obj)
                timings.append(time.perf_counter() - t0)
                if callback is not None:
                    callback(it, obj, timings[-1])
                log.info("iter %d objective %.10g (%.3fs)", it, obj, timings[-1])
                if abs(prev - obj) / max(abs(prev), 1e-12) < hyper.tol:
                    state.converged = True
                    break
            else:
                it = hyper.max_outer_iters
        except NumericError as exc:
            # hand the caller the last state that passed a full iteration
            if before is not None:
                before.noise_variance_estimate = noise_variance(before, trials)
            exc.last_state = before
            raise
        state.noise_variance_estimate = noise_variance(state, trials)
    notes.extend(str(w.message) for w in caught)
    # deduplicate while keeping order
    notes = list(dict.fromkeys(notes))
    return FitReport(state, it, state.objective_history[-1], timings, notes)
