"""Scoring against ground truth and post-hoc validation of a fitted model."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParameterError, SchemaError
from .model import ModelState, TrialSet, build_loading
from .solvers.assignment import linear_sum_assignment

DF_MODES = ("components_nnz", "components_plus_traces")
NULLS = ("shuffle_rows", "random_control", "shuffle_each_component")


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; 0 (with a warning) when either side is constant."""
    x = np.ravel(x) - np.mean(x)
    y = np.ravel(y) - np.mean(y)
    den = math.sqrt(float(x @ x) * float(y @ y))
    if den == 0:
        warnings.warn("zero-variance vector in correlation; reported as 0", RuntimeWarning)
        return 0.0
    return float(np.clip((x @ y) / den, -1.0, 1.0))


@dataclass
class MatchResult:
    permutation: np.ndarray  # permutation[true_j] = matched estimated component
    component_correlations: np.ndarray
    trace_correlations: np.ndarray

    @property
    def mean_component_correlation(self) -> float:
        return float(np.mean(self.component_correlations))

    @property
    def mean_trace_correlation(self) -> float:
        return float(np.mean(self.trace_correlations))

    def to_dict(self) -> dict:
        return {
            "permutation": [int(p) for p in self.permutation],
            "component_correlations": [float(c) for c in self.component_correlations],
            "trace_correlations": [float(c) for c in self.trace_correlations],
            "mean_component_correlation": self.mean_component_correlation,
            "mean_trace_correlation": self.mean_trace_correlation,
        }


def effective_loadings(components, labels) -> np.ndarray:
    """Per-trial loading columns stacked over trials: (P, N * M)."""
    cols = []
    for lab in labels:
        cols.append(np.concatenate([a[:, :, lab.entries[k]] for k, a in enumerate(components)], axis=1))
    return np.concatenate(cols, axis=0).T


def unit_scaled(components, traces, labels):
    """Copies with every variant column at unit L1 norm and traces rescaled to match."""
    comps = [a.copy() for a in components]
    phis = [p.copy() for p in traces]
    start = 0
    for k, a in enumerate(comps):
        scale = np.abs(a).sum(axis=0)  # (p_k, |k|)
        safe = np.where(scale > 0, scale, 1.0)
        a /= safe[None]
        for m, lab in enumerate(labels):
            phis[m][start : start + a.shape[1]] *= safe[:, lab.entries[k], None]
        start += a.shape[1]
    return comps, phis


def match_and_score(est: ModelState, truth) -> MatchResult:
    """Align estimated components to the truth and correlate components and traces.

    Components are compared through the loading each trial actually uses, so
    categories with different numbers of variants are comparable. Both sides
    are put on the unit-L1 component scale first; otherwise per-variant scale
    differences leak into the pooled trace correlation.
    """
    labels = truth.labels
    if len(est.traces) != len(truth.traces):
        raise SchemaError("estimate and truth cover different numbers of trials")
    est_comps, est_traces = unit_scaled(est.components, est.traces, labels)
    true_comps, true_traces = unit_scaled(truth.components, truth.traces, labels)
    l_est = effective_loadings(est_comps, labels)
    l_true = effective_loadings(true_comps, labels)
    if l_est.shape != l_true.shape:
        raise SchemaError(
            f"estimate has {l_est.shape[0]} components, truth has {l_true.shape[0]}"
        )
    p = l_true.shape[0]
    t_est = np.concatenate(est_traces, axis=1)
    t_true = np.concatenate(true_traces, axis=1)
    corr = np.array([[pearson(l_true[a], l_est[b]) for b in range(p)] for a in range(p)])
    perm = linear_sum_assignment(1.0 - np.abs(corr))
    comp = np.array([corr[a, perm[a]] for a in range(p)])
    trace = np.array([pearson(t_true[a], t_est[perm[a]]) for a in range(p)])
    return MatchResult(perm, comp, trace)


def _pooled_mse(components, traces, labels, trials: TrialSet) -> float:
    ssr, count = 0.0, 0
    cache = {}
    for m, t in enumerate(trials.trials):
        lab = labels[m]
        if lab not in cache:
            cache[lab] = np.concatenate(
                [a[:, :, lab.entries[k]] for k, a in enumerate(components)], axis=1
            )
        err = t.data - cache[lab] @ traces[m]
        if t.mask is None:
            ssr += float(np.sum(err**2))
            count += err.size
        else:
            ssr += float(np.sum(err[t.mask] ** 2))
            count += int(t.mask.sum())
    return ssr / count


def pooled_mse(state: ModelState, trials: TrialSet, components=None) -> float:
    comps = state.components if components is None else components
    return _pooled_mse(comps, state.traces, state.labels, trials)


def reconstruction_metrics(state: ModelState, trials: TrialSet) -> dict:
    mse, rel, counts = [], [], []
    for m, t in enumerate(trials.trials):
        obs = t.observed
        y = t.data[obs]
        err = y - (build_loading(state, state.labels[m]) @ state.traces[m])[obs]
        e = float(np.mean(err**2))
        power = float(np.mean(y**2))
        mse.append(e)
        rel.append(e / power if power > 0 else float("nan"))
        counts.append(int(obs.sum()))
    w = np.array(counts, dtype=float)
    y_pow = np.array([float(np.mean(t.data[t.observed] ** 2)) for t in trials.trials])
    pooled_mse_ = float(np.sum(np.array(mse) * w) / w.sum())
    pooled_pow = float(np.sum(y_pow * w) / w.sum())
    return {
        "mse": mse,
        "relative_mse": rel,
        "pooled_mse": pooled_mse_,
        "pooled_relative_mse": pooled_mse_ / pooled_pow if pooled_pow > 0 else float("nan"),
    }


def information_criteria(state: ModelState, trials: TrialSet, df_mode: str = "components_nnz") -> dict:
    if df_mode not in DF_MODES:
        raise ParameterError(f"df_mode must be one of {DF_MODES}")
    k = sum(int(np.count_nonzero(a)) for a in state.components)
    if df_mode == "components_plus_traces":
        k += sum(p.size for p in state.traces)
    ssr, n = 0.0, 0
    for m, t in enumerate(trials.trials):
        err = (t.data - build_loading(state, state.labels[m]) @ state.traces[m])[t.observed]
        ssr += float(np.sum(err**2))
        n += err.size
    return criteria_from_fit(ssr, n, k)


def criteria_from_fit(ssr: float, n: int, k: int) -> dict:
    """Gaussian log-likelihood at the ML variance and the usual penalties."""
    sigma2 = ssr / n
    if sigma2 == 0:
        warnings.warn("zero residual variance; log-likelihood is unbounded", RuntimeWarning)
        loglik = math.inf
    else:
        loglik = -0.5 * n * (math.log(2 * math.pi * sigma2) + 1.0)
    return {
        "n": n,
        "k": k,
        "sigma2": sigma2,
        "loglik": loglik,
        "aic": 2 * k - 2 * loglik,
        "bic": k * math.log(n) - 2 * loglik,
        "hqc": 2 * k * math.log(math.log(n)) - 2 * loglik if n > 1 else float("nan"),
    }


def _zero_rows(components, rows) -> list[np.ndarray]:
    out = [a.copy() for a in components]
    for a in out:
        a[rows] = 0.0
    return out


def leave_one_out(state: ModelState, trials: TrialSet) -> dict:
    """Pooled MSE with each channel's component row zeroed, and its % change."""
    base = pooled_mse(state, trials)
    mse = np.array(
        [pooled_mse(state, trials, _zero_rows(state.components, [n])) for n in range(state.n_channels)]
    )
    if base > 0:
        contrib = 100.0 * (mse - base) / base
    else:
        contrib = np.where(mse > 0, np.inf, 0.0)
    return {"baseline_mse": base, "mse": mse, "contribution": contrib}


def coalition_value(state: ModelState, trials: TrialSet, members_mask: np.ndarray) -> float:
    """Negative pooled MSE when channels outside the coalition are zeroed."""
    drop = np.nonzero(~np.asarray(members_mask, bool))[0]
    return -pooled_mse(state, trials, _zero_rows(state.components, drop))


def _exact_shapley_by_subsets(value, n: int) -> np.ndarray:
    cache = {}

    def v(bits: int) -> float:
        if bits not in cache:
            mask = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
            cache[bits] = value(mask)
        return cache[bits]

    fact = [math.factorial(i) for i in range(n + 1)]
    phi = np.zeros(n)
    for bits in range(1 << n):
        size = bin(bits).count("1")
        for i in range(n):
            if bits >> i & 1:
                continue
            weight = fact[size] * fact[n - size - 1] / fact[n]
            phi[i] += weight * (v(bits | (1 << i)) - v(bits))
    return phi


def shapley_approx(
    state: ModelState,
    trials: TrialSet,
    n_coalitions: Optional[int] = 500,
    seed: int = 0,
) -> np.ndarray:
    """Per-channel Shapley values of reconstruction quality (value = -MSE).

    ``n_coalitions=None`` enumerates all 2^N coalitions with Shapley weights.
    Otherwise coalitions are drawn as the predecessors of each channel in
    random orderings, which gives an unbiased estimate.
    """
    n = state.n_channels

    def value(mask):
        return coalition_value(state, trials, mask)

    if n_coalitions is None:
        return _exact_shapley_by_subsets(value, n)
    if n_coalitions < 1:
        raise ParameterError("n_coalitions must be >= 1")
    rng = np.random.default_rng(seed)
    phi = np.zeros(n)
    for _ in range(n_coalitions):
        order = rng.permutation(n)
        mask = np.zeros(n, dtype=bool)
        prev = value(mask)
        for ch in order:
            mask[ch] = True
            cur = value(mask)
            phi[ch] += cur - prev
            prev = cur
    return phi / n_coalitions


def _shuffle_rows(components, rng):
    perm = rng.permutation(components[0].shape[0])
    return [a[perm] for a in components]


def _random_control(components, rng):
    flat = np.concatenate([a.ravel() for a in components])
    mu, sd = float(flat.mean()), float(flat.std())
    return [rng.normal(mu, sd, size=a.shape) for a in components]


def _shuffle_each_component(components, rng):
    out = []
    for a in components:
        b = np.empty_like(a)
        for j in range(a.shape[1]):
            b[:, j, :] = a[rng.permutation(a.shape[0]), j, :]
        out.append(b)
    return out


_NULL_FUNCS = {
    "shuffle_rows": _shuffle_rows,
    "random_control": _random_control,
    "shuffle_each_component": _shuffle_each_component,
}


@dataclass
class ValidationReport:
    baseline_mse: float
    loo_mse: np.ndarray
    contribution: np.ndarray
    shapley: Optional[np.ndarray]
    p_values: dict
    null_mse: dict
    component_p_values: np.ndarray
    component_null_mse: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "baseline_mse": self.baseline_mse,
            "leave_one_out_mse": [float(x) for x in self.loo_mse],
            "contribution_percent": [float(x) for x in self.contribution],
            "shapley": None if self.shapley is None else [float(x) for x in self.shapley],
            "p_values": {k: float(v) for k, v in self.p_values.items()},
            "null_mse_mean": {k: float(np.mean(v)) for k, v in self.null_mse.items()},
            "component_p_values": [float(x) for x in self.component_p_values],
        }


def permutation_pvalue(original: float, null: np.ndarray) -> float:
    """Add-one smoothed fraction of null draws at least as good as the original."""
    null = np.asarray(null)
    return (int(np.sum(null <= original)) + 1) / (null.size + 1)


def permutation_tests(
    state: ModelState,
    trials: TrialSet,
    n_perm: int = 1000,
    seed: int = 0,
    nulls=NULLS,
) -> dict:
    if n_perm < 1:
        raise ParameterError("n_perm must be >= 1")
    unknown = set(nulls) - set(NULLS)
    if unknown:
        raise ParameterError(f"unknown nulls {sorted(unknown)}")
    base = pooled_mse(state, trials)
    out = {"baseline_mse": base, "p_values": {}, "null_mse": {}}
    for t, name in enumerate(NULLS):
        if name not in nulls:
            continue
        rng = np.random.default_rng([seed, t])
        null = np.array(
            [pooled_mse(state, trials, _NULL_FUNCS[name](state.components, rng)) for _ in range(n_perm)]
        )
        out["null_mse"][name] = null
        out["p_values"][name] = permutation_pvalue(base, null)

    # per component column: shuffle its channel assignment only
    gi = state.group_index
    comp_null = np.zeros((gi.total, n_perm))
    rng = np.random.default_rng([seed, len(NULLS)])
    for g in range(gi.total):
        k, j = gi.owner(g)
        for r in range(n_perm):
            comps = [a.copy() for a in state.components]
            comps[k][:, j, :] = comps[k][rng.permutation(state.n_channels), j, :]
            comp_null[g, r] = pooled_mse(state, trials, comps)
    out["component_null_mse"] = comp_null
    out["component_p_values"] = np.array([permutation_pvalue(base, comp_null[g]) for g in range(gi.total)])
    return out


def validate(
    state: ModelState,
    trials: TrialSet,
    n_perm: int = 1000,
    n_coalitions: Optional[int] = 500,
    seed: int = 0,
    nulls=NULLS,
) -> ValidationReport:
    loo = leave_one_out(state, trials)
    shap = shapley_approx(state, trials, n_coalitions, seed) if n_coalitions != 0 else None
    perm = permutation_tests(state, trials, n_perm, seed, nulls)
    return ValidationReport(
        baseline_mse=loo["baseline_mse"],
        loo_mse=loo["mse"],
        contribution=loo["contribution"],
        shapley=shap,
        p_values=perm["p_values"],
        null_mse=perm["null_mse"],
        component_p_values=perm["component_p_values"],
        component_null_mse=perm["component_null_mse"],
    )


def frobenius_distance(a, b) -> float:
    """||a - b||_F / sqrt(||a||_F^2 + ||b||_F^2), 0 when both are zero."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise SchemaError(f"shape mismatch {a.shape} vs {b.shape}")
    den = math.sqrt(float(np.sum(a**2)) + float(np.sum(b**2)))
    if den == 0:
        return 0.0
    return float(np.linalg.norm(a - b)) / den


def mean_variant_distance(tensor: np.ndarray) -> float:
    """Mean Frobenius distance over all pairs of variants of one category."""
    k = tensor.shape[2]
    if k < 2:
        return 0.0
    d = [
        float(np.linalg.norm(tensor[:, :, i] - tensor[:, :, j]))
        for i, j in itertools.combinations(range(k), 2)
    ]
    return float(np.mean(d))
