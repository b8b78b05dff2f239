"""Synthetic multi-label trials with known components and traces.

Two categories: an ordinal "difficulty" axis with five levels and a
categorical "choice" axis with two. Component maps adjust across variants
through the label graphs; traces are Gaussian-process draws shared by trials
with the same label and perturbed per trial, plus one trial-varying
component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericError, ParameterError
from .graph import build_graph
from .model import CategorySpec, Label, Trial, TrialSet

_STREAM = {"maps": 1, "labels": 2, "label_trace": 3, "trial_trace": 4, "random_trace": 5}


def _rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STREAM[stream], *[int(k) for k in keys]])


@dataclass
class SynthParams:
    n_channels: int = 80
    n_timepoints: int = 500
    n_trials: int = 250
    difficulty_levels: tuple[str, ...] = ("1", "2", "3", "4", "5")
    choice_levels: tuple[str, ...] = ("I", "II")
    components_per_category: tuple[int, int] = (2, 2)
    difficulty_bandwidth: float = 1.0
    map_init_range: tuple[float, float] = (0.5, 1.0)
    variant_mix: float = 0.7  # weight of the shared reference map in every variant
    sparsity_percentile: float = 60.0
    amplitude_range: tuple[float, float] = (0.2, 1.533)
    lengthscale_range: tuple[float, float] = (0.05, 0.2)
    gp_jitter: float = 1e-8
    trial_noise_sigma: float = 0.15
    n_random_components: int = 1
    rescale_percentile: float = 98.0
    seed: int = 0

    @classmethod
    def preset(cls, name: str, **overrides) -> "SynthParams":
        if name == "paper":
            base = {}
        elif name == "desk":
            base = dict(n_channels=40, n_timepoints=200, n_trials=100)
        else:
            raise ParameterError(f"unknown preset {name!r} (expected 'paper' or 'desk')")
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "SynthParams":
        for name in ("map_init_range", "amplitude_range", "lengthscale_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ParameterError(f"{name} must be ordered, got {(lo, hi)}")
        if self.lengthscale_range[0] <= 0:
            raise ParameterError("lengthscales must be positive")
        for name in ("sparsity_percentile", "rescale_percentile"):
            if not 0 < getattr(self, name) < 100:
                raise ParameterError(f"{name} must lie in (0, 100)")
        if self.trial_noise_sigma < 0 or self.gp_jitter < 0:
            raise ParameterError("trial_noise_sigma and gp_jitter must be >= 0")
        if min(self.n_channels, self.n_trials) < 1 or self.n_timepoints < 2:
            raise ParameterError("need >= 1 channel, >= 1 trial and >= 2 time points")
        if not 0 <= self.variant_mix <= 1:
            raise ParameterError("variant_mix must lie in [0, 1]")
        if len(self.components_per_category) != 2 or min(self.components_per_category) < 1:
            raise ParameterError("components_per_category needs two positive counts")
        total = sum(self.components_per_category)
        if not 0 <= self.n_random_components <= total:
            raise ParameterError("n_random_components exceeds the number of components")
        return self

    def categories(self) -> list[CategorySpec]:
        pa, pb = self.components_per_category
        return [
            CategorySpec(
                "difficulty", tuple(self.difficulty_levels), pa, "ordinal",
                self.difficulty_bandwidth,
            ),
            CategorySpec("choice", tuple(self.choice_levels), pb, "categorical"),
        ]


@dataclass
class GroundTruth:
    categories: list[CategorySpec]
    components: list[np.ndarray]
    traces: list[np.ndarray]
    labels: list[Label]
    trial_ids: list[str] = field(default_factory=list)


def rbf_kernel(t_len: int, lengthscale: float, amplitude: float = 1.0, jitter: float = 0.0):
    u = np.linspace(0.0, 1.0, t_len)
    k = amplitude**2 * np.exp(-((u[:, None] - u[None, :]) ** 2) / (2.0 * lengthscale**2))
    k[np.diag_indices(t_len)] += jitter
    return k


def _cholesky(t_len, lengthscale, amplitude, jitter):
    jit = jitter
    for _ in range(4):
        try:
            return np.linalg.cholesky(rbf_kernel(t_len, lengthscale, amplitude, jit))
        except np.linalg.LinAlgError:
            jit = max(jit, 1e-12) * 10.0
    raise NumericError(f"GP kernel is not positive definite even with jitter {jit:g}")


def sample_gp(
    t_len: int,
    lengthscale: float,
    amplitude: float = 1.0,
    jitter: float = 1e-8,
    seed=None,
) -> np.ndarray:
    """One draw from N(0, K) with an RBF kernel on linspace(0, 1, T)."""
    if t_len < 2:
        raise ParameterError("need T >= 2")
    if not lengthscale > 0:
        raise ParameterError("lengthscale must be > 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if amplitude == 0:
        return np.sqrt(jitter) * rng.standard_normal(t_len)
    chol = _cholesky(t_len, lengthscale, amplitude, jitter)
    return chol @ rng.standard_normal(t_len)


def _variant_maps(cat: CategorySpec, n: int, params: SynthParams, k: int) -> np.ndarray:
    lo, hi = params.map_init_range
    graph = build_graph(cat).weights
    blend = np.eye(cat.size) + graph
    blend /= blend.sum(axis=1, keepdims=True)
    out = np.zeros((n, cat.n_components, cat.size))
    for j in range(cat.n_components):
        rng = _rng(params.seed, "maps", k, j)
        ref = rng.uniform(lo, hi, n)
        base = rng.uniform(lo, hi, (cat.size, n))
        for i in range(cat.size):
            v = params.variant_mix * ref + (1 - params.variant_mix) * (blend[i] @ base)
            cut = np.percentile(v, params.sparsity_percentile)
            out[:, j, i] = np.where(v > cut, v, 0.0)
    return out


def generate(params: Optional[SynthParams] = None) -> tuple[TrialSet, GroundTruth]:
    params = (params or SynthParams()).validate()
    cats = params.categories()
    n, t_len, n_trials = params.n_channels, params.n_timepoints, params.n_trials
    total = sum(c.n_components for c in cats)
    random_rows = list(range(total - params.n_random_components, total))

    components = [_variant_maps(c, n, params, k) for k, c in enumerate(cats)]

    lab_rng = _rng(params.seed, "labels")
    entries = np.stack([lab_rng.integers(0, c.size, n_trials) for c in cats], axis=1)
    labels = [Label(tuple(int(e) for e in row)) for row in entries]

    amp_lo, amp_hi = params.amplitude_range
    ls_lo, ls_hi = params.lengthscale_range
    base: dict[Label, tuple[np.ndarray, list[float]]] = {}
    for lab in sorted(set(labels), key=lambda lab: lab.entries):
        rng = _rng(params.seed, "label_trace", *lab.entries)
        rows, scales = [], []
        for _ in range(total):
            amp = rng.uniform(amp_lo, amp_hi)
            ls = rng.uniform(ls_lo, ls_hi)
            rows.append(sample_gp(t_len, ls, amp, params.gp_jitter, rng))
            scales.append(ls)
        base[lab] = (np.array(rows), scales)

    chol_cache: dict[float, np.ndarray] = {}
    traces = []
    for m, lab in enumerate(labels):
        mean, scales = base[lab]
        phi = mean.copy()
        rng = _rng(params.seed, "trial_trace", m)
        if params.trial_noise_sigma > 0:
            for j in range(total):
                if j in random_rows:
                    continue
                ls = scales[j]
                if ls not in chol_cache:
                    chol_cache[ls] = _cholesky(t_len, ls, 1.0, params.gp_jitter)
                phi[j] += params.trial_noise_sigma * (chol_cache[ls] @ rng.standard_normal(t_len))
        rrng = _rng(params.seed, "random_trace", m)
        for j in random_rows:
            amp = rrng.uniform(amp_lo, amp_hi)
            ls = rrng.uniform(ls_lo, ls_hi)
            phi[j] = sample_gp(t_len, ls, amp, params.gp_jitter, rrng)
        traces.append(phi)

    # shift each component's activations to be nonnegative, then match percentiles
    map_level = np.percentile(np.concatenate([a.ravel() for a in components]), params.rescale_percentile)
    stacked = np.stack(traces)  # (M, P, T)
    stacked -= stacked.min(axis=(0, 2), keepdims=True)
    for j in range(total):
        level = np.percentile(stacked[:, j, :], params.rescale_percentile)
        if level > 0:
            stacked[:, j, :] *= map_level / level
    traces = [stacked[m] for m in range(n_trials)]

    ids = [f"t{m:04d}" for m in range(n_trials)]
    trials = []
    for m, lab in enumerate(labels):
        loading = np.concatenate(
            [components[k][:, :, lab.entries[k]] for k in range(len(cats))], axis=1
        )
        trials.append(Trial(loading @ traces[m], lab, ids[m]))
    names = [f"ch{i:03d}" for i in range(n)]
    return TrialSet(cats, trials, names), GroundTruth(cats, components, traces, labels, ids)
