"""Per-trial trace subproblem: fidelity + temporal prior + trace decorrelation.

The temporal prior is sum_t ||phi_t - W phi_{t-1}||^2 with W = I for the
plain smoothness penalty and a fitted transition matrix for the LDS prior.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

from ..errors import SchemaError
from ..model import TraceSolverParams

# pivot ratio below which the normal equations are treated as singular
SINGULAR_RATIO = 1e-12


class TraceSolverWarning(RuntimeWarning):
    pass


@dataclass
class DecorrelationTerms:
    """Row Gram matrix of the traces and the inverse-norm scaling matrix."""

    gram: np.ndarray
    norm_scale: np.ndarray

    @classmethod
    def from_traces(cls, phi: np.ndarray) -> "DecorrelationTerms":
        gram = phi @ phi.T
        norms = np.sqrt(np.diag(gram))
        inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        return cls(gram, np.outer(inv, inv))

    def penalty(self) -> float:
        off = self.gram * self.norm_scale
        np.fill_diagonal(off, 0.0)
        return float(np.abs(off).sum())


def _check_shapes(y, mask, a, phi=None):
    if a.shape[0] != y.shape[0]:
        raise SchemaError(f"loading has {a.shape[0]} rows, data has {y.shape[0]}")
    if mask is not None and mask.shape != y.shape:
        raise SchemaError("mask shape differs from data shape")
    if phi is not None and phi.shape != (a.shape[1], y.shape[1]):
        raise SchemaError(f"traces have shape {phi.shape}, expected {(a.shape[1], y.shape[1])}")


def _transition(p: int, transition: Optional[np.ndarray]) -> np.ndarray:
    return np.eye(p) if transition is None else np.asarray(transition, dtype=float)


def dynamics_penalty(phi: np.ndarray, transition: Optional[np.ndarray] = None) -> float:
    w = _transition(phi.shape[0], transition)
    d = phi[:, 1:] - w @ phi[:, :-1]
    return float(np.sum(d**2))


def trace_objective(y, mask, a, phi, gamma3, gamma4, transition=None) -> float:
    """Exact (unsmoothed) trace objective for one trial."""
    y, a, phi = np.asarray(y, float), np.asarray(a, float), np.asarray(phi, float)
    _check_shapes(y, mask, a, phi)
    err = y - a @ phi
    if mask is not None:
        err = err[mask]
    val = float(np.sum(err**2))
    if gamma3:
        val += gamma3 * dynamics_penalty(phi, transition)
    if gamma4 and phi.shape[0] > 1:
        val += gamma4 * DecorrelationTerms.from_traces(phi).penalty()
    return val


def smoothed_decorrelation(phi: np.ndarray, eps: float) -> tuple[float, np.ndarray]:
    """sum_{j != j'} (sqrt(cos_jj'^2 + eps^2) - eps) and its gradient."""
    norms = np.linalg.norm(phi, axis=1)
    live = norms > 0
    grad = np.zeros_like(phi)
    if live.sum() < 2:
        return 0.0, grad
    u = phi[live] / norms[live, None]
    c = u @ u.T
    np.fill_diagonal(c, 0.0)
    root = np.sqrt(c**2 + eps**2)
    h = root - eps
    np.fill_diagonal(h, 0.0)
    dh = c / root
    np.fill_diagonal(dh, 0.0)
    # d cos_jl / d phi_j = (u_l - cos_jl u_j) / |phi_j|; each unordered pair counted twice
    g = 2.0 * (dh @ u - np.sum(dh * c, axis=1)[:, None] * u) / norms[live, None]
    grad[live] = g
    return float(h.sum()), grad


def smoothed_objective(y, mask, a, phi, gamma3, gamma4, transition=None, eps=1e-8):
    """Value and gradient of the trace objective with Huber-smoothed |cos|."""
    w = _transition(phi.shape[0], transition)
    err = y - a @ phi
    if mask is not None:
        err = err * mask
    val = float(np.sum(err**2))
    grad = -2.0 * a.T @ err
    if gamma3:
        d = phi[:, 1:] - w @ phi[:, :-1]
        val += gamma3 * float(np.sum(d**2))
        gd = np.zeros_like(phi)
        gd[:, 1:] += 2.0 * d
        gd[:, :-1] -= 2.0 * w.T @ d
        grad += gamma3 * gd
    if gamma4:
        v, g = smoothed_decorrelation(phi, eps)
        val += gamma4 * v
        grad += gamma4 * g
    return val, grad


def normal_equations(y, mask, a, gamma3, transition=None):
    """Banded (upper, time-major) Hessian/2 and right-hand side of the quadratic case."""
    n, t_len = y.shape
    p = a.shape[1]
    w = _transition(p, transition)
    if mask is None:
        blocks = np.broadcast_to(a.T @ a, (t_len, p, p)).copy()
        rhs = a.T @ y
    else:
        m = mask.astype(float)
        blocks = np.einsum("nt,nj,nl->tjl", m, a, a, optimize=True)
        rhs = a.T @ (y * m)
    if gamma3:
        eye = np.eye(p)
        blocks[1:] += gamma3 * eye
        blocks[:-1] += gamma3 * (w.T @ w)
    u = 2 * p - 1
    size = p * t_len
    ab = np.zeros((u + 1, size))
    ia, ib = np.triu_indices(p)
    tt = np.arange(t_len)
    # diagonal blocks: entry (tP+a, tP+b), a <= b
    ab[(u + ia - ib)[None, :], (tt[:, None] * p + ib[None, :])] = blocks[:, ia, ib]
    if gamma3 and t_len > 1:
        # coupling block between t-1 (rows) and t (cols) is -gamma3 W^T
        ga, gb = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
        ga, gb = ga.ravel(), gb.ravel()
        rows = u - p + ga - gb
        cols = tt[1:, None] * p + gb[None, :]
        ab[rows[None, :], cols] = -gamma3 * w.T[ga, gb][None, :]
    return ab, rhs


def banded_matvec(ab: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multiply the symmetric matrix stored in upper banded form by x."""
    u = ab.shape[0] - 1
    n = x.size
    out = ab[u] * x
    for k in range(1, u + 1):
        band = ab[u - k, k:]
        out[:-k] += band * x[k:]
        out[k:] += band * x[:-k]
    return out


def _banded_to_dense(ab: np.ndarray) -> np.ndarray:
    u, size = ab.shape[0] - 1, ab.shape[1]
    h = np.zeros((size, size))
    for k in range(u + 1):
        idx = np.arange(size - k)
        h[idx, idx + k] = ab[u - k, k:]
        h[idx + k, idx] = ab[u - k, k:]
    return h


def _solve_exact(y, mask, a, gamma3, transition):
    p, t_len = a.shape[1], y.shape[1]
    ab, rhs = normal_equations(y, mask, a, gamma3, transition)
    b = rhs.T.reshape(-1)
    try:
        chol = cholesky_banded(ab, lower=False, check_finite=False)
        pivots = chol[-1] ** 2
        singular = pivots.min() <= SINGULAR_RATIO * pivots.max()
    except LinAlgError:
        singular = True
    if singular:
        # e.g. fewer observed channels than components with no smoothing to
        # tie them down; take the minimum-norm solution instead
        x = np.linalg.lstsq(_banded_to_dense(ab), b, rcond=None)[0]
    else:
        x = cho_solve_banded((chol, False), b, check_finite=False)
    return x.reshape(t_len, p).T


def _power_norm(m: np.ndarray, iters: int = 20, seed: int = 0) -> float:
    """Spectral norm estimate of a symmetric PSD matrix."""
    v = np.random.default_rng(seed).standard_normal(m.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        mv = m @ v
        lam = float(np.linalg.norm(mv))
        if lam == 0:
            return 0.0
        v = mv / lam
    return lam


def _lipschitz(a, gamma3, transition) -> float:
    p = a.shape[1]
    w = _transition(p, transition)
    lip = 2.0 * _power_norm(a.T @ a)
    if gamma3:
        wn = _power_norm(w.T @ w) ** 0.5 if p else 0.0
        lip += 2.0 * gamma3 * (1.0 + wn) ** 2
    return max(lip, 1e-12)


def _projected_gradient(y, mask, a, gamma3, gamma4, nonneg, transition, params, phi0):
    eps = params.huber_eps

    def exact(phi):
        return trace_objective(y, mask, a, phi, gamma3, gamma4, transition)

    def smooth(phi):
        return smoothed_objective(y, mask, a, phi, gamma3, gamma4, transition, eps)

    phi = np.maximum(phi0, 0.0) if nonneg else phi0.copy()
    best, best_val = phi0.copy(), exact(phi0)
    cand_val = exact(phi)
    if cand_val <= best_val:
        best, best_val = phi.copy(), cand_val

    step = params.step_size or 1.0 / _lipschitz(a, gamma3, transition)
    f, g = smooth(phi)
    for _ in range(params.max_grad_iters):
        for _halving in range(31):
            nxt = phi - step * g
            if nonneg:
                nxt = np.maximum(nxt, 0.0)
            diff = nxt - phi
            f_new, g_new = smooth(nxt)
            bound = f + float(np.sum(g * diff)) + float(np.sum(diff**2)) / (2.0 * step)
            if np.isfinite(f_new) and f_new <= bound + 1e-12 * abs(f):
                break
            step *= 0.5
        else:
            warnings.warn(
                "trace solver could not find a descent step; returning best iterate",
                TraceSolverWarning,
                stacklevel=3,
            )
            break
        decrease = f - f_new
        phi, f, g = nxt, f_new, g_new
        val = exact(phi)
        if val <= best_val:
            best, best_val = phi.copy(), val
        if decrease <= 1e-8 * max(abs(f), 1e-300):
            break
        step *= 2.0  # let the step grow back after successful iterations
    return best


def solve_traces(
    y,
    mask,
    a,
    gamma3: float = 0.0,
    gamma4: float = 0.0,
    nonneg: bool = False,
    transition: Optional[np.ndarray] = None,
    params: Optional[TraceSolverParams] = None,
    warm_start: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Minimize the trace objective for one trial.

    Without decorrelation or nonnegativity the problem is quadratic and is
    solved exactly through its block-tridiagonal normal equations. Otherwise
    projected gradient descent is run on the smoothed objective and the best
    iterate (by the exact objective, warm start included) is returned.
    """
    y, a = np.asarray(y, float), np.asarray(a, float)
    params = params or TraceSolverParams()
    if mask is not None:
        mask = np.asarray(mask, bool)
        if mask.all():
            mask = None
    _check_shapes(y, mask, a)
    p, t_len = a.shape[1], y.shape[1]
    phi0 = np.zeros((p, t_len)) if warm_start is None else np.asarray(warm_start, float)
    _check_shapes(y, mask, a, phi0)

    if gamma4 == 0 and not nonneg:
        try:
            phi = _solve_exact(y, mask, a, gamma3, transition)
        except (LinAlgError, ValueError):
            phi = None
        if phi is not None and np.all(np.isfinite(phi)):
            if warm_start is None:
                return phi
            new = trace_objective(y, mask, a, phi, gamma3, gamma4, transition)
            old = trace_objective(y, mask, a, phi0, gamma3, gamma4, transition)
            return phi if new <= old else phi0.copy()
    return _projected_gradient(y, mask, a, gamma3, gamma4, nonneg, transition, params, phi0)
