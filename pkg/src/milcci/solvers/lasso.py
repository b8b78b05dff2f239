"""Coordinate-descent LASSO with an optional quadratic pull toward an anchor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import NumericError, SchemaError


def soft_threshold(x, tau):
    """sign(x) * max(|x| - tau, 0); works on scalars and arrays."""
    if np.any(np.asarray(tau) < 0):
        raise ValueError("threshold must be nonnegative")
    out = np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class LassoProblem:
    """min_A ||M o (R - A Phi)||^2 + gamma1 |A|_1 + anchor_weight ||A - anchor||^2.

    ``anchor`` is the similarity-weighted average of sibling variants, so the
    last term equals the weighted sum of squared distances to the siblings up
    to a constant.
    """

    residual_stack: np.ndarray
    trace_stack: np.ndarray
    anchor: Optional[np.ndarray] = None
    anchor_weight: float = 0.0
    gamma1: float = 0.0
    nonneg: bool = False
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.residual_stack = np.asarray(self.residual_stack, dtype=float)
        self.trace_stack = np.asarray(self.trace_stack, dtype=float)
        if self.residual_stack.ndim != 2 or self.trace_stack.ndim != 2:
            raise SchemaError("residual and trace stacks must be 2-D")
        if self.residual_stack.shape[1] != self.trace_stack.shape[1]:
            raise SchemaError(
                f"residual stack has {self.residual_stack.shape[1]} columns but trace "
                f"stack has {self.trace_stack.shape[1]}"
            )
        if self.anchor is None:
            self.anchor = np.zeros(self.shape)
        self.anchor = np.asarray(self.anchor, dtype=float)
        if self.anchor.shape != self.shape:
            raise SchemaError(f"anchor shape {self.anchor.shape} != {self.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.residual_stack.shape:
                raise SchemaError("mask shape differs from the residual stack")
        if self.anchor_weight < 0 or self.gamma1 < 0:
            raise SchemaError("penalty weights must be nonnegative")
        for arr in (self.residual_stack, self.trace_stack, self.anchor):
            if not np.all(np.isfinite(arr)):
                raise NumericError("LASSO inputs contain non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.residual_stack.shape[0], self.trace_stack.shape[0]

    def objective(self, a: np.ndarray) -> float:
        err = self.residual_stack - a @ self.trace_stack
        if self.mask is not None:
            err = err[self.mask]
        val = float(np.sum(err**2)) + self.gamma1 * float(np.abs(a).sum())
        if self.anchor_weight > 0:
            val += self.anchor_weight * float(np.sum((a - self.anchor) ** 2))
        return val


def cd_lasso_variant(
    problem: LassoProblem,
    warm_start: Optional[np.ndarray] = None,
    max_sweeps: int = 200,
    tol: float = 1e-7,
) -> np.ndarray:
    """Cyclic coordinate descent over the columns of A.

    Rows of A are independent given Phi, so every coordinate update is done
    for a whole column at once.
    """
    n, p = problem.shape
    a = np.zeros((n, p)) if warm_start is None else np.array(warm_start, dtype=float)
    if a.shape != (n, p):
        raise SchemaError(f"warm start shape {a.shape} != {(n, p)}")
    if not np.all(np.isfinite(a)):
        raise NumericError("warm start contains non-finite values")

    phi = problem.trace_stack
    w = float(problem.anchor_weight)
    thresh = problem.gamma1 / 2.0
    pull = w * problem.anchor
    if problem.mask is None:
        gram = phi @ phi.T
        corr = problem.residual_stack @ phi.T
        diag = np.broadcast_to(np.diag(gram), (n, p))
    else:
        m = problem.mask.astype(float)
        # per-row Gram over observed columns: (n, p, p)
        gram = np.einsum("nt,jt,lt->njl", m, phi, phi, optimize=True)
        corr = (problem.residual_stack * m) @ phi.T
        diag = np.einsum("njj->nj", gram)
    denom = diag + w

    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(p):
            if problem.mask is None:
                cross = a @ gram[:, j]
            else:
                cross = np.einsum("nl,nl->n", a, gram[:, :, j])
            z = corr[:, j] - cross + a[:, j] * diag[:, j] + pull[:, j]
            if problem.nonneg:
                num = np.maximum(z - thresh, 0.0)
            else:
                num = np.sign(z) * np.maximum(np.abs(z) - thresh, 0.0)
            den = denom[:, j]
            new = np.divide(num, den, out=np.zeros(n), where=den > 0)
            step = np.max(np.abs(new - a[:, j])) if n else 0.0
            delta = max(delta, step)
            a[:, j] = new
        if not np.all(np.isfinite(a)):
            raise NumericError("coordinate descent diverged")
        if delta < tol:
            break
    return a
