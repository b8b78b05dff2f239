"""Ridge-to-identity fit of a per-trial linear transition matrix."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError, ParameterError


def fit_transition(phi: np.ndarray, gamma5: float = 0.0) -> np.ndarray:
    """Minimize sum_t ||phi_t - W phi_{t-1}||^2 + gamma5 ||W - I||_F^2 over W.

    Closed form: W = (S10 + gamma5 I)(S00 + gamma5 I)^{-1} with
    S10 = sum phi_t phi_{t-1}^T and S00 = sum phi_{t-1} phi_{t-1}^T.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[1] < 2:
        raise ParameterError("need a (P x T) trace matrix with T >= 2")
    if gamma5 < 0:
        raise ParameterError("gamma5 must be >= 0")
    p = phi.shape[0]
    prev, nxt = phi[:, :-1], phi[:, 1:]
    eye = np.eye(p)
    s00 = prev @ prev.T + gamma5 * eye
    s10 = nxt @ prev.T + gamma5 * eye
    if gamma5 == 0 and np.linalg.cond(s00) > 1e12:
        raise NumericError(
            "lagged trace covariance is singular; use a positive gamma5 for the transition fit"
        )
    # W s00 = s10  <=>  s00^T W^T = s10^T
    return np.linalg.solve(s00.T, s10.T).T


def least_squares_transition(phi: np.ndarray) -> np.ndarray:
    """Unregularized fit used to seed the LDS prior; falls back to the pseudo-inverse."""
    prev, nxt = phi[:, :-1], phi[:, 1:]
    return (nxt @ prev.T) @ np.linalg.pinv(prev @ prev.T)
