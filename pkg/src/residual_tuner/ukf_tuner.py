"""Unscented-Kalman auto-tuning of a parameter vector.

The tuned parameters ``y`` are treated as the UKF state.  One update draws
2L+1 sigma points around the current estimate, pushes each through a rollout
function that returns a stacked measurement, and moves the estimate by the
Kalman gain times the innovation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg

# 0 first, then eps*I escalating x10 from 1e-12 to 1e-6
JITTER_STEPS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class TunerError(RuntimeError):
    """Raised when an update cannot be carried out; the input state is untouched."""


@dataclass(frozen=True)
class SigmaWeights:
    w_a: np.ndarray
    w_c: np.ndarray
    alpha: float
    beta: float
    kappa: float
    lam: float

    @property
    def L(self) -> int:
        return (self.w_a.size - 1) // 2

    @property
    def spread(self) -> float:
        """Multiplier on the covariance factor, sqrt(L + lambda)."""
        return float(np.sqrt(self.L + self.lam))


def sigma_weights(L: int, alpha: float = 1.0, beta: float = 2.0, kappa: float = 0.0) -> SigmaWeights:
    """Scaled unscented-transform weights for an L-dimensional state."""
    if L < 1:
        raise ValueError("L must be at least 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    lam = alpha**2 * (L + kappa) - L
    denom = L + lam
    if abs(denom) < 1e-300:
        raise ValueError(f"degenerate scaling: L + lambda = {denom}")
    w_a = np.full(2 * L + 1, 1.0 / (2.0 * denom))
    w_c = w_a.copy()
    w_a[0] = lam / denom
    w_c[0] = lam / denom + (1.0 - alpha**2 + beta)
    return SigmaWeights(w_a, w_c, alpha, beta, kappa, lam)


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def robust_cholesky(P: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of P, adding eps*I (1e-12 up to 1e-6) on failure.

    Returns the factor and the jitter that was needed (0.0 if none).
    """
    P = np.asarray(P, dtype=float)
    if not np.all(np.isfinite(P)):
        raise TunerError("covariance has non-finite entries")
    P = symmetrize(P)
    if not np.any(P):
        return np.zeros_like(P), 0.0
    eye = np.eye(P.shape[0])
    for eps in JITTER_STEPS:
        try:
            return np.linalg.cholesky(P + eps * eye), eps
        except np.linalg.LinAlgError:
            continue
    raise TunerError("Cholesky failed after maximum jitter")


def sigma_points(center, P_eff, weights: SigmaWeights) -> np.ndarray:
    """Return the (2L+1, L) array of sigma points around ``center``.

    Row 0 is the center; rows i and i+L are center +/- column i of
    sqrt(L + lambda) * chol(P_eff).
    """
    center = np.asarray(center, dtype=float)
    L = center.size
    if weights.L != L:
        raise ValueError(f"weights are for L={weights.L}, center has length {L}")
    A, _ = robust_cholesky(P_eff)
    offsets = weights.spread * A.T  # row i = scaled column i
    return np.vstack([center, center + offsets, center - offsets])


@dataclass(frozen=True)
class TunerState:
    y_hat: np.ndarray
    P: np.ndarray
    C_y: np.ndarray
    C_v: np.ndarray
    weights: SigmaWeights
    updates: int = 0

    @property
    def L(self) -> int:
        return self.y_hat.size

    @property
    def m(self) -> int:
        return self.C_v.shape[0]


def init_state(
    y0,
    m: int,
    p0: float = 1e-2,
    c_y: float = 1e-4,
    c_v: float = 1e-2,
    alpha: float = 1.0,
    beta: float = 2.0,
    kappa: float = 0.0,
) -> TunerState:
    """Tuner state with diagonal covariances P0 = p0*I, C_y = c_y*I, C_v = c_v*I."""
    y0 = np.array(y0, dtype=float)
    L = y0.size
    if min(p0, c_y, c_v) < 0:
        raise ValueError("covariance scales must be non-negative")
    return TunerState(
        y_hat=y0,
        P=p0 * np.eye(L),
        C_y=c_y * np.eye(L),
        C_v=c_v * np.eye(m),
        weights=sigma_weights(L, alpha, beta, kappa),
    )


@dataclass
class UpdateDiagnostics:
    update_index: int
    innovation_norm: float
    trace_P: float
    s_condition: float
    p_jitter: float
    s_jitter: float
    elapsed_ms: float
    extra: dict = field(default_factory=dict)


def _solve_gain(C_sz: np.ndarray, S: np.ndarray) -> tuple[np.ndarray, float]:
    """K = C_sz S^-1 via S K^T = C_sz^T.

    Tries a Cholesky solve with escalating jitter, then a symmetric-indefinite
    solve of the unjittered S (reported as jitter = -1).
    """
    eye = np.eye(S.shape[0])
    for eps in JITTER_STEPS:
        try:
            Kt = scipy.linalg.solve(S + eps * eye, C_sz.T, assume_a="pos", check_finite=False)
            return Kt.T, eps
        except np.linalg.LinAlgError:
            continue
    Kt = scipy.linalg.solve(S, C_sz.T, assume_a="sym", check_finite=False)
    return Kt.T, -1.0


def ukf_update(
    state: TunerState,
    measure: Callable[[np.ndarray], np.ndarray],
    x_ref,
    vectorized: bool = False,
) -> tuple[np.ndarray, TunerState, UpdateDiagnostics]:
    """One auto-tuning step.

    ``measure`` maps a parameter vector to a stacked measurement of length m.
    With ``vectorized=True`` it instead receives the whole (2L+1, L) array of
    sigma points and must return a (2L+1, m) array.

    Returns ``(delta, new_state, diagnostics)``.  Raises :class:`TunerError`
    if the rollout produces non-finite values; ``state`` is never modified.
    """
    t0 = time.perf_counter()
    x_ref = np.asarray(x_ref, dtype=float)
    if x_ref.shape != (state.m,):
        raise ValueError(f"x_ref must have length {state.m}, got shape {x_ref.shape}")
    if not np.all(np.isfinite(x_ref)):
        raise TunerError("reference stack has non-finite entries")
    w = state.weights

    P_prior = symmetrize(state.P + state.C_y)
    A, p_jitter = robust_cholesky(P_prior)
    offsets = w.spread * A.T
    Y = np.vstack([state.y_hat, state.y_hat + offsets, state.y_hat - offsets])

    if vectorized:
        X = np.asarray(measure(Y), dtype=float)
    else:
        X = np.array([measure(y) for y in Y], dtype=float)
    if X.shape != (Y.shape[0], state.m):
        raise ValueError(f"rollout returned shape {X.shape}, expected {(Y.shape[0], state.m)}")
    if not np.all(np.isfinite(X)):
        raise TunerError("rollout produced non-finite predictions")

    y_mean = w.w_a @ Y
    x_mean = w.w_a @ X
    dY = Y - y_mean
    dX = X - x_mean
    S = symmetrize(state.C_v + (dX.T * w.w_c) @ dX)
    C_sz = (dY.T * w.w_c) @ dX

    K, s_jitter = _solve_gain(C_sz, S)
    innovation = x_ref - x_mean
    delta = K @ innovation
    P_new = symmetrize(P_prior - K @ S @ K.T)

    new_state = replace(
        state,
        y_hat=apply_update(state.y_hat, delta),
        P=P_new,
        updates=state.updates + 1,
    )
    diag = UpdateDiagnostics(
        update_index=new_state.updates,
        innovation_norm=float(np.linalg.norm(innovation)),
        trace_P=float(np.trace(P_new)),
        s_condition=float(np.linalg.cond(S)),
        p_jitter=p_jitter,
        s_jitter=s_jitter,
        elapsed_ms=1e3 * (time.perf_counter() - t0),
        extra={"gain": K, "x_mean": x_mean, "P_prior": P_prior, "S": S},
    )
    return delta, new_state, diag


def apply_update(y_anchor, delta) -> np.ndarray:
    y_anchor = np.asarray(y_anchor, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if y_anchor.shape != delta.shape:
        raise ValueError(f"length mismatch: {y_anchor.shape} vs {delta.shape}")
    return y_anchor + delta
