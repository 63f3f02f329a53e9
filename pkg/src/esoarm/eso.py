"""Second-order extended state observer and its estimation-error bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .faults import DivergentSeries, InvalidParameter, StepSizeFault

TAIL_TOLERANCE = 1e-12


@dataclass(frozen=True)
class EsoGains:
    omega_o: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray


@dataclass(frozen=True)
class EsoState:
    """Velocity estimate ``xhat2`` and disturbance estimate ``xhat3`` (= f_hat)."""

    xhat2: np.ndarray
    xhat3: np.ndarray

    @classmethod
    def from_measurement(cls, dq) -> "EsoState":
        dq = np.array(dq, dtype=float)
        return cls(dq, np.zeros_like(dq))


def gains_from_bandwidth(omega_o) -> EsoGains:
    """Place both observer poles at ``-omega_o``.

    The error matrix ``[[-beta1, 1], [-beta2, 0]]`` has characteristic
    polynomial ``s^2 + beta1 s + beta2 = (s + omega_o)^2``.
    """
    w = np.asarray(omega_o, dtype=float)
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise InvalidParameter(f"observer bandwidth must be positive, got {omega_o!r}")
    return EsoGains(w, 2.0 * w, w * w)


def error_matrix(gains: EsoGains, i: int | None = None) -> np.ndarray:
    b1 = np.asarray(gains.beta1, dtype=float)
    b2 = np.asarray(gains.beta2, dtype=float)
    if i is not None:
        b1, b2 = b1.reshape(-1)[i], b2.reshape(-1)[i]
    return np.array([[-float(b1), 1.0], [-float(b2), 0.0]])


def eso_step(state: EsoState, gains: EsoGains, nominal_drift_Fi, nominal_gain_Gi_u,
             measured_dq_i, dt: float) -> EsoState:
    """One explicit-Euler step of the observer.

    All arguments are evaluated at the start of the step (the command
    ``u`` is the one held over the step). Works per joint or vectorised.
    """
    if dt <= 0:
        raise InvalidParameter("dt must be positive")
    if np.max(np.asarray(gains.omega_o)) * dt >= 0.5:
        raise StepSizeFault(f"dt*omega_o = {np.max(gains.omega_o) * dt:.3f} >= 0.5")
    e = np.asarray(measured_dq_i, dtype=float) - state.xhat2
    d2 = nominal_drift_Fi + nominal_gain_Gi_u + state.xhat3 + gains.beta1 * e
    d3 = gains.beta2 * e
    return EsoState(state.xhat2 + dt * d2, state.xhat3 + dt * d3)


def discretize_bandwidth(omega_o: float, t_s: float) -> float:
    """Matched-pole map of the continuous observer pole, ``exp(-omega_o t_s)``."""
    if not omega_o > 0 or not t_s > 0:
        raise InvalidParameter("omega_o and t_s must be positive")
    return math.exp(-omega_o * t_s)


@dataclass(frozen=True)
class BoundSpec:
    """Inputs of the discrete estimation-error bound for one joint.

    ``l_f`` bounds ``|df/dt|``; ``omega_discrete`` is the observer pole in
    the z-domain at sample time ``t_s``; ``r_i`` is the relative degree of the
    measured velocity with respect to the disturbance (1 for this observer).
    """

    l_f: float
    t_s: float = 1e-4
    omega_discrete: float = math.exp(-80 * 1e-4)
    r_i: int = 1

    @classmethod
    def from_bandwidth(cls, omega_o: float, l_f: float, t_s: float = 1e-4) -> "BoundSpec":
        return cls(l_f=l_f, t_s=t_s, omega_discrete=discretize_bandwidth(omega_o, t_s))


@dataclass(frozen=True)
class ErrorBound:
    gamma: float
    truncation_terms: int
    series_sum: float


def series_term(k: int, omega: float, r_i: int = 1) -> float:
    """``p(k)`` of the error kernel ``f - f_hat = p * delta_f``.

    ``p(k) = 1`` for ``k <= r_i + 1``; beyond that
    ``p(k) = sum_{j=1}^{r_i+1} C(k-1, j-1) (1-omega)^(j-1) omega^(k-j)``.
    For ``r_i = 1`` this is ``omega^(k-1) + (k-1)(1-omega) omega^(k-2)``.
    """
    if k < 1:
        raise InvalidParameter("series index starts at 1")
    if k <= r_i + 1:
        return 1.0
    return sum(math.comb(k - 1, j - 1) * (1.0 - omega) ** (j - 1) * omega ** (k - j)
               for j in range(1, r_i + 2))


def series_partial_sums(omega: float, n_terms: int, r_i: int = 1) -> np.ndarray:
    """Cumulative sums ``S_1 .. S_n`` (vectorised, for validation)."""
    k = np.arange(1, n_terms + 1, dtype=float)
    p = np.zeros_like(k)
    for j in range(1, r_i + 2):
        binom = np.ones_like(k)
        for m in range(1, j):
            binom *= (k - m) / m
        p += binom * (1.0 - omega) ** (j - 1) * omega ** (k - j)
    p[: r_i + 1] = 1.0
    return np.cumsum(p)


def estimation_error_bound(spec: BoundSpec, max_terms: int = 10_000_000) -> ErrorBound:
    """``Gamma = (sum_k p(k)) l_f t_s`` with an adaptively truncated series.

    Terms are added until a geometric majorant of the tail (ratio of
    consecutive terms, which decreases monotonically towards ``omega``) falls
    below ``1e-12`` of the partial sum.
    """
    w = spec.omega_discrete
    if not 0.0 < w < 1.0:
        raise DivergentSeries(f"omega_discrete must lie in (0, 1), got {w!r}")
    if spec.l_f < 0 or spec.t_s <= 0:
        raise InvalidParameter("l_f must be >= 0 and t_s > 0")
    if spec.r_i < 1:
        raise InvalidParameter("relative degree must be >= 1")
    r = spec.r_i
    total = float(r + 1)
    k = r + 1
    p_next = series_term(k + 1, w, r)
    while True:
        p_k, p_next = p_next, series_term(k + 2, w, r)
        total += p_k
        k += 1
        ratio = p_next / p_k if p_k > 0 else 0.0
        if ratio < 1.0:
            tail = p_next / (1.0 - ratio)
            if tail < TAIL_TOLERANCE * total:
                break
        if k >= max_terms:
            raise DivergentSeries("series did not converge within max_terms")
    return ErrorBound(gamma=total * spec.l_f * spec.t_s, truncation_terms=k, series_sum=total)


def error_bound(omega_o, l_f, t_s: float = 1e-4) -> np.ndarray:
    """Per-joint bound for bandwidths ``omega_o`` and rate bounds ``l_f``."""
    w = np.atleast_1d(np.asarray(omega_o, dtype=float))
    lf = np.broadcast_to(np.asarray(l_f, dtype=float), w.shape)
    return np.array([estimation_error_bound(BoundSpec.from_bandwidth(wi, li, t_s)).gamma
                     for wi, li in zip(w, lf)])


def rate_bound_from_trace(values, dt: float) -> np.ndarray:
    """``max |delta v| / dt`` per column; used to pick ``l_f`` from data."""
    v = np.asarray(values, dtype=float)
    if v.shape[0] < 2:
        raise InvalidParameter("need at least two samples")
    return np.max(np.abs(np.diff(v, axis=0)), axis=0) / dt
