"""Closed-form normal-mixture confidence sequence boundaries.

Everything here is pure double-precision arithmetic: the mixture radius and
region threshold for a given sample size, the rho tuning rule that aims the
boundary at the first peeking time, and running intersections of intervals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ParameterError

__all__ = [
    "MixtureParams",
    "Interval",
    "scalar_radius",
    "region_threshold",
    "tune_rho",
    "intersect",
]


@dataclass(frozen=True)
class MixtureParams:
    """Normal-mixture boundary parameters: scale rho, level alpha, dimension."""

    rho: float
    alpha: float
    dim: int = 1

    def __post_init__(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ParameterError(f"rho must be a positive real, got {self.rho}")
        if not (0.0 < self.alpha < 1.0):
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.dim < 1:
            raise ParameterError(f"dim must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class Interval:
    """A closed interval [lower, upper]; lower > upper marks an empty set.

    Running intersections can legitimately produce empty intervals; they are
    kept (flagged via ``is_empty``) instead of being erased so that
    miscoverage accounting stays honest.
    """

    lower: float
    upper: float

    @property
    def is_empty(self) -> bool:
        return self.lower > self.upper

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def _validate_n(n: int) -> None:
    if n < 1:
        raise ParameterError(f"n must be a positive integer, got {n}")


def scalar_radius(
    n: int,
    params: MixtureParams,
    sigma_hat: float,
    alt_parenthesization: bool = False,
) -> float:
    """Half-width of the scalar normal-mixture confidence sequence at time n.

    Returns ``sigma_hat * sqrt(2(n rho^2 + 1)/(n^2 rho^2) *
    log(sqrt(n rho^2 + 1)/alpha))``: strictly decreasing in n and linear in
    sigma_hat.

    ``alt_parenthesization`` switches to the variant
    ``sqrt((2 n rho^2 + 1)/(n^2 rho^2) * log((n rho^2 + 1)/alpha))`` that
    appears in some write-ups of the scalar bound. It is off by default and
    exists only for comparison; the default form is the d=1 specialization of
    :func:`region_threshold` and is the one used throughout the engine.
    """
    _validate_n(n)
    if sigma_hat < 0:
        raise ParameterError(f"sigma_hat must be nonnegative, got {sigma_hat}")
    rho2 = params.rho * params.rho
    if alt_parenthesization:
        factor = (2.0 * n * rho2 + 1.0) / (n * n * rho2)
        logterm = math.log((n * rho2 + 1.0) / params.alpha)
    else:
        factor = 2.0 * (n * rho2 + 1.0) / (n * n * rho2)
        logterm = math.log(math.sqrt(n * rho2 + 1.0) / params.alpha)
    return sigma_hat * math.sqrt(factor * logterm)


def region_threshold(n: int, params: MixtureParams) -> float:
    """Squared-radius threshold for the d-dimensional mixture confidence region.

    The region at time n is {theta : ||sigma_hat^{-1}(theta_hat - theta)||^2 <
    region_threshold(n, params)} with value
    ``2(n rho^2 + 1)/(n^2 rho^2) * log((n rho^2 + 1)^{d/2}/alpha)``.
    Monotone increasing in the dimension d.
    """
    _validate_n(n)
    rho2 = params.rho * params.rho
    factor = 2.0 * (n * rho2 + 1.0) / (n * n * rho2)
    logterm = (params.dim / 2.0) * math.log(n * rho2 + 1.0) - math.log(params.alpha)
    return factor * logterm


def tune_rho(alpha: float, m: int, sigma_sq_m: float) -> float:
    """Mixture scale that aims the boundary at the first peeking time m.

    Returns ``sqrt((-2 log(alpha) + log(-2 log(alpha)) + 1) /
    (sigma_sq_m * m * log(max(m, e))))``, evaluated verbatim. Requires alpha
    small enough that the numerator is positive (any alpha <= ~0.28 works).
    """
    if not (0.0 < alpha < 1.0):
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if m < 1:
        raise ParameterError(f"m must be a positive integer, got {m}")
    if not (sigma_sq_m > 0):
        raise ParameterError(f"sigma_sq_m must be positive, got {sigma_sq_m}")
    minus_two_log_alpha = -2.0 * math.log(alpha)
    if minus_two_log_alpha <= 0:
        raise ParameterError(f"alpha must be below 1, got {alpha}")
    numerator = minus_two_log_alpha + math.log(minus_two_log_alpha) + 1.0
    if numerator <= 0:
        raise ParameterError(
            f"alpha={alpha} is too large for the tuning rule "
            "(-2 log(alpha) + log(-2 log(alpha)) + 1 must be positive)"
        )
    denominator = sigma_sq_m * m * math.log(max(m, math.e))
    return math.sqrt(numerator / denominator)


def intersect(history: Sequence[Interval] | Iterable[Interval]) -> list[Interval]:
    """Running intersection of a sequence of intervals.

    ``out[k]`` is the intersection of ``history[0..k]``: lower bounds are the
    running max, upper bounds the running min. The output is nested; disjoint
    inputs yield empty (lower > upper) intervals which are kept and flagged
    rather than dropped.
    """
    history = list(history)
    if not history:
        raise ParameterError("intersect requires a nonempty history")
    out: list[Interval] = []
    lo = -math.inf
    hi = math.inf
    for interval in history:
        lo = max(lo, interval.lower)
        hi = min(hi, interval.upper)
        out.append(Interval(lo, hi))
    return out
