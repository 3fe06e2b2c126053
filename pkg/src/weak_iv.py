import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import chi2

from errors import NumericalError

logger = logging.getLogger("weak_iv")

F_THRESHOLDS = (10.0, 16.3, 104.7)
FLAT_TOL = 1e-12
SINGULAR_LIMIT = 1e12

VARIANCE_MODES = ("fixed", "null_imposed")


class CsRegime(str, Enum):
    BOUNDED = "bounded"
    DISJOINT = "disjoint"
    REAL_LINE = "real_line"
    EMPTY = "empty"
    HALF_LINE = "half_line"


@dataclass(frozen=True)
class ArConfidenceSet:
    regime: CsRegime
    intervals: tuple[tuple[float, float], ...]
    roots: tuple[float, ...]
    level: float

    @property
    def bounded(self) -> bool:
        return self.regime == CsRegime.BOUNDED

    @property
    def includes_zero(self) -> bool:
        return self.contains(0.0)

    def contains(self, theta: float) -> bool:
        return any(low <= theta <= high for low, high in self.intervals)

    def describe(self) -> str:
        if not self.intervals:
            return "∅"
        return " ∪ ".join(f"[{low:.6g}, {high:.6g}]" for low, high in self.intervals)


@dataclass(frozen=True)
class WeakIvReport:
    f_stat: float
    f_exceeds_10: bool
    f_exceeds_16_3: bool
    f_exceeds_104_7: bool
    theta0: float
    ar_stat: float
    ar_pvalue: float
    cs: ArConfidenceSet
    level: float
    variance: str = "null_imposed"


def _checked_inverse(matrix: np.ndarray, name: str) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    condition = np.linalg.cond(matrix)
    if not np.isfinite(condition) or condition > SINGULAR_LIMIT:
        raise NumericalError(f"singular {name}")
    return np.linalg.inv(matrix)


def f_statistic(pi_hat: np.ndarray, sigma_pi: np.ndarray) -> float:
    pi_hat = np.atleast_1d(np.asarray(pi_hat, dtype=float))
    weight = _checked_inverse(sigma_pi, "first-stage variance Σππ")
    return float(pi_hat @ weight @ pi_hat) / len(pi_hat)


def null_variance(
    theta0: float,
    sigma_delta: np.ndarray,
    sigma_pi: np.ndarray | None = None,
    sigma_delta_pi: np.ndarray | None = None,
) -> np.ndarray:
    """Variance of δ̂ - π̂θ0; the fixed Σδδ when the joint blocks are absent."""
    sigma_delta = np.atleast_2d(np.asarray(sigma_delta, dtype=float))
    if sigma_pi is None or sigma_delta_pi is None:
        return sigma_delta

    cross = np.atleast_2d(np.asarray(sigma_delta_pi, dtype=float))
    return (
        sigma_delta
        - theta0 * (cross + cross.T)
        + theta0**2 * np.atleast_2d(np.asarray(sigma_pi, dtype=float))
    )


def ar_statistic(
    delta_hat: np.ndarray,
    pi_hat: np.ndarray,
    sigma_delta: np.ndarray,
    theta0: float,
    sigma_pi: np.ndarray | None = None,
    sigma_delta_pi: np.ndarray | None = None,
) -> tuple[float, float]:
    delta_hat = np.atleast_1d(np.asarray(delta_hat, dtype=float))
    pi_hat = np.atleast_1d(np.asarray(pi_hat, dtype=float))

    restricted = delta_hat - pi_hat * theta0
    variance = null_variance(theta0, sigma_delta, sigma_pi, sigma_delta_pi)
    weight = _checked_inverse(variance, "reduced-form variance Σδδ")

    stat = max(float(restricted @ weight @ restricted), 0.0)
    return stat, float(chi2.sf(stat, len(delta_hat)))


def quadratic_region(
    a: float, b: float, c: float, level: float
) -> ArConfidenceSet:
    """Solve a·θ² - 2b·θ + c ≤ 0 and tag the shape of the solution set."""
    if abs(a) < FLAT_TOL * max(abs(b), abs(c), 1.0):
        if abs(b) < FLAT_TOL * max(abs(c), 1.0):
            if c <= 0:
                return ArConfidenceSet(CsRegime.REAL_LINE, ((-np.inf, np.inf),), (), level)
            return ArConfidenceSet(CsRegime.EMPTY, (), (), level)

        root = c / (2.0 * b)
        interval = (root, np.inf) if b > 0 else (-np.inf, root)
        return ArConfidenceSet(CsRegime.HALF_LINE, (interval,), (root,), level)

    discriminant = b * b - a * c
    if a > 0:
        if discriminant < 0:
            return ArConfidenceSet(CsRegime.EMPTY, (), (), level)
        spread = np.sqrt(discriminant)
        low, high = sorted(((b - spread) / a, (b + spread) / a))
        return ArConfidenceSet(CsRegime.BOUNDED, ((low, high),), (low, high), level)

    if discriminant <= 0:
        return ArConfidenceSet(CsRegime.REAL_LINE, ((-np.inf, np.inf),), (), level)

    spread = np.sqrt(discriminant)
    low, high = sorted(((b - spread) / a, (b + spread) / a))
    return ArConfidenceSet(
        CsRegime.DISJOINT, ((-np.inf, low), (high, np.inf)), (low, high), level
    )


def ar_confidence_set(
    delta_hat: np.ndarray,
    pi_hat: np.ndarray,
    sigma_delta: np.ndarray,
    level: float = 0.95,
    sigma_pi: np.ndarray | None = None,
    sigma_delta_pi: np.ndarray | None = None,
) -> ArConfidenceSet:
    """Invert the AR test at the given level.

    Without the joint blocks the variance is the fixed Σδδ and the set is the
    quadratic a·θ² - 2b·θ + (c - q) ≤ 0. With them the variance is evaluated
    under each null; for one instrument this is again a quadratic, for more
    the boundary is the real roots of det(q·Σ(θ) - δ(θ)δ(θ)').
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")

    delta_hat = np.atleast_1d(np.asarray(delta_hat, dtype=float))
    pi_hat = np.atleast_1d(np.asarray(pi_hat, dtype=float))
    r = len(delta_hat)
    q = float(chi2.ppf(level, r))

    if sigma_pi is None or sigma_delta_pi is None:
        weight = _checked_inverse(sigma_delta, "reduced-form variance Σδδ")
        a = float(pi_hat @ weight @ pi_hat)
        b = float(pi_hat @ weight @ delta_hat)
        c = float(delta_hat @ weight @ delta_hat)
        return quadratic_region(a, b, c - q, level)

    sigma_delta = np.atleast_2d(np.asarray(sigma_delta, dtype=float))
    sigma_pi = np.atleast_2d(np.asarray(sigma_pi, dtype=float))
    cross = np.atleast_2d(np.asarray(sigma_delta_pi, dtype=float))

    if r == 1:
        return quadratic_region(
            float(pi_hat[0] ** 2 - q * sigma_pi[0, 0]),
            float(pi_hat[0] * delta_hat[0] - q * cross[0, 0]),
            float(delta_hat[0] ** 2 - q * sigma_delta[0, 0]),
            level,
        )

    return _determinant_region(delta_hat, pi_hat, sigma_delta, sigma_pi, cross, q, level)


def _determinant_region(delta_hat, pi_hat, sigma_delta, sigma_pi, cross, q, level):
    r = len(delta_hat)

    def boundary(theta: float) -> float:
        restricted = delta_hat - pi_hat * theta
        variance = sigma_delta - theta * (cross + cross.T) + theta**2 * sigma_pi
        return float(np.linalg.det(q * variance - np.outer(restricted, restricted)))

    def inside(theta: float) -> bool:
        return boundary(theta) >= 0

    degree = 2 * r
    scale = 1.0 + min(
        float(np.linalg.norm(delta_hat)) / max(float(np.linalg.norm(pi_hat)), 1e-12), 1e6
    )
    nodes = scale * np.cos(np.pi * (np.arange(degree + 1) + 0.5) / (degree + 1))
    polynomial = np.polynomial.Polynomial.fit(
        nodes, [boundary(node) for node in nodes], degree
    )
    roots = np.sort(
        [
            float(root.real)
            for root in polynomial.roots()
            if abs(root.imag) <= 1e-9 * (1.0 + abs(root.real))
        ]
    )

    edges = [-np.inf, *roots, np.inf]
    pieces = []
    for low, high in zip(edges[:-1], edges[1:]):
        if np.isinf(low) and np.isinf(high):
            probe = 0.0
        elif np.isinf(low):
            probe = high - scale
        elif np.isinf(high):
            probe = low + scale
        else:
            probe = (low + high) / 2.0
        if inside(probe):
            if pieces and pieces[-1][1] == low:
                pieces[-1] = (pieces[-1][0], high)
            else:
                pieces.append((low, high))

    intervals = tuple((float(low), float(high)) for low, high in pieces)
    if not intervals:
        regime = CsRegime.EMPTY
    elif len(intervals) > 1:
        regime = CsRegime.DISJOINT
    elif np.isinf(intervals[0][0]) and np.isinf(intervals[0][1]):
        regime = CsRegime.REAL_LINE
    elif np.isinf(intervals[0][0]) or np.isinf(intervals[0][1]):
        regime = CsRegime.HALF_LINE
    else:
        regime = CsRegime.BOUNDED

    return ArConfidenceSet(regime, intervals, tuple(float(root) for root in roots), level)


def weak_iv_report(
    estimate,
    theta0: float = 0.0,
    level: float = 0.95,
    variance: str = "null_imposed",
    logger: logging.Logger = logger,
) -> WeakIvReport:
    if variance not in VARIANCE_MODES:
        raise ValueError(f"variance must be one of {', '.join(VARIANCE_MODES)}")

    joint = {}
    sigma_delta = estimate.sigma_delta
    if variance == "null_imposed":
        joint = {"sigma_pi": estimate.sigma_pi, "sigma_delta_pi": estimate.sigma_delta_pi}
    elif getattr(estimate, "sigma_delta_fixed", None) is not None:
        sigma_delta = estimate.sigma_delta_fixed

    f_stat = f_statistic(estimate.pi, estimate.sigma_pi)
    ar_stat, ar_pvalue = ar_statistic(estimate.delta, estimate.pi, sigma_delta, theta0, **joint)
    cs = ar_confidence_set(estimate.delta, estimate.pi, sigma_delta, level, **joint)

    logger.info(
        "F %.4g, AR(%s) %.4g (p %.4g), CS %s %s",
        f_stat,
        theta0,
        ar_stat,
        ar_pvalue,
        cs.regime.value,
        cs.describe(),
    )
    return WeakIvReport(
        f_stat=f_stat,
        f_exceeds_10=f_stat > F_THRESHOLDS[0],
        f_exceeds_16_3=f_stat > F_THRESHOLDS[1],
        f_exceeds_104_7=f_stat > F_THRESHOLDS[2],
        theta0=theta0,
        ar_stat=ar_stat,
        ar_pvalue=ar_pvalue,
        cs=cs,
        level=level,
        variance=variance,
    )
