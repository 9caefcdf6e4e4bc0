"""
Concentration bounds for cluster and fusion-center error probabilities.

Provides:
- Principal-branch Lambert W, including a log-space form for W(b * e^a)
- Bennett's inequality and its improved (exactly optimized) variant
- Upper bounds on cluster false-alarm / missed-detection probabilities
- Upper bounds on the fusion-center error probabilities

All bounds are tail bounds for a sum of n independent zero-mean variables
with |x_i| <= M and average variance sigma2. Values above one are clamped.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from src.detection_core import (
    TIE_RTOL,
    ClusterQuality,
    ClusterSpec,
    DegenerateVarianceError,
    DomainError,
    SensorWeights,
    cluster_weight_arrays,
    cluster_weights,
)

logger = logging.getLogger(__name__)

INV_E = math.exp(-1.0)

# Above this value of a + ln(b), W(b * e^a) is solved in log-space
LOG_SPACE_SWITCH = 30.0

MAX_ITERATIONS = 50

# Relative size below which a variance counts as zero
VARIANCE_RTOL = 1e-18


@dataclass(frozen=True)
class BoundInputs:
    """Arguments (n, alpha, M, sigma2) of a Bennett-type tail bound."""

    n: int
    alpha: float
    big_m: float
    sigma2: float

    def __post_init__(self):
        if self.n < 1:
            raise DomainError(f"n must be positive, got {self.n}")
        if not self.big_m > 0:
            raise DomainError(f"M must be positive, got {self.big_m}")
        if not self.sigma2 >= 0:
            raise DomainError(f"sigma2 must be nonnegative, got {self.sigma2}")


def _halley(x: float, w: float) -> Tuple[float, bool]:
    for _ in range(MAX_ITERATIONS):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            return w, False
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1)
        if denom == 0.0 or not math.isfinite(denom):
            return w, False
        step = f / denom
        w -= step
        if abs(step) <= 1e-15 * (1.0 + abs(w)):
            return w, True
    return w, False


def _bisect(func, low: float, high: float) -> float:
    for _ in range(200):
        mid = 0.5 * (low + high)
        if func(mid) > 0:
            high = mid
        else:
            low = mid
        if high - low <= 1e-16 * max(1.0, abs(mid)):
            break
    return 0.5 * (low + high)


def lambert_w0(x: float) -> float:
    """
    Principal branch of the Lambert W function.

    Starts from the branch-point series near -1/e, log1p near the origin and
    the asymptotic ln x - ln ln x expansion for large x, then refines with
    Halley steps. Falls back to bisection if Halley does not settle.

    Raises:
        DomainError: If x < -1/e
    """
    if math.isnan(x):
        raise DomainError("Lambert W of NaN")
    if x < -INV_E:
        if x >= -INV_E * (1.0 + 1e-15):
            return -1.0
        raise DomainError(f"Lambert W undefined for x={x} < -1/e")
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return math.inf

    if x < -0.32:
        p = math.sqrt(max(0.0, 2.0 * (math.e * x + 1.0)))
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3
    elif x <= math.e:
        w = math.log1p(x)
        w = w * (1.0 - math.log1p(w) / (2.0 + w))
    else:
        l1 = math.log(x)
        l2 = math.log(l1)
        w = l1 - l2 + l2 / l1

    w, ok = _halley(x, w)
    if ok and w >= -1.0:
        return w
    logger.debug("Halley iteration did not settle for x=%r; bisecting", x)
    high = 0.0 if x < 0 else max(1.0, math.log1p(x))
    return _bisect(lambda v: v * math.exp(v) - x, -1.0, high)


def lambert_w0_of_exp(b: float, a: float) -> float:
    """
    W(b * e^a) without forming e^a.

    For a + ln b above LOG_SPACE_SWITCH the equation w + ln w = a + ln b is
    solved by Newton steps from w = L - ln L.

    Raises:
        DomainError: If b <= 0
    """
    if not b > 0:
        raise DomainError(f"b must be positive, got {b}")
    target = a + math.log(b)
    if target <= LOG_SPACE_SWITCH:
        return lambert_w0(math.exp(target))

    w = target - math.log(target)
    for _ in range(MAX_ITERATIONS):
        step = (w + math.log(w) - target) / (1.0 + 1.0 / w)
        w -= step
        if abs(step) <= 1e-15 * w:
            break
    return w


def bennett_h(x: float) -> float:
    return (1.0 + x) * math.log1p(x) - x


def bennett_bound(inp: BoundInputs) -> float:
    """
    Bennett's inequality exp(-(n sigma2 / M^2) h(alpha M / (n sigma2))).

    Raises:
        DomainError: Unless 0 <= alpha < n*M and sigma2 > 0
    """
    if not inp.sigma2 > 0:
        raise DomainError("Bennett bound needs a positive variance")
    if not 0.0 <= inp.alpha < inp.n * inp.big_m:
        raise DomainError(f"alpha={inp.alpha} outside [0, {inp.n * inp.big_m})")
    scale = inp.n * inp.sigma2 / inp.big_m ** 2
    value = math.exp(-scale * bennett_h(inp.alpha * inp.big_m / (inp.n * inp.sigma2)))
    return min(1.0, max(0.0, value))


def _log_mgf_term(lam: float, c: float) -> float:
    """ln(1 + c (e^lam - 1 - lam)), stable for large lam."""
    if lam > 30.0:
        return lam + math.log(c + math.exp(-lam) * (1.0 - c - c * lam))
    return math.log1p(c * (math.expm1(lam) - lam))


def improved_bennett_bound(inp: BoundInputs) -> float:
    """
    Improved Bennett bound with the exponent optimized in closed form.

    U = exp(-L alpha / M + n ln(1 + (sigma2/M^2)(e^L - 1 - L))) with
    L = A - W(B e^A), A = M^2/sigma2 + nM/alpha - 1, B = nM/alpha - 1.

    Returns 1 for alpha <= 0 and 0 for alpha > n*M. At alpha = n*M the
    continuous limit (sigma2/M^2)^n is returned: two-point variables can
    reach |x_i| = M, so the all-extreme event keeps positive probability.

    Raises:
        DegenerateVarianceError: If sigma2 is zero inside the valid range
    """
    n, alpha, big_m = inp.n, inp.alpha, inp.big_m
    if alpha <= 0.0:
        return 1.0
    edge = n * big_m
    if alpha > edge * (1.0 + 1e-12):
        return 0.0
    if inp.sigma2 <= 0.0:
        raise DegenerateVarianceError("improved Bennett bound needs a positive variance")
    c = min(1.0, inp.sigma2 / big_m ** 2)
    if alpha >= edge * (1.0 - 1e-12):
        return min(1.0, c ** n)

    big_b = edge / alpha - 1.0
    big_a = 1.0 / c + big_b
    u = lambert_w0_of_exp(big_b, big_a)
    lam = math.log(u) - math.log(big_b)
    exponent = -lam * alpha / big_m + n * _log_mgf_term(lam, c)
    return min(1.0, max(0.0, math.exp(min(exponent, 0.0))))


def improved_bennett_bound_many(n: int, alpha: np.ndarray, big_m: np.ndarray,
                                sigma2: np.ndarray) -> np.ndarray:
    """
    improved_bennett_bound over arrays of (alpha, M, sigma2) sharing n.

    W(B e^A) is taken as e^v with v solving e^v + v = A + ln B. That
    equation is convex and increasing in v, so Newton steps converge from
    the usual starting points at any magnitude.

    Raises:
        DomainError: If an M entry is not positive
        DegenerateVarianceError: If a zero variance falls inside the valid range
    """
    alpha, big_m, sigma2 = np.broadcast_arrays(
        np.asarray(alpha, dtype=float), np.asarray(big_m, dtype=float),
        np.asarray(sigma2, dtype=float))
    if np.any(~(big_m > 0)):
        raise DomainError("M must be positive")
    out = np.ones(alpha.shape)
    edge = n * big_m
    out[alpha > edge * (1.0 + 1e-12)] = 0.0
    active = (alpha > 0.0) & (alpha <= edge * (1.0 + 1e-12))
    if np.any(active & ~(sigma2 > 0.0)):
        raise DegenerateVarianceError("improved Bennett bound needs a positive variance")
    c = np.minimum(1.0, np.where(active, sigma2, big_m ** 2) / big_m ** 2)
    at_edge = active & (alpha >= edge * (1.0 - 1e-12))
    out[at_edge] = np.minimum(1.0, c[at_edge] ** n)
    inner = active & ~at_edge
    if not np.any(inner):
        return out

    a, m, ci = alpha[inner], big_m[inner], c[inner]
    big_b = n * m / a - 1.0
    log_b = np.log(big_b)
    target = 1.0 / ci + big_b + log_b
    safe = np.maximum(target, 1.0)
    v = np.where(target < 1.0, target - 0.5, np.log(safe - np.log(safe)))
    for _ in range(MAX_ITERATIONS):
        ev = np.exp(v)
        step = (ev + v - target) / (ev + 1.0)
        v = v - step
        if np.all(np.abs(step) <= 1e-15 * (1.0 + np.abs(v))):
            break
    lam = v - log_b

    term = np.empty_like(lam)
    big = lam > 30.0
    small = ~big
    term[small] = np.log1p(ci[small] * (np.expm1(lam[small]) - lam[small]))
    lb, cb = lam[big], ci[big]
    term[big] = lb + np.log(cb + np.exp(-lb) * (1.0 - cb - cb * lb))
    exponent = -lam * a / m + n * term
    out[inner] = np.clip(np.exp(np.minimum(exponent, 0.0)), 0.0, 1.0)
    return out


@dataclass(frozen=True)
class ClusterBoundModel:
    """
    Threshold-independent pieces of the cluster error bounds.

    The false-alarm bound uses alpha = gamma - fa_center and the
    missed-detection bound alpha = md_center - gamma.
    """

    n: int
    fa_center: float
    fa_sigma2: float
    fa_big_m: float
    md_center: float
    md_sigma2: float
    md_big_m: float

    @classmethod
    def from_cluster(cls, cluster: ClusterSpec) -> 'ClusterBoundModel':
        w1, w0 = cluster.weights
        p_fa = np.array([s.p_fa for s in cluster.sensors])
        p_md = np.array([s.p_md for s in cluster.sensors])
        span = w1 + w0
        return cls(
            n=cluster.size,
            fa_center=float(np.sum(p_fa * w1 - (1.0 - p_fa) * w0)),
            fa_sigma2=float(np.mean(p_fa * (1.0 - p_fa) * span ** 2)),
            fa_big_m=float(np.max(np.maximum((1.0 - p_fa) * span, p_fa * span))),
            md_center=float(np.sum((1.0 - p_md) * w1 - p_md * w0)),
            md_sigma2=float(np.mean(p_md * (1.0 - p_md) * span ** 2)),
            md_big_m=float(np.max(np.maximum((1.0 - p_md) * span, p_md * span))),
        )

    def fa_bound(self, gamma: float) -> float:
        return improved_bennett_bound(
            BoundInputs(self.n, gamma - self.fa_center, self.fa_big_m, self.fa_sigma2))

    def md_bound(self, gamma: float) -> float:
        return improved_bennett_bound(
            BoundInputs(self.n, self.md_center - gamma, self.md_big_m, self.md_sigma2))

    def bounds_many(self, gammas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Both bounds along an array of thresholds."""
        gammas = np.asarray(gammas, dtype=float)
        return (
            improved_bennett_bound_many(self.n, gammas - self.fa_center, self.fa_big_m, self.fa_sigma2),
            improved_bennett_bound_many(self.n, self.md_center - gammas, self.md_big_m, self.md_sigma2),
        )


def cluster_fa_bound(cluster: ClusterSpec) -> float:
    """Upper bound on Pr(cluster statistic exceeds gamma | H0)."""
    return ClusterBoundModel.from_cluster(cluster).fa_bound(cluster.gamma)


def cluster_md_bound(cluster: ClusterSpec) -> float:
    """Upper bound on Pr(cluster statistic at or below gamma | H1)."""
    return ClusterBoundModel.from_cluster(cluster).md_bound(cluster.gamma)


def _fc_terms(on: np.ndarray, p_fa: np.ndarray, p_md: np.ndarray,
              w1: np.ndarray, w0: np.ndarray) -> Dict[str, np.ndarray]:
    """Per-cluster moments and ranges of the FC summand tau_j * z~_j."""
    mean_h0 = on * (p_fa * w1 - (1.0 - p_fa) * w0)
    mean_h1 = on * ((1.0 - p_md) * w1 - p_md * w0)
    second_h0 = on * (p_fa * w1 ** 2 + (1.0 - p_fa) * w0 ** 2)
    second_h1 = on * ((1.0 - p_md) * w1 ** 2 + p_md * w0 ** 2)
    return {
        'mean_h0': mean_h0,
        'mean_h1': mean_h1,
        'second_h0': second_h0,
        'second_h1': second_h1,
        'range_h0': np.maximum.reduce([np.abs(w1 - mean_h0), np.abs(w0 + mean_h0), np.abs(mean_h0)]),
        'range_h1': np.maximum.reduce([np.abs(w1 - mean_h1), np.abs(w0 + mean_h1), np.abs(mean_h1)]),
        'range_h1_literal': np.maximum(np.abs(w1 - second_h1), np.abs(w0 + second_h1)),
    }


def _quality_arrays(qualities: Sequence[ClusterQuality],
                    weights: Sequence[SensorWeights]) -> Tuple[np.ndarray, ...]:
    return (
        np.array([q.p_com_c for q in qualities], dtype=float),
        np.array([q.p_fa_c for q in qualities], dtype=float),
        np.array([q.p_md_c for q in qualities], dtype=float),
        np.array([w.w1 for w in weights], dtype=float),
        np.array([w.w0 for w in weights], dtype=float),
    )


def _snap_variance(second: float, mean_sq: float) -> float:
    total = second - mean_sq
    if total <= VARIANCE_RTOL * max(1.0, second):
        return 0.0
    return total


def fc_statistic_means(qualities: Sequence[ClusterQuality],
                       weights: Sequence[SensorWeights]) -> Tuple[float, float, float, float]:
    """Means and summed variances of the FC statistic under H0 and H1."""
    t = _fc_terms(*_quality_arrays(qualities, weights))
    var_h0 = _snap_variance(float(np.sum(t['second_h0'])), float(np.sum(t['mean_h0'] ** 2)))
    var_h1 = _snap_variance(float(np.sum(t['second_h1'])), float(np.sum(t['mean_h1'] ** 2)))
    return float(np.sum(t['mean_h0'])), float(np.sum(t['mean_h1'])), var_h0, var_h1


def fc_fa_bound(qualities: Sequence[ClusterQuality], gamma: float,
                strict: bool = True) -> float:
    """
    Upper bound on the FC false-alarm probability Pr(S >= gamma | H0).

    Raises:
        DegenerateWeightError: If strict and a cluster sits on the boundary
        DegenerateVarianceError: If the H0 statistic is constant
    """
    weights = [cluster_weights(q, strict=strict) for q in qualities]
    t = _fc_terms(*_quality_arrays(qualities, weights))
    variance = _snap_variance(float(np.sum(t['second_h0'])), float(np.sum(t['mean_h0'] ** 2)))
    if variance == 0.0:
        raise DegenerateVarianceError("FC statistic is constant under H0")
    n_c = len(qualities)
    alpha = gamma - float(np.sum(t['mean_h0']))
    return improved_bennett_bound(
        BoundInputs(n_c, alpha, float(np.max(t['range_h0'])), variance / n_c))


def fc_md_bound(qualities: Sequence[ClusterQuality], gamma: float,
                strict: bool = True, literal: bool = False) -> float:
    """
    Upper bound on the FC missed-detection probability Pr(S < gamma | H1).

    The statistic is centered on its first moment. literal=True instead
    centers on the squared-weight moment and uses the matching range, for
    side-by-side comparison with that published form.

    Raises:
        DegenerateWeightError: If strict and a cluster sits on the boundary
        DegenerateVarianceError: If the H1 statistic is constant
    """
    weights = [cluster_weights(q, strict=strict) for q in qualities]
    t = _fc_terms(*_quality_arrays(qualities, weights))
    variance = _snap_variance(float(np.sum(t['second_h1'])), float(np.sum(t['mean_h1'] ** 2)))
    if variance == 0.0:
        raise DegenerateVarianceError("FC statistic is constant under H1")
    n_c = len(qualities)
    center = t['second_h1'] if literal else t['mean_h1']
    big_m = t['range_h1_literal'] if literal else t['range_h1']
    alpha = float(np.sum(center)) - gamma
    return improved_bennett_bound(BoundInputs(n_c, alpha, float(np.max(big_m)), variance / n_c))


class FcBoundModel:
    """
    FC bounds with every cluster but one held fixed.

    errors_many() evaluates both FC bounds for arrays of candidate qualities
    of the free cluster. A hypothesis under which the statistic is constant
    gets its indicator value, with ties going to H1.
    """

    def __init__(self, others: Sequence[ClusterQuality], gamma: float,
                 strict: bool = True, literal: bool = False):
        self.gamma = gamma
        self.strict = strict
        self.literal = literal
        self.n_c = len(others) + 1
        if others:
            weights = [cluster_weights(q, strict=strict) for q in others]
            t = _fc_terms(*_quality_arrays(others, weights))
            self._sums = {key: float(np.sum(v)) for key, v in t.items() if not key.startswith('range')}
            self._sq = {key: float(np.sum(t[key] ** 2)) for key in ('mean_h0', 'mean_h1')}
            self._ranges = {key: float(np.max(v)) for key, v in t.items() if key.startswith('range')}
            self._span = sum(abs(w.w1) + abs(w.w0) for w in weights)
        else:
            self._sums = {'mean_h0': 0.0, 'mean_h1': 0.0, 'second_h0': 0.0, 'second_h1': 0.0}
            self._sq = {'mean_h0': 0.0, 'mean_h1': 0.0}
            self._ranges = {'range_h0': 0.0, 'range_h1': 0.0, 'range_h1_literal': 0.0}
            self._span = 0.0

    def errors_many(self, p_fa: np.ndarray, p_md: np.ndarray,
                    p_com: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        p_fa = np.atleast_1d(np.asarray(p_fa, dtype=float))
        p_md = np.atleast_1d(np.asarray(p_md, dtype=float))
        p_com = np.broadcast_to(np.asarray(p_com, dtype=float), p_fa.shape)
        w1, w0 = cluster_weight_arrays(p_fa, p_md, strict=self.strict)
        t = _fc_terms(p_com, p_fa, p_md, w1, w0)
        tol = TIE_RTOL * np.maximum(1.0, self._span + np.abs(w1) + np.abs(w0))

        md_center_key = 'second_h1' if self.literal else 'mean_h1'
        md_range_key = 'range_h1_literal' if self.literal else 'range_h1'
        mean_h0 = self._sums['mean_h0'] + t['mean_h0']
        mean_h1 = self._sums['mean_h1'] + t['mean_h1']
        var_h0 = self._variance('h0', t)
        var_h1 = self._variance('h1', t)

        # a constant statistic gets its indicator, ties going to H1
        out_fa = (mean_h0 >= self.gamma - tol).astype(float)
        out_md = (mean_h1 < self.gamma - tol).astype(float)
        live = var_h0 > 0.0
        if np.any(live):
            big_m = np.maximum(self._ranges['range_h0'], t['range_h0'][live])
            out_fa[live] = improved_bennett_bound_many(
                self.n_c, self.gamma - mean_h0[live], big_m, var_h0[live] / self.n_c)
        live = var_h1 > 0.0
        if np.any(live):
            center = self._sums[md_center_key] + t[md_center_key][live]
            big_m = np.maximum(self._ranges[md_range_key], t[md_range_key][live])
            out_md[live] = improved_bennett_bound_many(
                self.n_c, center - self.gamma, big_m, var_h1[live] / self.n_c)
        return out_fa, out_md

    def _variance(self, hyp: str, t: Dict[str, np.ndarray]) -> np.ndarray:
        second = self._sums[f'second_{hyp}'] + t[f'second_{hyp}']
        total = second - (self._sq[f'mean_{hyp}'] + t[f'mean_{hyp}'] ** 2)
        return np.where(total <= VARIANCE_RTOL * np.maximum(1.0, second), 0.0, total)
