"""
Exact error probabilities for clusters and for the fusion center.

Two evaluation paths:
- Closed-form binomial sums when every sensor (or every cluster) is identical
- Exhaustive enumeration of all outcome vectors otherwise, capped in size

Also hosts the estimator dispatch that decides, per configuration, whether a
quantity is computed exactly or replaced by a concentration bound.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import binom

from src.concentration import (
    cluster_fa_bound,
    cluster_md_bound,
    fc_fa_bound,
    fc_md_bound,
    fc_statistic_means,
)
from src.detection_core import (
    TIE_RTOL,
    ClusterQuality,
    ClusterSpec,
    DomainError,
    EnumerationSizeError,
    EvalReport,
    SensorWeights,
    SystemConfig,
    cluster_comm_prob,
    cluster_weight_arrays,
    cluster_weights,
    expected_loss,
    fc_threshold,
    homogeneous_params,
    tie_scale,
)

logger = logging.getLogger(__name__)

MAX_ENUM_SENSORS = 24
MAX_ENUM_CLUSTERS = 16

# Clusters tabulated at once by the fusion-center enumeration; the rest are looped over
_FC_BLOCK = 10


class EstimatorPolicy(str, Enum):
    """How error probabilities are obtained."""

    AUTO = 'auto'
    EXACT = 'exact'
    BOUND = 'bound'


@dataclass(frozen=True)
class ErrorPair:
    """False-alarm and missed-detection probabilities."""

    p_fa: float
    p_md: float


@dataclass(frozen=True)
class HomogeneousClusterSpec:
    """
    Cluster of n identical sensors tested on its count of ones.

    Args:
        n: Sensors in the cluster
        p_fa_s: Sensor false-alarm probability
        p_md_s: Sensor missed-detection probability
        gamma_c: Count threshold in [0, n]
        tie_prob: Probability of deciding H0 when the count equals gamma_c
    """

    n: int
    p_fa_s: float
    p_md_s: float
    gamma_c: float
    tie_prob: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise DomainError(f"cluster size must be positive, got {self.n}")
        if not 0.0 <= self.gamma_c <= self.n:
            raise DomainError(f"count threshold {self.gamma_c} outside [0, {self.n}]")
        for name in ('p_fa_s', 'p_md_s', 'tie_prob'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name}={value} outside [0, 1]")


def _clip(p: float) -> float:
    return float(min(1.0, max(0.0, p)))


def cluster_errors_homogeneous(spec: HomogeneousClusterSpec) -> ErrorPair:
    """
    Closed-form cluster errors from binomial tails of the count of ones.

    The atom at gamma_c only contributes when gamma_c is an integer.
    """
    n, p_c = spec.n, spec.tie_prob
    q = 1.0 - spec.p_md_s
    nearest = round(spec.gamma_c)
    if abs(spec.gamma_c - nearest) <= TIE_RTOL * max(1.0, n):
        k = int(nearest)
        p_fa = binom.sf(k, n, spec.p_fa_s) + (1.0 - p_c) * binom.pmf(k, n, spec.p_fa_s)
        p_md = binom.cdf(k - 1, n, q) + p_c * binom.pmf(k, n, q)
    else:
        k = math.floor(spec.gamma_c)
        p_fa = binom.sf(k, n, spec.p_fa_s)
        p_md = binom.cdf(k, n, q)
    return ErrorPair(p_fa=_clip(p_fa), p_md=_clip(p_md))


class ClusterStatistic:
    """
    Full distribution of a cluster's weighted-sum statistic.

    Every one of the 2^n measurement vectors is tabulated once and sorted by
    statistic value. Only the sorted values and the two cumulative mass
    arrays are kept; error probabilities for any (gamma, tie_prob) are read
    off with two binary searches.
    """

    def __init__(self, values: np.ndarray, mass_h0: np.ndarray, mass_h1: np.ndarray,
                 interval: Tuple[float, float]):
        order = np.argsort(values, kind='stable')
        self.values = values[order]
        self.interval = interval
        self.tol = tie_scale(*interval)
        # _cdf_h1[i] is the H1 mass of values[:i], _tail_h0[i] the H0 mass of values[i:]
        self._cdf_h1 = np.concatenate(([0.0], np.cumsum(mass_h1[order])))
        self._tail_h0 = np.concatenate((np.cumsum(mass_h0[order][::-1])[::-1], [0.0]))

    @classmethod
    def from_cluster(cls, cluster: ClusterSpec,
                     cap: int = MAX_ENUM_SENSORS) -> 'ClusterStatistic':
        """
        Raises:
            EnumerationSizeError: If the cluster has more than cap sensors
        """
        if cluster.size > cap:
            raise EnumerationSizeError(
                f"cluster of {cluster.size} sensors exceeds enumeration cap {cap}"
            )
        w1, w0 = cluster.weights
        values = np.zeros(1)
        mass_h0 = np.ones(1)
        mass_h1 = np.ones(1)
        # pattern index bit i is the report of sensor i
        for i, s in enumerate(cluster.sensors):
            values = np.concatenate((values - w0[i], values + w1[i]))
            mass_h0 = np.concatenate((mass_h0 * (1.0 - s.p_fa), mass_h0 * s.p_fa))
            mass_h1 = np.concatenate((mass_h1 * s.p_md, mass_h1 * (1.0 - s.p_md)))
        return cls(values, mass_h0, mass_h1, cluster.interval)

    @property
    def total_mass(self) -> Tuple[float, float]:
        return float(self._tail_h0[0]), float(self._cdf_h1[-1])

    def _band(self, gammas):
        """Index range [lo, hi) of values tied with each threshold."""
        lo = np.searchsorted(self.values, gammas - self.tol, side='left')
        hi = np.searchsorted(self.values, gammas + self.tol, side='right')
        return lo, hi

    def masses_at(self, gamma: float) -> Tuple[float, float, float, float]:
        """H0 mass above, H0 mass tied, H1 mass below, H1 mass tied."""
        above_h0, tied_h0, below_h1, tied_h1 = self.masses_many(np.array([gamma]))
        return float(above_h0[0]), float(tied_h0[0]), float(below_h1[0]), float(tied_h1[0])

    def masses_many(self, gammas: np.ndarray) -> Tuple[np.ndarray, ...]:
        """masses_at() over an array of thresholds."""
        lo, hi = self._band(np.asarray(gammas, dtype=float))
        above_h0 = self._tail_h0[hi]
        below_h1 = self._cdf_h1[lo]
        tied_h0 = np.maximum(self._tail_h0[lo] - above_h0, 0.0)
        tied_h1 = np.maximum(self._cdf_h1[hi] - below_h1, 0.0)
        return above_h0, tied_h0, below_h1, tied_h1

    def errors(self, gamma: float, tie_prob: float) -> ErrorPair:
        lo, hi = self._band(float(gamma))
        # mixing the two cumulative values never subtracts them
        return ErrorPair(
            p_fa=_clip(tie_prob * self._tail_h0[hi] + (1.0 - tie_prob) * self._tail_h0[lo]),
            p_md=_clip((1.0 - tie_prob) * self._cdf_h1[lo] + tie_prob * self._cdf_h1[hi]),
        )


def cluster_errors_enumerate(cluster: ClusterSpec, cap: int = MAX_ENUM_SENSORS) -> ErrorPair:
    """Exact cluster errors by enumerating all 2^n measurement vectors."""
    return ClusterStatistic.from_cluster(cluster, cap).errors(cluster.gamma, cluster.tie_prob)


def homogeneous_spec(cluster: ClusterSpec) -> Optional[HomogeneousClusterSpec]:
    """Count-threshold view of a cluster of identical sensors, or None."""
    s = homogeneous_params(cluster)
    if s is None:
        return None
    w1, w0 = cluster.weights
    n = cluster.size
    gamma_c = (cluster.gamma + n * w0[0]) / (w1[0] + w0[0])
    return HomogeneousClusterSpec(
        n=n, p_fa_s=s.p_fa, p_md_s=s.p_md,
        gamma_c=min(float(n), max(0.0, gamma_c)), tie_prob=cluster.tie_prob,
    )


def cluster_errors_exact(cluster: ClusterSpec, cap: int = MAX_ENUM_SENSORS) -> ErrorPair:
    spec = homogeneous_spec(cluster)
    if spec is not None:
        return cluster_errors_homogeneous(spec)
    return cluster_errors_enumerate(cluster, cap)


def _fc_tolerance(weights: Sequence[SensorWeights]) -> float:
    span = sum(abs(w.w1) + abs(w.w0) for w in weights)
    return TIE_RTOL * max(1.0, span)


def fc_errors_homogeneous(n_c: int, quality: ClusterQuality, gamma: float,
                          strict: bool = True) -> ErrorPair:
    """
    FC errors for n_c identical clusters.

    Conditions on the number k of communicating clusters and on the count c
    of clusters reporting one among them; the FC decides H1 when
    c*w1 - (k - c)*w0 >= gamma, ties included.

    Raises:
        DegenerateWeightError: If strict and the cluster errors sit on the boundary
    """
    if n_c < 1:
        raise DomainError(f"cluster count must be positive, got {n_c}")
    w = cluster_weights(quality, strict=strict)
    tol = _fc_tolerance([w] * n_c)

    k = np.arange(n_c + 1)[:, None]
    c = np.arange(n_c + 1)[None, :]
    valid = c <= k
    stat = c * w.w1 - (k - c) * w.w0
    decide_h1 = (stat >= gamma - tol) & valid
    decide_h0 = (~decide_h1) & valid

    p_k = binom.pmf(np.arange(n_c + 1), n_c, quality.p_com_c)
    ones_h0 = np.where(valid, binom.pmf(c, k, quality.p_fa_c), 0.0)
    ones_h1 = np.where(valid, binom.pmf(c, k, 1.0 - quality.p_md_c), 0.0)
    p_fa_k = np.sum(np.where(decide_h1, ones_h0, 0.0), axis=1)
    p_md_k = np.sum(np.where(decide_h0, ones_h1, 0.0), axis=1)
    return ErrorPair(p_fa=_clip(float(p_k @ p_fa_k)), p_md=_clip(float(p_k @ p_md_k)))


def _fc_table(qualities: Sequence[ClusterQuality],
              weights: Sequence[SensorWeights]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Tabulate the FC statistic over silent / reports-one / reports-zero
    states of every cluster, with H0 and H1 probabilities.
    """
    values = np.zeros(1)
    mass_h0 = np.ones(1)
    mass_h1 = np.ones(1)
    for q, w in zip(qualities, weights):
        off = 1.0 - q.p_com_c
        values = np.concatenate((values, values + w.w1, values - w.w0))
        mass_h0 = np.concatenate((
            mass_h0 * off, mass_h0 * q.p_com_c * q.p_fa_c, mass_h0 * q.p_com_c * (1.0 - q.p_fa_c),
        ))
        mass_h1 = np.concatenate((
            mass_h1 * off, mass_h1 * q.p_com_c * (1.0 - q.p_md_c), mass_h1 * q.p_com_c * q.p_md_c,
        ))
    return values, mass_h0, mass_h1


def fc_errors_enumerate(qualities: Sequence[ClusterQuality], gamma: float,
                        cap: int = MAX_ENUM_CLUSTERS, strict: bool = True) -> ErrorPair:
    """
    Exact FC errors over every connectivity pattern and every decision
    vector of the communicating clusters. Ties go to H1.

    Raises:
        EnumerationSizeError: If there are more than cap clusters
        DegenerateWeightError: If strict and a cluster sits on the boundary
    """
    n_c = len(qualities)
    if n_c == 0:
        raise DomainError("no clusters given")
    if n_c > cap:
        raise EnumerationSizeError(f"{n_c} clusters exceed enumeration cap {cap}")
    weights = [cluster_weights(q, strict=strict) for q in qualities]
    tol = _fc_tolerance(weights)

    head = min(n_c, _FC_BLOCK)
    head_vals, head_h0, head_h1 = _fc_table(qualities[:head], weights[:head])
    tail_vals, tail_h0, tail_h1 = _fc_table(qualities[head:], weights[head:])

    p_fa = 0.0
    p_md = 0.0
    for v, m0, m1 in zip(tail_vals, tail_h0, tail_h1):
        decide_h1 = head_vals + v >= gamma - tol
        p_fa += m0 * float(np.sum(head_h0[decide_h1]))
        p_md += m1 * float(np.sum(head_h1[~decide_h1]))
    return ErrorPair(p_fa=_clip(p_fa), p_md=_clip(p_md))


class FcPartialEnumeration:
    """
    FC statistic of every cluster except one, tabulated once.

    errors_with() returns the exact FC errors for any quality of the
    excluded cluster by conditioning on its three states.
    """

    def __init__(self, others: Sequence[ClusterQuality], gamma: float,
                 cap: int = MAX_ENUM_CLUSTERS, strict: bool = True):
        if len(others) + 1 > cap:
            raise EnumerationSizeError(f"{len(others) + 1} clusters exceed enumeration cap {cap}")
        self.gamma = gamma
        self.strict = strict
        self._weights = [cluster_weights(q, strict=strict) for q in others]
        self._span = sum(abs(w.w1) + abs(w.w0) for w in self._weights)
        values, mass_h0, mass_h1 = _fc_table(others, self._weights)
        order = np.argsort(values, kind='stable')
        self.values = values[order]
        self._tail_h0 = np.concatenate((np.cumsum(mass_h0[order][::-1])[::-1], [0.0]))
        self._cdf_h1 = np.concatenate(([0.0], np.cumsum(mass_h1[order])))

    def errors_many(self, p_fa: np.ndarray, p_md: np.ndarray,
                    p_com: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """FC errors for arrays of candidate qualities of the free cluster."""
        p_fa = np.atleast_1d(np.asarray(p_fa, dtype=float))
        p_md = np.atleast_1d(np.asarray(p_md, dtype=float))
        on = np.broadcast_to(np.asarray(p_com, dtype=float), p_fa.shape)
        w1, w0 = cluster_weight_arrays(p_fa, p_md, strict=self.strict)
        tol = TIE_RTOL * np.maximum(1.0, self._span + np.abs(w1) + np.abs(w0))
        # states: silent, reports one, reports zero
        shifts = np.stack([np.zeros_like(w1), w1, -w0], axis=1)
        state_h0 = np.stack([1.0 - on, on * p_fa, on * (1.0 - p_fa)], axis=1)
        state_h1 = np.stack([1.0 - on, on * (1.0 - p_md), on * p_md], axis=1)
        idx = np.searchsorted(self.values, self.gamma - shifts - tol[:, None], side='left')
        out_fa = np.clip(np.sum(state_h0 * self._tail_h0[idx], axis=1), 0.0, 1.0)
        out_md = np.clip(np.sum(state_h1 * self._cdf_h1[idx], axis=1), 0.0, 1.0)
        return out_fa, out_md

    def errors_with(self, quality: ClusterQuality) -> ErrorPair:
        p_fa, p_md = self.errors_many(
            np.array([quality.p_fa_c]), np.array([quality.p_md_c]), np.array([quality.p_com_c]))
        return ErrorPair(p_fa=float(p_fa[0]), p_md=float(p_md[0]))


def _deterministic_errors(qualities: Sequence[ClusterQuality], gamma: float,
                          strict: bool) -> Tuple[Optional[float], Optional[float]]:
    """Indicator errors for hypotheses under which the FC statistic is constant."""
    weights = [cluster_weights(q, strict=strict) for q in qualities]
    tol = _fc_tolerance(weights)
    mean_h0, mean_h1, var_h0, var_h1 = fc_statistic_means(qualities, weights)
    p_fa = (1.0 if mean_h0 >= gamma - tol else 0.0) if var_h0 == 0.0 else None
    p_md = (1.0 if mean_h1 < gamma - tol else 0.0) if var_h1 == 0.0 else None
    return p_fa, p_md


def fc_errors(qualities: Sequence[ClusterQuality], gamma: float, use_bound: bool,
              strict: bool = True, literal_md: bool = False,
              cap: int = MAX_ENUM_CLUSTERS) -> ErrorPair:
    """
    FC errors by the requested route.

    Exact: closed form when every cluster shares one quality, enumeration
    otherwise. Bound: the FC concentration bounds, with a constant statistic
    replaced by its indicator.
    """
    if not use_bound:
        first = qualities[0]
        if all(q.key == first.key for q in qualities[1:]):
            return fc_errors_homogeneous(len(qualities), first, gamma, strict=strict)
        return fc_errors_enumerate(qualities, gamma, cap=cap, strict=strict)

    fixed_fa, fixed_md = _deterministic_errors(qualities, gamma, strict)
    if fixed_fa is not None or fixed_md is not None:
        logger.debug("FC statistic is constant under a hypothesis; using its indicator")
    p_fa = fixed_fa if fixed_fa is not None else fc_fa_bound(qualities, gamma, strict=strict)
    p_md = fixed_md if fixed_md is not None else fc_md_bound(
        qualities, gamma, strict=strict, literal=literal_md)
    return ErrorPair(p_fa=p_fa, p_md=p_md)


def uses_cluster_bound(cluster: ClusterSpec, policy: EstimatorPolicy, m_s: int) -> bool:
    if policy == EstimatorPolicy.BOUND:
        return True
    if policy == EstimatorPolicy.EXACT:
        return False
    return cluster.size > m_s


def uses_fc_bound(n_c: int, policy: EstimatorPolicy, m_c: int) -> bool:
    if policy == EstimatorPolicy.BOUND:
        return True
    if policy == EstimatorPolicy.EXACT:
        return False
    return n_c > m_c


def cluster_quality(cluster: ClusterSpec, policy: EstimatorPolicy = EstimatorPolicy.AUTO,
                    m_s: int = 20) -> ClusterQuality:
    """Cluster as a super-sensor, exact or bounded according to policy."""
    p_com_c = cluster_comm_prob(cluster)
    if uses_cluster_bound(cluster, policy, m_s):
        return ClusterQuality(
            p_fa_c=cluster_fa_bound(cluster), p_md_c=cluster_md_bound(cluster),
            p_com_c=p_com_c, is_bound=True,
        )
    pair = cluster_errors_exact(cluster)
    return ClusterQuality(p_fa_c=pair.p_fa, p_md_c=pair.p_md, p_com_c=p_com_c, is_bound=False)


def system_qualities(config: SystemConfig,
                     policy: EstimatorPolicy = EstimatorPolicy.AUTO) -> List[ClusterQuality]:
    """Qualities of every cluster; identical clusters are evaluated once."""
    cache: Dict[ClusterSpec, ClusterQuality] = {}
    out = []
    for cluster in config.clusters:
        if cluster not in cache:
            cache[cluster] = cluster_quality(cluster, policy, config.m_s)
        out.append(cache[cluster])
    return out


def report_from_qualities(qualities: Sequence[ClusterQuality], config: SystemConfig,
                          policy: EstimatorPolicy = EstimatorPolicy.AUTO) -> EvalReport:
    """FC stage and loss for already-evaluated cluster qualities."""
    fc_bound = uses_fc_bound(len(qualities), policy, config.m_c)
    pair = fc_errors(
        qualities, fc_threshold(config), use_bound=fc_bound, strict=False,
        literal_md=config.literal_fc_md_bound,
    )
    return EvalReport(
        p_fa=pair.p_fa,
        p_md=pair.p_md,
        expected_loss=expected_loss(pair.p_fa, pair.p_md, config),
        used_cluster_bound=any(q.is_bound for q in qualities),
        used_fc_bound=fc_bound,
    )


def evaluate_system(config: SystemConfig,
                    policy: EstimatorPolicy = EstimatorPolicy.AUTO) -> EvalReport:
    """
    Expected loss of a fixed configuration.

    Each cluster is evaluated exactly when it has at most m_s sensors (AUTO),
    otherwise through its concentration bounds; the fusion stage likewise
    switches on m_c. EXACT and BOUND force one route everywhere.
    """
    qualities = system_qualities(config, policy)
    report = report_from_qualities(qualities, config, policy)
    logger.debug(
        "evaluated %d clusters: loss=%.6g (cluster bound=%s, fc bound=%s)",
        config.n_clusters, report.expected_loss, report.used_cluster_bound, report.used_fc_bound,
    )
    return report
