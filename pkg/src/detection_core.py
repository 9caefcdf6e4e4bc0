"""
Detection core: domain types and closed-form system quantities.

Holds everything the rest of the package shares:
- Sensor, cluster and system records (frozen dataclasses, validated on build)
- Log-likelihood weights for sensors and for clusters seen by the fusion center
- Cluster communication probability and expected number of reachable clusters
- Fusion center threshold and the expected-loss objective
- The shared tie test used by every weighted-sum comparison
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# Relative tolerance for declaring a weighted sum equal to its threshold
TIE_RTOL = 1e-9

# Floor applied inside logarithms when cluster weights are built non-strictly
LOG_FLOOR = 1e-300

# Estimator switches used in the published experiments
DEFAULT_M_S = 20
DEFAULT_M_C = 10


class DomainError(ValueError):
    """Invalid probability, threshold or numeric argument."""


class EnumerationSizeError(DomainError):
    """Exact enumeration requested above its size cap."""


class DegenerateWeightError(DomainError):
    """Cluster error probability on the boundary; FC weights diverge."""


class DegenerateVarianceError(DomainError):
    """Zero variance handed to a concentration bound."""


class DivisibilityError(DomainError):
    """Sensor count not divisible by the requested cluster count."""


def _check_probability(name: str, value: float, low: float = 0.0, high: float = 1.0,
                       open_interval: bool = False) -> None:
    if not isinstance(value, (int, float, np.floating)) or math.isnan(value):
        raise DomainError(f"{name} must be a real number, got {value!r}")
    if open_interval:
        if not (low < value < high):
            raise DomainError(f"{name}={value} outside ({low}, {high})")
    elif not (low <= value <= high):
        raise DomainError(f"{name}={value} outside [{low}, {high}]")


@dataclass(frozen=True)
class SensorParams:
    """Error and connectivity probabilities of one binary sensor."""

    p_fa: float
    p_md: float
    p_com: float

    def __post_init__(self):
        _check_probability('p_fa', self.p_fa, 0.0, 0.5, open_interval=True)
        _check_probability('p_md', self.p_md, 0.0, 0.5, open_interval=True)
        _check_probability('p_com', self.p_com)


@dataclass(frozen=True)
class SensorWeights:
    """Log-likelihood weights for a one (w1) and a zero (w0) report."""

    w1: float
    w0: float


@dataclass(frozen=True)
class ClusterSpec:
    """
    An ordered group of sensors with its decision threshold.

    The cluster decides H1 when sum_i [w1_i*y_i - w0_i*(1 - y_i)] exceeds
    gamma, H0 when it falls below, and on equality decides H0 with
    probability tie_prob.
    """

    sensors: Tuple[SensorParams, ...]
    gamma: float
    tie_prob: float = 1.0

    def __post_init__(self):
        sensors = tuple(self.sensors)
        object.__setattr__(self, 'sensors', sensors)
        if not sensors:
            raise DomainError("a cluster needs at least one sensor")
        _check_probability('tie_prob', self.tie_prob)
        low, high = self.interval
        slack = TIE_RTOL * max(1.0, high - low)
        if not (low - slack <= self.gamma <= high + slack):
            raise DomainError(
                f"cluster threshold {self.gamma} outside [{low}, {high}]"
            )

    @property
    def size(self) -> int:
        return len(self.sensors)

    @property
    def weights(self) -> Tuple[np.ndarray, np.ndarray]:
        w1, w0 = weight_arrays(self.sensors)
        return w1, w0

    @property
    def interval(self) -> Tuple[float, float]:
        return sensor_interval(self.sensors)

    @property
    def ell_min(self) -> float:
        return self.interval[0]

    @property
    def ell_max(self) -> float:
        return self.interval[1]

    def with_rule(self, gamma: float, tie_prob: float) -> 'ClusterSpec':
        return replace(self, gamma=gamma, tie_prob=tie_prob)


@dataclass(frozen=True)
class ClusterQuality:
    """A cluster as a super-sensor seen by the fusion center."""

    p_fa_c: float
    p_md_c: float
    p_com_c: float
    is_bound: bool = False

    def __post_init__(self):
        _check_probability('p_fa_c', self.p_fa_c)
        _check_probability('p_md_c', self.p_md_c)
        _check_probability('p_com_c', self.p_com_c)

    @property
    def key(self) -> Tuple[float, float, float]:
        return (self.p_fa_c, self.p_md_c, self.p_com_c)


@dataclass(frozen=True)
class SystemConfig:
    """
    Clusters plus the decision-theoretic context of the fusion center.

    Args:
        clusters: Cluster specifications, in fusion order
        p1: Prior probability of H1
        loss_fa: Loss of a false alarm (L10)
        loss_md: Loss of a missed detection (L01)
        m_s: Largest cluster evaluated exactly under the automatic policy
        m_c: Largest cluster count evaluated exactly under the automatic policy
        literal_fc_md_bound: Use the squared-weight FC missed-detection bound
    """

    clusters: Tuple[ClusterSpec, ...]
    p1: float
    loss_fa: float
    loss_md: float
    m_s: int = DEFAULT_M_S
    m_c: int = DEFAULT_M_C
    literal_fc_md_bound: bool = field(default=False)

    def __post_init__(self):
        clusters = tuple(self.clusters)
        object.__setattr__(self, 'clusters', clusters)
        if not clusters:
            raise DomainError("a system needs at least one cluster")
        _check_probability('p1', self.p1, open_interval=True)
        if not self.loss_fa > 0 or not self.loss_md > 0:
            raise DomainError(
                f"losses must be positive, got L10={self.loss_fa}, L01={self.loss_md}"
            )
        if self.m_s < 1 or self.m_c < 1:
            raise DomainError(f"estimator switches must be positive, got {self.m_s}, {self.m_c}")

    @property
    def p0(self) -> float:
        return 1.0 - self.p1

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_sensors(self) -> int:
        return sum(c.size for c in self.clusters)

    def with_clusters(self, clusters: Sequence[ClusterSpec]) -> 'SystemConfig':
        return replace(self, clusters=tuple(clusters))


@dataclass(frozen=True)
class EvalReport:
    """Error probabilities and loss of one configuration, with provenance."""

    p_fa: float
    p_md: float
    expected_loss: float
    used_cluster_bound: bool
    used_fc_bound: bool


def sensor_weights(s: SensorParams) -> SensorWeights:
    """
    Log-likelihood weights of a sensor.

    Raises:
        DomainError: If p_fa or p_md lies outside (0, 0.5)
    """
    _check_probability('p_fa', s.p_fa, 0.0, 0.5, open_interval=True)
    _check_probability('p_md', s.p_md, 0.0, 0.5, open_interval=True)
    return SensorWeights(
        w1=math.log((1.0 - s.p_md) / s.p_fa),
        w0=math.log((1.0 - s.p_fa) / s.p_md),
    )


def weight_arrays(sensors: Iterable[SensorParams]) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized sensor weights as (w1, w0) arrays."""
    p_fa = np.array([s.p_fa for s in sensors], dtype=float)
    p_md = np.array([s.p_md for s in sensors], dtype=float)
    return np.log((1.0 - p_md) / p_fa), np.log((1.0 - p_fa) / p_md)


def sensor_interval(sensors: Iterable[SensorParams]) -> Tuple[float, float]:
    """Range [-sum w0, sum w1] of the cluster statistic."""
    w1, w0 = weight_arrays(sensors)
    return -float(np.sum(w0)), float(np.sum(w1))


def cluster_weights(quality: ClusterQuality, strict: bool = True) -> SensorWeights:
    """
    Fusion-center weights of a cluster.

    With strict=False, probabilities on the boundary are evaluated with a
    log floor: an outcome impossible under both hypotheses gets weight 0 and
    a perfect cluster gets a large finite weight.

    Raises:
        DegenerateWeightError: If strict and an error probability is 0 or 1
    """
    p_fa, p_md = quality.p_fa_c, quality.p_md_c
    if strict and not (0.0 < p_fa < 1.0 and 0.0 < p_md < 1.0):
        raise DegenerateWeightError(
            f"cluster errors ({p_fa}, {p_md}) on the boundary; FC weights undefined"
        )

    def log_floor(x: float) -> float:
        return math.log(max(x, LOG_FLOOR))

    return SensorWeights(
        w1=log_floor(1.0 - p_md) - log_floor(p_fa),
        w0=log_floor(1.0 - p_fa) - log_floor(p_md),
    )


def cluster_weight_arrays(p_fa: np.ndarray, p_md: np.ndarray,
                          strict: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized cluster_weights over arrays of cluster error probabilities."""
    p_fa = np.asarray(p_fa, dtype=float)
    p_md = np.asarray(p_md, dtype=float)
    if strict and not (np.all((p_fa > 0) & (p_fa < 1)) and np.all((p_md > 0) & (p_md < 1))):
        raise DegenerateWeightError("cluster errors on the boundary; FC weights undefined")
    w1 = np.log(np.maximum(1.0 - p_md, LOG_FLOOR)) - np.log(np.maximum(p_fa, LOG_FLOOR))
    w0 = np.log(np.maximum(1.0 - p_fa, LOG_FLOOR)) - np.log(np.maximum(p_md, LOG_FLOOR))
    return w1, w0


def cluster_comm_prob(cluster: ClusterSpec) -> float:
    """Probability that at least one sensor of the cluster reaches the FC."""
    p_com = np.array([s.p_com for s in cluster.sensors], dtype=float)
    return float(-np.expm1(np.sum(np.log1p(-p_com)))) if np.all(p_com < 1.0) else 1.0


def homogeneous_comm_prob(n: int, p_com: float) -> float:
    """1 - (1 - p)^n for a cluster of n identical sensors."""
    if p_com >= 1.0:
        return 1.0
    return float(-math.expm1(n * math.log1p(-p_com)))


def expected_communicating_clusters(clusters: Sequence[ClusterSpec]) -> float:
    if not clusters:
        raise DomainError("no clusters given")
    return float(sum(cluster_comm_prob(c) for c in clusters))


def fc_threshold(config: SystemConfig) -> float:
    """FC likelihood threshold ln(L10*p0 / (L01*p1))."""
    return math.log(config.loss_fa * config.p0 / (config.loss_md * config.p1))


def expected_loss(p_fa: float, p_md: float, config: SystemConfig) -> float:
    return config.p0 * p_fa * config.loss_fa + config.p1 * p_md * config.loss_md


def tie_scale(low: float, high: float) -> float:
    """Absolute tie tolerance for a statistic living on [low, high]."""
    return TIE_RTOL * max(1.0, abs(high - low))


def is_tie(stat: Union[float, np.ndarray], gamma: float, width: float) -> Union[bool, np.ndarray]:
    """Equality test shared by all weighted-sum comparisons on an interval of the given width."""
    return np.abs(np.asarray(stat, dtype=float) - gamma) <= TIE_RTOL * max(1.0, abs(width))


def compare_to_threshold(stat: np.ndarray, gamma: Union[float, np.ndarray],
                         tol: Union[float, np.ndarray]) -> np.ndarray:
    """
    Elementwise comparison of a statistic to its threshold.

    Returns:
        int8 array: 1 above, 0 tied within tol, -1 below
    """
    diff = np.asarray(stat, dtype=float) - gamma
    out = np.where(diff > tol, 1, np.where(diff < -tol, -1, 0))
    return out.astype(np.int8)


def count_to_threshold(gamma_c: float, n: int, w: SensorWeights) -> float:
    """Weighted threshold equivalent to a count threshold on n identical sensors."""
    return gamma_c * (w.w1 + w.w0) - n * w.w0


def threshold_to_count(gamma: float, n: int, w: SensorWeights) -> float:
    return (gamma + n * w.w0) / (w.w1 + w.w0)


def homogeneous_cluster(n: int, s: SensorParams, gamma_c: float,
                        tie_prob: float) -> ClusterSpec:
    """Cluster of n copies of s at a count threshold in [0, n]."""
    if not 0 <= gamma_c <= n:
        raise DomainError(f"count threshold {gamma_c} outside [0, {n}]")
    w = sensor_weights(s)
    gamma = count_to_threshold(gamma_c, n, w)
    # keep the endpoints exact so the interval check never trips on rounding
    if gamma_c == 0:
        gamma = -n * w.w0
    elif gamma_c == n:
        gamma = n * w.w1
    return ClusterSpec(sensors=(s,) * n, gamma=gamma, tie_prob=tie_prob)


def cluster_size_for(n: int, n_c: int) -> int:
    """
    Sensors per cluster for an equal split.

    Raises:
        DivisibilityError: If n_c does not divide n
    """
    if n_c < 1 or n < 1 or n % n_c != 0:
        raise DivisibilityError(f"{n} sensors cannot be split into {n_c} equal clusters")
    return n // n_c


def homogeneous_system(n: int, n_c: int, s: SensorParams, config: SystemConfig,
                       gamma_c: float, tie_prob: float) -> SystemConfig:
    """Equal-threshold system of n identical sensors in n_c clusters."""
    size = cluster_size_for(n, n_c)
    cluster = homogeneous_cluster(size, s, gamma_c, tie_prob)
    return config.with_clusters([cluster] * n_c)


def homogeneous_params(cluster: ClusterSpec) -> Optional[SensorParams]:
    """The shared sensor parameters if every sensor is identical, else None."""
    first = cluster.sensors[0]
    if all(s == first for s in cluster.sensors[1:]):
        return first
    return None


def mean_params(cluster: ClusterSpec) -> SensorParams:
    """Arithmetic-mean sensor parameters of a cluster."""
    n = cluster.size
    return SensorParams(
        p_fa=sum(s.p_fa for s in cluster.sensors) / n,
        p_md=sum(s.p_md for s in cluster.sensors) / n,
        p_com=sum(s.p_com for s in cluster.sensors) / n,
    )
