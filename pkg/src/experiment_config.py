"""
Experiment configuration: load, validate and canonically dump JSON configs.

An ExperimentConfig holds the base sensor population, the decision context
(prior and losses), sweep axes, heterogeneity spreads, realization count,
seed and the optimizer resolutions. Defaults reproduce the published
evaluation setup.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from src.detection_core import (
    DEFAULT_M_C,
    DEFAULT_M_S,
    ClusterSpec,
    DivisibilityError,
    DomainError,
    SensorParams,
    SystemConfig,
    cluster_size_for,
    homogeneous_cluster,
    sensor_interval,
)
from src.optimizers import (
    DEFAULT_POINTS_PER_SENSOR,
    DEFAULT_R_P,
    GaussSeidelConfig,
    InitScheme,
    majority_threshold,
)

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = 'CLOUD_CLUSTER_THREADS'

DEFAULT_N_SENSORS = 500
DEFAULT_P1 = 0.65
DEFAULT_LOSS_FA = 100.0
DEFAULT_LOSS_MD = 200.0
DEFAULT_P_FA = 0.2
DEFAULT_P_MD = 0.35
DEFAULT_P_COM = 0.15
DEFAULT_SPREAD = 0.2
DEFAULT_REALIZATIONS = 250
DEFAULT_TRIALS = 100_000

CURVES = ['exact', 'majority', 'approx_thresholds', 'approx_homogeneous', 'approx_heterogeneous']


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration."""


def _default_p_com_grid() -> List[float]:
    return [round(0.05 * k, 2) for k in range(1, 11)]


@dataclass
class ExperimentConfig:
    """
    Everything needed to reproduce one experiment.

    Args:
        n_sensors: Total sensor count N
        n_clusters: Cluster count used by optimize and simulate
        p1: Prior probability of H1
        loss_fa: Loss of a false alarm (L10)
        loss_md: Loss of a missed detection (L01)
        p_fa, p_md, p_com: Base sensor parameters
        p_com_grid: Sweep axis of sweep-pcom and sweep-init
        n_clusters_grid: Sweep axis of sweep-nc; each entry must divide n_sensors
        cluster_sizes, comm_prob_values: Axes of the communication table
        p_fa_spread, p_md_spread: Relative half-widths of the uniform
            heterogeneity draws around p_fa and p_md
        realizations: Heterogeneous draws averaged per sweep point
        seed: Master seed for heterogeneity draws and simulation
        points_per_sensor: Threshold grid points per sensor (r_gamma / n)
        r_p: Tie-probability grid resolution
        m_s, m_c: Exact-evaluation switches
        trials: Monte Carlo trials for simulate
        threads: Worker count; None defers to the environment
        init_scheme: Gauss-Seidel starting point
        max_iters: Gauss-Seidel update cap; None means 50 per cluster
        curves: Curves computed by the sweeps
        literal_fc_md_bound: Use the squared-weight FC missed-detection bound
        output: Default CSV path
    """

    n_sensors: int = DEFAULT_N_SENSORS
    n_clusters: int = 10
    p1: float = DEFAULT_P1
    loss_fa: float = DEFAULT_LOSS_FA
    loss_md: float = DEFAULT_LOSS_MD
    p_fa: float = DEFAULT_P_FA
    p_md: float = DEFAULT_P_MD
    p_com: float = DEFAULT_P_COM
    p_com_grid: List[float] = field(default_factory=_default_p_com_grid)
    n_clusters_grid: List[int] = field(default_factory=lambda: [1, 2, 5, 10, 20, 25, 50])
    cluster_sizes: List[int] = field(default_factory=lambda: list(range(1, 101)))
    comm_prob_values: List[float] = field(default_factory=lambda: [0.05, 0.25, 0.5])
    p_fa_spread: float = DEFAULT_SPREAD
    p_md_spread: float = DEFAULT_SPREAD
    realizations: int = DEFAULT_REALIZATIONS
    seed: int = 0
    points_per_sensor: int = DEFAULT_POINTS_PER_SENSOR
    r_p: int = DEFAULT_R_P
    m_s: int = DEFAULT_M_S
    m_c: int = DEFAULT_M_C
    trials: int = DEFAULT_TRIALS
    threads: Optional[int] = None
    init_scheme: str = InitScheme.OPTIMAL_HOMOGENEOUS.value
    max_iters: Optional[int] = None
    curves: List[str] = field(default_factory=lambda: list(CURVES))
    literal_fc_md_bound: bool = False
    output: str = 'results/output.csv'

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """
        Raises:
            ConfigError: On any invalid field
        """
        if self.n_sensors < 1 or self.n_clusters < 1:
            raise ConfigError("n_sensors and n_clusters must be positive")
        if self.n_sensors % self.n_clusters:
            raise ConfigError(
                f"n_clusters={self.n_clusters} does not divide n_sensors={self.n_sensors}"
            )
        for name in ('p_com_grid', 'n_clusters_grid', 'cluster_sizes', 'comm_prob_values', 'curves'):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        if self.realizations < 1:
            raise ConfigError(f"realizations must be at least 1, got {self.realizations}")
        if self.trials < 1:
            raise ConfigError(f"trials must be at least 1, got {self.trials}")
        if any(p < 0 or p > 1 for p in self.p_com_grid + self.comm_prob_values):
            raise ConfigError("communication probabilities must lie in [0, 1]")
        if any(n < 1 for n in self.cluster_sizes + self.n_clusters_grid):
            raise ConfigError("cluster sizes and counts must be positive")
        if not 0 <= self.p_fa_spread < 1 or not 0 <= self.p_md_spread < 1:
            raise ConfigError("heterogeneity spreads must lie in [0, 1)")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be positive, got {self.threads}")
        unknown = [c for c in self.curves if c not in CURVES]
        if unknown:
            raise ConfigError(f"unknown curves {unknown}; choose from {CURVES}")
        try:
            InitScheme(self.init_scheme)
        except ValueError as e:
            raise ConfigError(f"unknown init_scheme {self.init_scheme!r}") from e
        try:
            self.sensor(self.p_com)
            SensorParams(p_fa=self.p_fa * (1 + self.p_fa_spread),
                         p_md=self.p_md * (1 + self.p_md_spread), p_com=self.p_com)
            self.base_system()
            self.gauss_seidel()
        except DomainError as e:
            raise ConfigError(str(e)) from e

    def sensor(self, p_com: float) -> SensorParams:
        return SensorParams(p_fa=self.p_fa, p_md=self.p_md, p_com=p_com)

    def base_system(self, clusters: Optional[List[ClusterSpec]] = None) -> SystemConfig:
        """Decision context around the given clusters (a single placeholder if None)."""
        if clusters is None:
            clusters = [homogeneous_cluster(1, self.sensor(self.p_com), 1, 0.0)]
        return SystemConfig(
            clusters=tuple(clusters),
            p1=self.p1,
            loss_fa=self.loss_fa,
            loss_md=self.loss_md,
            m_s=self.m_s,
            m_c=self.m_c,
            literal_fc_md_bound=self.literal_fc_md_bound,
        )

    def gauss_seidel(self, init_scheme: Optional[str] = None,
                     threads: int = 1) -> GaussSeidelConfig:
        return GaussSeidelConfig(
            r_gamma=self.points_per_sensor,
            r_p=self.r_p,
            max_iters=self.max_iters,
            m_s=self.m_s,
            m_c=self.m_c,
            init_scheme=InitScheme(init_scheme or self.init_scheme),
            threads=threads,
        )

    def homogeneous_clusters(self, n_c: int, p_com: float) -> List[ClusterSpec]:
        """
        n_c equal clusters of the base sensor under the majority rule.

        Raises:
            DivisibilityError: If n_c does not divide n_sensors
        """
        size = cluster_size_for(self.n_sensors, n_c)
        cluster = homogeneous_cluster(size, self.sensor(p_com), majority_threshold(size), 0.0)
        return [cluster] * n_c

    def heterogeneous_clusters(self, n_c: int, p_com: float, realization: int) -> List[ClusterSpec]:
        """
        One heterogeneous draw: every sensor gets p_fa and p_md uniform
        within the configured relative spread of the base values.

        Realization r draws from SeedSequence(seed, spawn_key=(r,)), so a
        realization is reproducible on its own.
        """
        size = cluster_size_for(self.n_sensors, n_c)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(realization,)))
        p_fa = rng.uniform(self.p_fa * (1 - self.p_fa_spread), self.p_fa * (1 + self.p_fa_spread),
                           self.n_sensors)
        p_md = rng.uniform(self.p_md * (1 - self.p_md_spread), self.p_md * (1 + self.p_md_spread),
                           self.n_sensors)
        clusters = []
        for j in range(n_c):
            sensors = tuple(
                SensorParams(p_fa=float(p_fa[i]), p_md=float(p_md[i]), p_com=p_com)
                for i in range(j * size, (j + 1) * size)
            )
            low, high = sensor_interval(sensors)
            clusters.append(ClusterSpec(sensors=sensors, gamma=float(0.5 * (low + high)), tie_prob=0.5))
        return clusters

    def check_divisible(self) -> None:
        """
        Raises:
            DivisibilityError: Listing every n_clusters_grid entry that does not divide n_sensors
        """
        bad = [n_c for n_c in self.n_clusters_grid if self.n_sensors % n_c != 0]
        if bad:
            raise DivisibilityError(f"{self.n_sensors} sensors cannot be split evenly into {bad} clusters")


def resolve_threads(cfg: ExperimentConfig, override: Optional[int] = None) -> int:
    """--threads, then the config, then CLOUD_CLUSTER_THREADS, then 1."""
    if override is not None:
        if override < 1:
            raise ConfigError(f"threads must be positive, got {override}")
        return override
    if cfg.threads is not None:
        return cfg.threads
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw:
        try:
            value = int(raw)
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV_VAR}={raw!r} is not an integer") from e
        if value < 1:
            raise ConfigError(f"{THREADS_ENV_VAR} must be positive, got {value}")
        return value
    return 1


def config_from_dict(data: Dict[str, Any], source: str = '<config>') -> ExperimentConfig:
    """
    Build a config from parsed JSON, rejecting unknown keys and wrong types.

    Raises:
        ConfigError: On unknown keys, wrong types or invalid values
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    known = {f.name: f for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")

    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        kwargs[key] = _coerce(key, value, source)
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from e


_INT_FIELDS = {'n_sensors', 'n_clusters', 'realizations', 'seed', 'points_per_sensor', 'r_p',
               'm_s', 'm_c', 'trials'}
_OPTIONAL_INT_FIELDS = {'threads', 'max_iters'}
_FLOAT_FIELDS = {'p1', 'loss_fa', 'loss_md', 'p_fa', 'p_md', 'p_com', 'p_fa_spread', 'p_md_spread'}
_FLOAT_LIST_FIELDS = {'p_com_grid', 'comm_prob_values'}
_INT_LIST_FIELDS = {'n_clusters_grid', 'cluster_sizes'}
_STR_FIELDS = {'init_scheme', 'output'}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(key: str, value: Any, source: str) -> Any:
    def fail(expected: str) -> ConfigError:
        return ConfigError(f"{source}: {key} must be {expected}, got {value!r}")

    if key in _INT_FIELDS:
        if not _is_int(value):
            raise fail('an integer')
        return value
    if key in _OPTIONAL_INT_FIELDS:
        if value is not None and not _is_int(value):
            raise fail('an integer or null')
        return value
    if key in _FLOAT_FIELDS:
        if not _is_number(value):
            raise fail('a number')
        return float(value)
    if key in _FLOAT_LIST_FIELDS:
        if not isinstance(value, list) or not all(_is_number(v) for v in value):
            raise fail('a list of numbers')
        return [float(v) for v in value]
    if key in _INT_LIST_FIELDS:
        if not isinstance(value, list) or not all(_is_int(v) for v in value):
            raise fail('a list of integers')
        return list(value)
    if key == 'curves':
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise fail('a list of strings')
        return list(value)
    if key == 'literal_fc_md_bound':
        if not isinstance(value, bool):
            raise fail('true or false')
        return value
    if key in _STR_FIELDS:
        if not isinstance(value, str):
            raise fail('a string')
        return value
    raise ConfigError(f"{source}: unknown key {key!r}")


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Read an ExperimentConfig from a JSON file. Missing keys take defaults.

    Raises:
        ConfigError: With path:line:col for JSON syntax errors
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    cfg = config_from_dict(data, str(path))
    logger.info(f"Loaded config from {path}")
    return cfg


def dumps_config(cfg: ExperimentConfig) -> str:
    """Canonical text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(asdict(cfg), sort_keys=True, indent=2) + '\n'


def dump_config(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_config(cfg), encoding='utf-8')
    logger.info(f"Wrote config to {path}")
    return path
