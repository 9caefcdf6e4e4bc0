"""
Threshold optimization for clustered detection systems.

- optimize_homogeneous: exhaustive grid search over the shared count
  threshold and tie probability of an equal-threshold homogeneous system
- majority_rule_loss: the majority-vote baseline, evaluated exactly
- initial_values: the four starting points for coordinate descent
- optimize_heterogeneous: Gauss-Seidel descent over per-cluster thresholds,
  exact or bound-based per cluster and at the fusion center
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.concentration import ClusterBoundModel, FcBoundModel
from src.detection_core import (
    ClusterQuality,
    ClusterSpec,
    DomainError,
    EvalReport,
    SensorParams,
    SystemConfig,
    cluster_comm_prob,
    cluster_size_for,
    count_to_threshold,
    expected_loss,
    fc_threshold,
    homogeneous_cluster,
    homogeneous_comm_prob,
    homogeneous_params,
    mean_params,
    sensor_weights,
)
from src.exact_engine import (
    MAX_ENUM_CLUSTERS,
    ClusterStatistic,
    EstimatorPolicy,
    FcPartialEnumeration,
    HomogeneousClusterSpec,
    cluster_errors_homogeneous,
    evaluate_system,
    fc_errors,
    homogeneous_spec,
    report_from_qualities,
    system_qualities,
)

logger = logging.getLogger(__name__)

DEFAULT_R_P = 100
DEFAULT_POINTS_PER_SENSOR = 50
DEFAULT_DELTA_P_TOL = 1e-6
# Relative to each cluster's threshold interval
DEFAULT_DELTA_GAMMA_RTOL = 1e-6


class InitScheme(str, Enum):
    OPTIMAL_HOMOGENEOUS = 'optimal-homogeneous'
    MIDPOINT = 'midpoint'
    ALL_H1 = 'all-H1'
    ALL_H0 = 'all-H0'


@dataclass(frozen=True)
class HomogeneousSolution:
    """Best equal-threshold rule found on the (count, tie probability) grid."""

    gamma_c: int
    tie_prob: float
    loss: float
    report: EvalReport
    gamma: float
    grid: Optional[pd.DataFrame] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class GaussSeidelConfig:
    """
    Settings for coordinate descent.

    Args:
        r_gamma: Threshold grid points per sensor of the cluster
        r_p: Tie-probability grid resolution (r_p + 1 points)
        delta_gamma_tol: Absolute threshold tolerance; None scales 1e-6 by
            each cluster's interval width
        delta_p_tol: Tie-probability tolerance
        max_iters: Coordinate updates allowed; None means 50 per cluster
        m_s: Largest cluster handled exactly
        m_c: Largest cluster count handled exactly at the fusion center
        init_scheme: Starting point
        threads: Workers for candidate evaluation in bound-based searches
    """

    r_gamma: int = DEFAULT_POINTS_PER_SENSOR
    r_p: int = DEFAULT_R_P
    delta_gamma_tol: Optional[float] = None
    delta_p_tol: float = DEFAULT_DELTA_P_TOL
    max_iters: Optional[int] = None
    m_s: int = 20
    m_c: int = 10
    init_scheme: InitScheme = InitScheme.OPTIMAL_HOMOGENEOUS
    threads: int = 1

    def __post_init__(self):
        if self.r_gamma < 1 or self.r_p < 1:
            raise DomainError("grid resolutions must be positive")
        if self.delta_gamma_tol is not None and not self.delta_gamma_tol > 0:
            raise DomainError("delta_gamma_tol must be positive")
        if not self.delta_p_tol > 0:
            raise DomainError("delta_p_tol must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise DomainError("max_iters must be positive")
        if self.m_s < 1 or self.m_c < 1 or self.threads < 1:
            raise DomainError("m_s, m_c and threads must be positive")
        object.__setattr__(self, 'init_scheme', InitScheme(self.init_scheme))


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    cluster: int
    branch: str
    loss: float
    gamma: float
    tie_prob: float


@dataclass(frozen=True)
class HeterogeneousSolution:
    """Result of coordinate descent; surrogate_loss may be bound-based."""

    gammas: Tuple[float, ...]
    tie_probs: Tuple[float, ...]
    surrogate_loss: float
    iterations: int
    converged: bool
    trace: Tuple[TraceEntry, ...]
    clusters: Tuple[ClusterSpec, ...] = field(default=(), repr=False)
    p_fa: float = float('nan')
    p_md: float = float('nan')
    used_cluster_bound: bool = False
    used_fc_bound: bool = False

    @property
    def losses(self) -> List[float]:
        return [entry.loss for entry in self.trace]

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame([entry.__dict__ for entry in self.trace])


def _tie_grid(r_p: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, r_p + 1)


def homogeneous_loss_grid(n: int, n_c: int, s: SensorParams, config: SystemConfig,
                          r_p: int = DEFAULT_R_P,
                          policy: EstimatorPolicy = EstimatorPolicy.AUTO) -> pd.DataFrame:
    """
    Loss at every (count threshold, tie probability) grid point.

    When the cluster stage runs on bounds the tie probability is pinned to 1.

    Raises:
        DivisibilityError: If n_c does not divide n
    """
    size = cluster_size_for(n, n_c)
    w = sensor_weights(s)
    p_com_c = homogeneous_comm_prob(size, s.p_com)
    cluster_bound = policy == EstimatorPolicy.BOUND or (
        policy == EstimatorPolicy.AUTO and size > config.m_s)
    fc_bound = policy == EstimatorPolicy.BOUND or (
        policy == EstimatorPolicy.AUTO and n_c > config.m_c)
    gamma_fc = fc_threshold(config)
    tie_grid = np.array([1.0]) if cluster_bound else _tie_grid(r_p)
    if cluster_bound:
        bound_model = ClusterBoundModel.from_cluster(homogeneous_cluster(size, s, 0, 1.0))
        fa_all, md_all = bound_model.bounds_many(
            np.array([count_to_threshold(k, size, w) for k in range(size + 1)]))

    rows = []
    for gamma_c in range(size + 1):
        gamma = count_to_threshold(gamma_c, size, w)
        if cluster_bound:
            pairs = [(float(fa_all[gamma_c]), float(md_all[gamma_c]))]
        else:
            lo = cluster_errors_homogeneous(HomogeneousClusterSpec(size, s.p_fa, s.p_md, gamma_c, 0.0))
            hi = cluster_errors_homogeneous(HomogeneousClusterSpec(size, s.p_fa, s.p_md, gamma_c, 1.0))
            # both errors are affine in the tie probability
            pairs = [
                (lo.p_fa + p * (hi.p_fa - lo.p_fa), lo.p_md + p * (hi.p_md - lo.p_md))
                for p in tie_grid
            ]
        for p, (p_fa_c, p_md_c) in zip(tie_grid, pairs):
            quality = ClusterQuality(
                p_fa_c=min(1.0, max(0.0, p_fa_c)), p_md_c=min(1.0, max(0.0, p_md_c)),
                p_com_c=p_com_c, is_bound=cluster_bound,
            )
            pair = fc_errors([quality] * n_c, gamma_fc, use_bound=fc_bound, strict=False,
                             literal_md=config.literal_fc_md_bound)
            rows.append({
                'gamma_c': gamma_c,
                'tie_prob': float(p),
                'gamma': gamma,
                'p_fa_c': quality.p_fa_c,
                'p_md_c': quality.p_md_c,
                'p_fa': pair.p_fa,
                'p_md': pair.p_md,
                'loss': expected_loss(pair.p_fa, pair.p_md, config),
                'used_cluster_bound': cluster_bound,
                'used_fc_bound': fc_bound,
            })
    return pd.DataFrame(rows)


def optimize_homogeneous(n: int, n_c: int, s: SensorParams, config: SystemConfig,
                         r_p: int = DEFAULT_R_P,
                         policy: EstimatorPolicy = EstimatorPolicy.AUTO,
                         keep_grid: bool = False) -> HomogeneousSolution:
    """
    Exhaustive search for the best equal count threshold and tie probability.

    n sensors with parameters s are split into n_c equal clusters; only the
    prior and losses of config are used. Ties in loss go to the smaller count
    threshold, then the smaller tie probability.

    Raises:
        DivisibilityError: If n_c does not divide n
    """
    grid = homogeneous_loss_grid(n, n_c, s, config, r_p, policy)
    best = grid.sort_values(['loss', 'gamma_c', 'tie_prob'], kind='mergesort').iloc[0]
    report = EvalReport(
        p_fa=float(best['p_fa']),
        p_md=float(best['p_md']),
        expected_loss=float(best['loss']),
        used_cluster_bound=bool(best['used_cluster_bound']),
        used_fc_bound=bool(best['used_fc_bound']),
    )
    logger.debug("homogeneous optimum for N=%d, N_c=%d: gamma_c=%d, p=%.3f, loss=%.6g",
                 n, n_c, int(best['gamma_c']), float(best['tie_prob']), report.expected_loss)
    return HomogeneousSolution(
        gamma_c=int(best['gamma_c']),
        tie_prob=float(best['tie_prob']),
        loss=report.expected_loss,
        report=report,
        gamma=float(best['gamma']),
        grid=grid if keep_grid else None,
    )


def majority_threshold(size: int) -> int:
    return size // 2 + 1


def majority_rule_loss(n: int, n_c: int, s: SensorParams, config: SystemConfig) -> EvalReport:
    """
    Exact loss when every cluster decides H1 on a strict majority of ones.

    The count threshold is floor(size/2) + 1 with ties resolved to H1, so
    a count equal to the threshold already decides H1.
    """
    size = cluster_size_for(n, n_c)
    gamma_c = majority_threshold(size)
    cluster = homogeneous_cluster(size, s, gamma_c, tie_prob=0.0)
    return evaluate_system(config.with_clusters([cluster] * n_c), EstimatorPolicy.EXACT)


def initial_values(clusters: Sequence[ClusterSpec], scheme: InitScheme, config: SystemConfig,
                   r_p: int = DEFAULT_R_P) -> Tuple[List[float], List[float]]:
    """
    Starting thresholds and tie probabilities.

    optimal-homogeneous solves the equal-threshold problem for N_c copies of
    each cluster, with its sensors replaced by their mean parameters, and
    clips the result into the cluster's own interval. midpoint starts in the
    middle of every interval, all-H1 at the bottom (every cluster reports
    one) and all-H0 at the top (every cluster reports zero).
    """
    scheme = InitScheme(scheme)
    n_c = len(clusters)
    gammas: List[float] = []
    ties: List[float] = []
    solved: Dict[Tuple[int, SensorParams], HomogeneousSolution] = {}
    for cluster in clusters:
        low, high = cluster.interval
        if scheme == InitScheme.MIDPOINT:
            gammas.append(0.5 * (low + high))
            ties.append(0.5)
        elif scheme == InitScheme.ALL_H1:
            gammas.append(low)
            ties.append(0.0)
        elif scheme == InitScheme.ALL_H0:
            gammas.append(high)
            ties.append(1.0)
        else:
            s = homogeneous_params(cluster) or mean_params(cluster)
            key = (cluster.size, s)
            if key not in solved:
                solved[key] = optimize_homogeneous(cluster.size * n_c, n_c, s, config, r_p)
            sol = solved[key]
            gamma = count_to_threshold(sol.gamma_c, cluster.size, sensor_weights(s))
            gammas.append(min(high, max(low, gamma)))
            ties.append(sol.tie_prob)
    return gammas, ties


class _ClusterLine:
    """Cluster errors along a threshold grid, exact or bound-based."""

    def __init__(self, cluster: ClusterSpec, use_bound: bool):
        self.cluster = cluster
        self.use_bound = use_bound
        self.p_com_c = cluster_comm_prob(cluster)
        self._bound = ClusterBoundModel.from_cluster(cluster) if use_bound else None
        self._stat = None
        self._homogeneous = None
        if not use_bound:
            spec = homogeneous_spec(cluster)
            if spec is not None:
                self._homogeneous = spec
            else:
                self._stat = ClusterStatistic.from_cluster(cluster)

    def masses(self, gammas: np.ndarray) -> Tuple[np.ndarray, ...]:
        """Exact (above_h0, tied_h0, below_h1, tied_h1) at each threshold."""
        if self._stat is not None:
            return self._stat.masses_many(gammas)
        out = np.zeros((4, len(gammas)))
        w1, w0 = self.cluster.weights
        n = self.cluster.size
        for i, gamma in enumerate(gammas):
            gamma_c = min(float(n), max(0.0, (gamma + n * w0[0]) / (w1[0] + w0[0])))
            spec = replace(self._homogeneous, gamma_c=gamma_c)
            at_h0 = cluster_errors_homogeneous(replace(spec, tie_prob=0.0))
            at_h1 = cluster_errors_homogeneous(replace(spec, tie_prob=1.0))
            out[:, i] = (at_h1.p_fa, at_h0.p_fa - at_h1.p_fa, at_h0.p_md, at_h1.p_md - at_h0.p_md)
        return tuple(out)

    def candidates(self, gammas: np.ndarray, ties: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Cluster error arrays for every (gamma, tie) pair, gamma-major."""
        if self.use_bound:
            p_fa, p_md = self._bound.bounds_many(gammas)
            return np.repeat(p_fa, len(ties)), np.repeat(p_md, len(ties))
        above_h0, tied_h0, below_h1, tied_h1 = self.masses(gammas)
        p_fa = above_h0[:, None] + (1.0 - ties)[None, :] * tied_h0[:, None]
        p_md = below_h1[:, None] + ties[None, :] * tied_h1[:, None]
        return np.clip(p_fa.ravel(), 0.0, 1.0), np.clip(p_md.ravel(), 0.0, 1.0)


def _branch_name(cluster_bound: bool, fc_bound: bool) -> str:
    if cluster_bound and fc_bound:
        return 'bound'
    if cluster_bound:
        return 'cluster-bound'
    if fc_bound:
        return 'fc-bound'
    return 'exact'


def _fc_evaluator(others: Sequence[ClusterQuality], gamma: float, fc_bound: bool,
                  config: SystemConfig) -> Callable[..., Tuple[np.ndarray, np.ndarray]]:
    if fc_bound:
        return FcBoundModel(others, gamma, strict=False, literal=config.literal_fc_md_bound).errors_many
    return FcPartialEnumeration(others, gamma, cap=MAX_ENUM_CLUSTERS, strict=False).errors_many


def _chunked(func, p_fa: np.ndarray, p_md: np.ndarray, p_com: float,
             threads: int) -> Tuple[np.ndarray, np.ndarray]:
    """Apply func over candidate chunks on a pool, preserving order."""
    if threads <= 1 or p_fa.size < 2 * threads:
        return func(p_fa, p_md, p_com)
    bounds = np.linspace(0, p_fa.size, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(
            lambda ab: func(p_fa[ab[0]:ab[1]], p_md[ab[0]:ab[1]], p_com),
            zip(bounds[:-1], bounds[1:]),
        ))
    return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])


def optimize_heterogeneous(clusters: Sequence[ClusterSpec], config: SystemConfig,
                           gs: Optional[GaussSeidelConfig] = None) -> HeterogeneousSolution:
    """
    Gauss-Seidel descent over per-cluster thresholds.

    Clusters are visited cyclically. Each visit scans the cluster's threshold
    grid (and tie grid when the cluster is evaluated exactly) with every
    other cluster fixed, and moves only on a strict improvement over the
    incumbent. Bound-based clusters keep tie probability 1. Stops when no
    cluster has moved beyond tolerance since its last visit, or after
    max_iters updates.
    """
    gs = gs or GaussSeidelConfig()
    clusters = list(clusters)
    n_c = len(clusters)
    work = replace(config, clusters=tuple(clusters), m_s=gs.m_s, m_c=gs.m_c)
    gamma_fc = fc_threshold(work)
    max_iters = gs.max_iters or 50 * n_c

    gammas, ties = initial_values(clusters, gs.init_scheme, work, gs.r_p)
    cluster_bound = [c.size > gs.m_s for c in clusters]
    fc_bound = n_c > gs.m_c
    ties = [1.0 if cb else p for cb, p in zip(cluster_bound, ties)]
    current = [c.with_rule(g, p) for c, g, p in zip(clusters, gammas, ties)]

    policy = EstimatorPolicy.AUTO
    qualities = system_qualities(work.with_clusters(current), policy)
    start = report_from_qualities(qualities, work, policy)
    loss, fc_pair = start.expected_loss, (start.p_fa, start.p_md)
    lines = [_ClusterLine(c, cb) for c, cb in zip(current, cluster_bound)]
    tie_grid = _tie_grid(gs.r_p)
    tol_gamma = [
        gs.delta_gamma_tol if gs.delta_gamma_tol is not None
        else DEFAULT_DELTA_GAMMA_RTOL * max(1e-12, c.ell_max - c.ell_min)
        for c in clusters
    ]

    delta_gamma = [np.inf] * n_c
    delta_p = [np.inf] * n_c
    trace = [TraceEntry(0, -1, _branch_name(any(cluster_bound), fc_bound), loss, np.nan, np.nan)]
    t = 0
    j = 0

    def settled() -> bool:
        return all(d <= tol for d, tol in zip(delta_gamma, tol_gamma)) and \
            all(d <= gs.delta_p_tol for d in delta_p)

    while t < max_iters and not settled():
        cluster = current[j]
        low, high = cluster.interval
        steps = gs.r_gamma * cluster.size
        grid = low + (high - low) * np.arange(steps + 1) / steps
        p_grid = np.array([1.0]) if cluster_bound[j] else tie_grid

        # incumbent goes last so an equal-loss grid point never displaces it
        cand_fa, cand_md = lines[j].candidates(grid, p_grid)
        inc_fa, inc_md = lines[j].candidates(np.array([cluster.gamma]), np.array([cluster.tie_prob]))
        all_fa = np.concatenate((cand_fa, inc_fa))
        all_md = np.concatenate((cand_md, inc_md))

        evaluator = _fc_evaluator(qualities[:j] + qualities[j + 1:], gamma_fc, fc_bound, work)
        fc_fa, fc_md = _chunked(evaluator, all_fa, all_md, lines[j].p_com_c, gs.threads)
        losses = work.p0 * fc_fa * work.loss_fa + work.p1 * fc_md * work.loss_md

        best = int(np.argmin(losses[:-1]))
        if losses[best] < losses[-1]:
            new_gamma = float(grid[best // len(p_grid)])
            new_tie = float(p_grid[best % len(p_grid)])
            chosen = best
        else:
            new_gamma, new_tie = cluster.gamma, cluster.tie_prob
            chosen = len(losses) - 1

        delta_gamma[j] = abs(new_gamma - cluster.gamma)
        delta_p[j] = abs(new_tie - cluster.tie_prob)
        current[j] = cluster.with_rule(new_gamma, new_tie)
        qualities[j] = ClusterQuality(
            p_fa_c=float(all_fa[chosen]), p_md_c=float(all_md[chosen]),
            p_com_c=lines[j].p_com_c, is_bound=cluster_bound[j],
        )
        loss = float(losses[chosen])
        fc_pair = (float(fc_fa[chosen]), float(fc_md[chosen]))
        t += 1
        trace.append(TraceEntry(t, j, _branch_name(cluster_bound[j], fc_bound), loss,
                                new_gamma, new_tie))
        logger.debug("update %d: cluster %d -> gamma=%.6g p=%.3f loss=%.6g",
                     t, j, new_gamma, new_tie, loss)
        j = (j + 1) % n_c

    converged = settled()
    if converged:
        logger.info("Gauss-Seidel converged after %d updates, loss=%.6g", t, loss)
    else:
        logger.warning("Gauss-Seidel stopped at the %d-update cap without converging", max_iters)
    return HeterogeneousSolution(
        gammas=tuple(c.gamma for c in current),
        tie_probs=tuple(c.tie_prob for c in current),
        surrogate_loss=loss,
        iterations=t,
        converged=converged,
        trace=tuple(trace),
        clusters=tuple(current),
        p_fa=fc_pair[0],
        p_md=fc_pair[1],
        used_cluster_bound=any(cluster_bound),
        used_fc_bound=fc_bound,
    )
