"""
Experiment orchestration behind the CLI subcommands.

Each function turns an ExperimentConfig into a plot-ready DataFrame:
- comm_prob_table: cluster communication probability against cluster size
- sweep_pcom / sweep_nc: the five loss curves against p_com or N_c
- optimize_report: exact vs bound-optimized thresholds and per-scheme
  Gauss-Seidel terminal losses
- simulate: Monte Carlo run of the optimized homogeneous system next to
  its exact values
- sweep_init: initialization-scheme comparison over the p_com grid

Independent jobs (sweep points, realizations) fan out over a thread pool;
results are merged in submission order, so output does not depend on the
worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Sequence, TypeVar

import numpy as np
import pandas as pd

from src.detection_core import (
    EvalReport,
    expected_communicating_clusters,
    homogeneous_comm_prob,
    homogeneous_system,
)
from src.exact_engine import EstimatorPolicy, cluster_quality, evaluate_system
from src.experiment_config import ExperimentConfig
from src.optimizers import (
    HeterogeneousSolution,
    InitScheme,
    majority_rule_loss,
    optimize_heterogeneous,
    optimize_homogeneous,
)
from src.simulator import monte_carlo

logger = logging.getLogger(__name__)

CSV_COLUMNS = ['sweep_value', 'curve_name', 'loss', 'p_fa', 'p_md',
               'used_cluster_bound', 'used_fc_bound', 'seed']
SIMULATE_COLUMNS = ['quantity', 'estimate', 'std_error', 'exact',
                    'used_cluster_bound', 'used_fc_bound', 'trials', 'seed']

T = TypeVar('T')
R = TypeVar('R')


def map_ordered(func: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """map() over a thread pool, results in input order."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def comm_prob_table(cfg: ExperimentConfig) -> pd.DataFrame:
    """p_com,C = 1 - (1 - p)^n for every configured (n, p)."""
    rows = [
        {'n': n, 'p_com_s': p, 'p_com_c': homogeneous_comm_prob(n, p)}
        for p in cfg.comm_prob_values
        for n in cfg.cluster_sizes
    ]
    return pd.DataFrame(rows, columns=['n', 'p_com_s', 'p_com_c'])


def _row(sweep_value: float, curve: str, report: EvalReport, seed: int) -> Dict[str, object]:
    return {
        'sweep_value': sweep_value,
        'curve_name': curve,
        'loss': report.expected_loss,
        'p_fa': report.p_fa,
        'p_md': report.p_md,
        'used_cluster_bound': report.used_cluster_bound,
        'used_fc_bound': report.used_fc_bound,
        'seed': seed,
    }


def solution_report(sol: HeterogeneousSolution) -> EvalReport:
    return EvalReport(
        p_fa=sol.p_fa,
        p_md=sol.p_md,
        expected_loss=sol.surrogate_loss,
        used_cluster_bound=sol.used_cluster_bound,
        used_fc_bound=sol.used_fc_bound,
    )


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean loss and error rates; a flag is set if any report set it."""
    return EvalReport(
        p_fa=float(np.mean([r.p_fa for r in reports])),
        p_md=float(np.mean([r.p_md for r in reports])),
        expected_loss=float(np.mean([r.expected_loss for r in reports])),
        used_cluster_bound=any(r.used_cluster_bound for r in reports),
        used_fc_bound=any(r.used_fc_bound for r in reports),
    )


def heterogeneous_runs(cfg: ExperimentConfig, n_c: int, p_com: float,
                       init_scheme: str, threads: int = 1) -> List[HeterogeneousSolution]:
    """Gauss-Seidel on every configured heterogeneous realization."""
    system = cfg.base_system()
    gs = cfg.gauss_seidel(init_scheme)

    def run(realization: int) -> HeterogeneousSolution:
        clusters = cfg.heterogeneous_clusters(n_c, p_com, realization)
        return optimize_heterogeneous(clusters, system, gs)

    return map_ordered(run, range(cfg.realizations), threads)


def sweep_point(cfg: ExperimentConfig, n_c: int, p_com: float, sweep_value: float,
                threads: int = 1) -> List[Dict[str, object]]:
    """
    Rows of every configured curve at one (N_c, p_com) point.

    Curves:
        exact: thresholds optimized and evaluated exactly
        majority: majority rule in every cluster, evaluated exactly
        approx_thresholds: bound-optimized thresholds, evaluated exactly
        approx_homogeneous: bound surrogate at the bound-optimized thresholds
        approx_heterogeneous: Gauss-Seidel surrogate, averaged over realizations
    """
    curves = set(cfg.curves)
    s = cfg.sensor(p_com)
    system = cfg.base_system()
    n = cfg.n_sensors
    rows = []

    if 'exact' in curves:
        sol = optimize_homogeneous(n, n_c, s, system, cfg.r_p, EstimatorPolicy.EXACT)
        rows.append(_row(sweep_value, 'exact', sol.report, cfg.seed))
    if 'majority' in curves:
        rows.append(_row(sweep_value, 'majority', majority_rule_loss(n, n_c, s, system), cfg.seed))
    if curves & {'approx_thresholds', 'approx_homogeneous'}:
        approx = optimize_homogeneous(n, n_c, s, system, cfg.r_p, EstimatorPolicy.AUTO)
        if 'approx_thresholds' in curves:
            deployed = homogeneous_system(n, n_c, s, system, approx.gamma_c, approx.tie_prob)
            report = evaluate_system(deployed, EstimatorPolicy.EXACT)
            rows.append(_row(sweep_value, 'approx_thresholds', report, cfg.seed))
        if 'approx_homogeneous' in curves:
            rows.append(_row(sweep_value, 'approx_homogeneous', approx.report, cfg.seed))
    if 'approx_heterogeneous' in curves:
        sols = heterogeneous_runs(cfg, n_c, p_com, cfg.init_scheme, threads)
        report = average_reports([solution_report(sol) for sol in sols])
        rows.append(_row(sweep_value, 'approx_heterogeneous', report, cfg.seed))

    logger.info("sweep point N_c=%d p_com=%.3f: %s", n_c, p_com,
                ", ".join(f"{r['curve_name']}={r['loss']:.4g}" for r in rows))
    return rows


def sweep_pcom(cfg: ExperimentConfig, threads: int = 1) -> pd.DataFrame:
    """Loss curves against the sensor communication probability at N_c = n_clusters."""
    logger.info(f"Sweeping p_com over {len(cfg.p_com_grid)} points with N_c={cfg.n_clusters}")
    rows: List[Dict[str, object]] = []
    for p_com in cfg.p_com_grid:
        rows.extend(sweep_point(cfg, cfg.n_clusters, p_com, p_com, threads))
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def sweep_nc(cfg: ExperimentConfig, threads: int = 1) -> pd.DataFrame:
    """
    Loss curves against the number of equal clusters at p_com = cfg.p_com.

    Raises:
        DivisibilityError: Listing every N_c that does not divide n_sensors
    """
    cfg.check_divisible()
    logger.info(f"Sweeping N_c over {cfg.n_clusters_grid} with p_com={cfg.p_com}")
    rows: List[Dict[str, object]] = []
    for n_c in cfg.n_clusters_grid:
        rows.extend(sweep_point(cfg, n_c, cfg.p_com, n_c, threads))
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def sweep_init(cfg: ExperimentConfig, threads: int = 1) -> pd.DataFrame:
    """Mean terminal surrogate loss of each initialization scheme over the p_com grid."""
    rows: List[Dict[str, object]] = []
    for p_com in cfg.p_com_grid:
        for scheme in InitScheme:
            sols = heterogeneous_runs(cfg, cfg.n_clusters, p_com, scheme.value, threads)
            report = average_reports([solution_report(sol) for sol in sols])
            rows.append(_row(p_com, f'init:{scheme.value}', report, cfg.seed))
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


@dataclass(frozen=True)
class OptimizeReport:
    text: str
    frame: pd.DataFrame
    exact_loss: float
    approx_loss: float

    @property
    def relative_gap(self) -> float:
        """Excess exact loss of the bound-optimized thresholds, relative."""
        return (self.approx_loss - self.exact_loss) / self.exact_loss


def optimize_report(cfg: ExperimentConfig, threads: int = 1) -> OptimizeReport:
    """
    Homogeneous exact vs bound-optimized thresholds at (n_clusters, p_com),
    then every initialization scheme on every heterogeneous realization.
    """
    n, n_c = cfg.n_sensors, cfg.n_clusters
    s = cfg.sensor(cfg.p_com)
    system = cfg.base_system()

    exact = optimize_homogeneous(n, n_c, s, system, cfg.r_p, EstimatorPolicy.EXACT)
    approx = optimize_homogeneous(n, n_c, s, system, cfg.r_p, EstimatorPolicy.AUTO)
    approx_exact = evaluate_system(
        homogeneous_system(n, n_c, s, system, approx.gamma_c, approx.tie_prob),
        EstimatorPolicy.EXACT,
    )

    rows = []
    for scheme in InitScheme:
        sols = heterogeneous_runs(cfg, n_c, cfg.p_com, scheme.value, threads)
        for realization, sol in enumerate(sols):
            rows.append({
                'realization': realization,
                'init_scheme': scheme.value,
                'surrogate_loss': sol.surrogate_loss,
                'p_fa': sol.p_fa,
                'p_md': sol.p_md,
                'iterations': sol.iterations,
                'converged': sol.converged,
                'used_cluster_bound': sol.used_cluster_bound,
                'used_fc_bound': sol.used_fc_bound,
                'seed': cfg.seed,
            })
    frame = pd.DataFrame(rows)

    gap = (approx_exact.expected_loss - exact.loss) / exact.loss
    lines = [
        f"N={n} sensors in {n_c} clusters, p_fa={cfg.p_fa}, p_md={cfg.p_md}, p_com={cfg.p_com}",
        f"exact optimum: gamma_c={exact.gamma_c}, tie_prob={exact.tie_prob:.2f}, loss={exact.loss:.6g}",
        f"bound-optimized: gamma_c={approx.gamma_c}, tie_prob={approx.tie_prob:.2f}, "
        f"surrogate={approx.loss:.6g}, exact={approx_exact.expected_loss:.6g}",
        f"relative gap: {gap:.4%}",
        f"heterogeneous terminal surrogate loss over {cfg.realizations} realization(s):",
    ]
    means = frame.groupby('init_scheme', sort=False)['surrogate_loss'].mean()
    for scheme, value in means.items():
        lines.append(f"  {scheme:<20} {value:.6g}")
    return OptimizeReport(text='\n'.join(lines) + '\n', frame=frame,
                          exact_loss=exact.loss, approx_loss=approx_exact.expected_loss)


def simulate(cfg: ExperimentConfig, trials: int, seed: int, threads: int = 1) -> pd.DataFrame:
    """
    Monte Carlo estimates for the exactly optimized homogeneous system at
    (n_clusters, p_com), with the exact value of each quantity alongside.
    """
    n, n_c = cfg.n_sensors, cfg.n_clusters
    s = cfg.sensor(cfg.p_com)
    system = cfg.base_system()
    sol = optimize_homogeneous(n, n_c, s, system, cfg.r_p, EstimatorPolicy.EXACT)
    deployed = homogeneous_system(n, n_c, s, system, sol.gamma_c, sol.tie_prob)

    exact = evaluate_system(deployed, EstimatorPolicy.EXACT)
    quality = cluster_quality(deployed.clusters[0], EstimatorPolicy.EXACT)
    exact_values = {
        'loss': exact.expected_loss,
        'p_fa': exact.p_fa,
        'p_md': exact.p_md,
        'communicating': expected_communicating_clusters(deployed.clusters),
    }
    for j in range(n_c):
        exact_values[f'cluster_{j}_p_fa'] = quality.p_fa_c
        exact_values[f'cluster_{j}_p_md'] = quality.p_md_c

    mc = monte_carlo(deployed, trials, seed, EstimatorPolicy.EXACT, threads)
    frame = mc.frame()
    frame['exact'] = frame['quantity'].map(exact_values)
    logger.info("simulated loss %.6g +/- %.2g (exact %.6g)",
                mc.loss.mean, mc.loss.std_error, exact.expected_loss)
    return frame[SIMULATE_COLUMNS]
