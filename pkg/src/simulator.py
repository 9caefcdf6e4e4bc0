"""
Monte Carlo simulation of the sensor -> cluster -> fusion center pipeline.

Each trial draws the hypothesis, every sensor's measured bit and link state,
runs each cluster's weighted-sum test (with randomized ties), and applies the
fusion center rule with the cluster weights the analytic evaluation uses.

Trials run in fixed-size blocks. Block b draws from its own generator seeded
by SeedSequence(seed, spawn_key=(b,)), so results do not depend on how many
workers process the blocks.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.detection_core import (
    TIE_RTOL,
    DomainError,
    SystemConfig,
    cluster_weight_arrays,
    compare_to_threshold,
    fc_threshold,
    tie_scale,
)
from src.exact_engine import EstimatorPolicy, system_qualities, uses_fc_bound

logger = logging.getLogger(__name__)

BLOCK_SIZE = 8192


@dataclass(frozen=True)
class TrialOutcome:
    truth: int
    fc_decision: int
    num_communicating: int
    loss: float


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    trials: int
    seed: int


@dataclass(frozen=True)
class MonteCarloReport:
    """Empirical loss and error rates with their standard errors."""

    loss: McEstimate
    p_fa: McEstimate
    p_md: McEstimate
    communicating: McEstimate
    cluster_p_fa: Tuple[float, ...]
    cluster_p_md: Tuple[float, ...]
    trials_h0: int
    trials_h1: int
    used_cluster_bound: bool
    used_fc_bound: bool

    def frame(self) -> pd.DataFrame:
        flags = {'used_cluster_bound': self.used_cluster_bound, 'used_fc_bound': self.used_fc_bound}
        rows = [
            {'quantity': name, 'estimate': est.mean, 'std_error': est.std_error,
             'trials': est.trials, 'seed': est.seed, **flags}
            for name, est in (('loss', self.loss), ('p_fa', self.p_fa), ('p_md', self.p_md),
                              ('communicating', self.communicating))
        ]
        for j, (fa, md) in enumerate(zip(self.cluster_p_fa, self.cluster_p_md)):
            rows.append({'quantity': f'cluster_{j}_p_fa', 'estimate': fa, 'std_error': np.nan,
                         'trials': self.trials_h0, 'seed': self.loss.seed, **flags})
            rows.append({'quantity': f'cluster_{j}_p_md', 'estimate': md, 'std_error': np.nan,
                         'trials': self.trials_h1, 'seed': self.loss.seed, **flags})
        return pd.DataFrame(rows)


class SimulationPlan:
    """Flattened sensor arrays and deployed cluster / FC rules of a system."""

    def __init__(self, config: SystemConfig, policy: EstimatorPolicy = EstimatorPolicy.AUTO):
        self.config = config
        sensors = [s for c in config.clusters for s in c.sensors]
        sizes = np.array([c.size for c in config.clusters])
        self.starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        self.p_fa = np.array([s.p_fa for s in sensors])
        self.p_md = np.array([s.p_md for s in sensors])
        self.p_com = np.array([s.p_com for s in sensors])
        self.w1 = np.log((1.0 - self.p_md) / self.p_fa)
        self.w0 = np.log((1.0 - self.p_fa) / self.p_md)
        self.gammas = np.array([c.gamma for c in config.clusters])
        self.tie_probs = np.array([c.tie_prob for c in config.clusters])
        self.cluster_tol = np.array([tie_scale(*c.interval) for c in config.clusters])

        qualities = system_qualities(config, policy)
        self.used_cluster_bound = any(q.is_bound for q in qualities)
        self.used_fc_bound = uses_fc_bound(len(qualities), policy, config.m_c)
        self.fc_w1, self.fc_w0 = cluster_weight_arrays(
            np.array([q.p_fa_c for q in qualities]),
            np.array([q.p_md_c for q in qualities]),
            strict=False,
        )
        self.fc_gamma = fc_threshold(config)
        self.fc_tol = TIE_RTOL * max(1.0, float(np.sum(np.abs(self.fc_w1) + np.abs(self.fc_w0))))

    @property
    def n_sensors(self) -> int:
        return self.p_fa.size

    @property
    def n_clusters(self) -> int:
        return self.gammas.size

    def simulate(self, rng: np.random.Generator, size: int) -> Dict[str, np.ndarray]:
        """
        Run size trials. Draw order: hypotheses, measurement uniforms,
        link uniforms, then one tie uniform per cluster per trial.
        """
        truth = rng.random(size) < self.config.p1
        u_meas = rng.random((size, self.n_sensors))
        u_link = rng.random((size, self.n_sensors))
        u_tie = rng.random((size, self.n_clusters))

        ones = np.where(truth[:, None], u_meas < 1.0 - self.p_md, u_meas < self.p_fa)
        contrib = np.where(ones, self.w1, -self.w0)
        stat = np.add.reduceat(contrib, self.starts, axis=1)
        side = compare_to_threshold(stat, self.gammas, self.cluster_tol)
        # on a tie the cluster decides H0 with probability tie_prob
        z = (side > 0) | ((side == 0) & (u_tie >= self.tie_probs))

        linked = np.logical_or.reduceat(u_link < self.p_com, self.starts, axis=1)
        fc_stat = np.sum(np.where(linked, np.where(z, self.fc_w1, -self.fc_w0), 0.0), axis=1)
        decision = fc_stat >= self.fc_gamma - self.fc_tol
        return {'truth': truth, 'decision': decision, 'z': z, 'linked': linked}


def run_trial(config: SystemConfig, rng: np.random.Generator,
              policy: EstimatorPolicy = EstimatorPolicy.AUTO,
              plan: Optional[SimulationPlan] = None) -> TrialOutcome:
    """One sampled pass through the full decision pipeline."""
    plan = plan or SimulationPlan(config, policy)
    out = plan.simulate(rng, 1)
    truth = int(out['truth'][0])
    decision = int(out['decision'][0])
    if truth == 0 and decision == 1:
        loss = config.loss_fa
    elif truth == 1 and decision == 0:
        loss = config.loss_md
    else:
        loss = 0.0
    return TrialOutcome(truth=truth, fc_decision=decision,
                        num_communicating=int(np.sum(out['linked'][0])), loss=loss)


def _block_counts(plan: SimulationPlan, seed: int, block: int, size: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))
    out = plan.simulate(rng, size)
    truth, decision = out['truth'], out['decision']
    h0 = ~truth
    n_linked = np.sum(out['linked'], axis=1)
    return {
        'trials': np.int64(size),
        'h1': np.int64(np.sum(truth)),
        'fa': np.int64(np.sum(h0 & decision)),
        'md': np.int64(np.sum(truth & ~decision)),
        'linked': np.int64(np.sum(n_linked)),
        'linked_sq': np.int64(np.sum(n_linked ** 2)),
        'cluster_fa': np.sum(out['z'] & h0[:, None], axis=0).astype(np.int64),
        'cluster_md': np.sum(~out['z'] & truth[:, None], axis=0).astype(np.int64),
    }


def _proportion(hits: int, total: int, seed: int) -> McEstimate:
    if total == 0:
        return McEstimate(mean=math.nan, std_error=math.nan, trials=0, seed=seed)
    p = hits / total
    se = math.sqrt(p * (1.0 - p) / total) if total > 1 else 0.0
    return McEstimate(mean=p, std_error=se, trials=total, seed=seed)


def monte_carlo(config: SystemConfig, trials: int, seed: int,
                policy: EstimatorPolicy = EstimatorPolicy.AUTO,
                threads: int = 1) -> MonteCarloReport:
    """
    Estimate the expected loss, FC error rates, communicating-cluster count
    and per-cluster error rates from independent trials.

    Raises:
        DomainError: If trials < 1
    """
    if trials < 1:
        raise DomainError(f"trials must be at least 1, got {trials}")
    plan = SimulationPlan(config, policy)
    n_blocks = -(-trials // BLOCK_SIZE)
    sizes = [min(BLOCK_SIZE, trials - b * BLOCK_SIZE) for b in range(n_blocks)]
    logger.info("Simulating %d trials in %d blocks (seed=%d)", trials, n_blocks, seed)

    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks: List[Dict[str, np.ndarray]] = list(pool.map(
                lambda b: _block_counts(plan, seed, b, sizes[b]), range(n_blocks)))
    else:
        blocks = [_block_counts(plan, seed, b, sizes[b]) for b in range(n_blocks)]

    totals = {key: sum(block[key] for block in blocks) for key in blocks[0]}
    n = int(totals['trials'])
    n_h1 = int(totals['h1'])
    n_h0 = n - n_h1
    n_fa, n_md = int(totals['fa']), int(totals['md'])

    loss_sum = n_fa * config.loss_fa + n_md * config.loss_md
    loss_sq = n_fa * config.loss_fa ** 2 + n_md * config.loss_md ** 2
    loss_mean = loss_sum / n
    loss_se = math.sqrt(max(0.0, (loss_sq - n * loss_mean ** 2) / (n - 1)) / n) if n > 1 else 0.0

    linked_mean = int(totals['linked']) / n
    linked_se = math.sqrt(max(0.0, (int(totals['linked_sq']) - n * linked_mean ** 2) / (n - 1)) / n) \
        if n > 1 else 0.0

    return MonteCarloReport(
        loss=McEstimate(mean=loss_mean, std_error=loss_se, trials=n, seed=seed),
        p_fa=_proportion(n_fa, n_h0, seed),
        p_md=_proportion(n_md, n_h1, seed),
        communicating=McEstimate(mean=linked_mean, std_error=linked_se, trials=n, seed=seed),
        cluster_p_fa=tuple(c / n_h0 if n_h0 else math.nan for c in totals['cluster_fa'].tolist()),
        cluster_p_md=tuple(c / n_h1 if n_h1 else math.nan for c in totals['cluster_md'].tolist()),
        trials_h0=n_h0,
        trials_h1=n_h1,
        used_cluster_bound=plan.used_cluster_bound,
        used_fc_bound=plan.used_fc_bound,
    )
