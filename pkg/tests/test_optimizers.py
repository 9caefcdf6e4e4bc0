"""
Tests for threshold optimization: the equal-threshold grid search, the
majority baseline, initialization schemes and Gauss-Seidel descent.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.detection_core import (
    DivisibilityError,
    DomainError,
    SensorParams,
    SystemConfig,
    homogeneous_cluster,
    homogeneous_system,
)
from src.exact_engine import EstimatorPolicy, evaluate_system
from src.experiment_config import ExperimentConfig
from src.optimizers import (
    GaussSeidelConfig,
    InitScheme,
    initial_values,
    majority_rule_loss,
    majority_threshold,
    optimize_heterogeneous,
    optimize_homogeneous,
)

P_COM_SWEEP = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5]


@pytest.fixture
def sensor():
    return SensorParams(p_fa=0.2, p_md=0.35, p_com=0.3)


@pytest.fixture
def base(sensor):
    return SystemConfig(clusters=(homogeneous_cluster(1, sensor, 1, 0.0),),
                        p1=0.65, loss_fa=100.0, loss_md=200.0)


@pytest.fixture
def small_cfg():
    return ExperimentConfig(n_sensors=12, n_clusters=3, points_per_sensor=5, r_p=10, realizations=1)


@pytest.fixture
def hetero_clusters(small_cfg):
    return small_cfg.heterogeneous_clusters(3, 0.3, 0)


@pytest.fixture
def gs():
    return GaussSeidelConfig(r_gamma=5, r_p=10)


@pytest.mark.unit
class TestHomogeneousOptimization:
    """Equal count threshold and tie probability."""

    def test_majority_threshold(self):
        """Test the strict-majority count threshold."""
        assert majority_threshold(1) == 1
        assert majority_threshold(4) == 3
        assert majority_threshold(5) == 3
        assert majority_threshold(50) == 26

    def test_majority_loss_matches_direct_evaluation(self, sensor, base):
        """Test majority loss against direct evaluation."""
        report = majority_rule_loss(12, 3, sensor, base)
        cluster = homogeneous_cluster(4, sensor, 3, 0.0)
        direct = evaluate_system(base.with_clusters([cluster] * 3), EstimatorPolicy.EXACT)
        assert report.expected_loss == pytest.approx(direct.expected_loss, rel=1e-12)

    def test_optimum_beats_majority(self, sensor, base):
        """Test the optimized equal threshold is never worse than majority."""
        sol = optimize_homogeneous(12, 3, sensor, base, r_p=10, policy=EstimatorPolicy.EXACT)
        assert sol.loss <= majority_rule_loss(12, 3, sensor, base).expected_loss + 1e-9

    def test_optimum_beats_majority_across_comm_sweep(self, base):
        """Test optimized thresholds match or beat majority at every p_com, strictly somewhere."""
        gains = []
        for p_com in P_COM_SWEEP:
            s = SensorParams(p_fa=0.2, p_md=0.35, p_com=p_com)
            sol = optimize_homogeneous(60, 6, s, base, r_p=20, policy=EstimatorPolicy.EXACT)
            majority = majority_rule_loss(60, 6, s, base).expected_loss
            assert sol.loss <= majority + 1e-9 * majority
            gains.append(majority - sol.loss)
        assert max(gains) > 1e-9

    def test_exact_grid_shape(self, sensor, base):
        """Test the exact grid covers every count and tie value."""
        sol = optimize_homogeneous(12, 3, sensor, base, r_p=10, policy=EstimatorPolicy.EXACT,
                                   keep_grid=True)
        assert len(sol.grid) == 5 * 11
        assert sol.loss == pytest.approx(sol.grid['loss'].min())
        assert not sol.grid['used_cluster_bound'].any()

    def test_bound_grid_pins_tie_probability(self, sensor, base):
        """Test the bound grid keeps tie probability at one."""
        sol = optimize_homogeneous(12, 3, sensor, base, r_p=10, policy=EstimatorPolicy.BOUND,
                                   keep_grid=True)
        assert len(sol.grid) == 5
        assert (sol.grid['tie_prob'] == 1.0).all()
        assert sol.tie_prob == 1.0
        assert sol.report.used_cluster_bound and sol.report.used_fc_bound

    def test_loss_matches_deployed_system(self, sensor, base):
        """Test the optimum loss matches its deployed system."""
        sol = optimize_homogeneous(12, 3, sensor, base, r_p=10, policy=EstimatorPolicy.EXACT)
        deployed = homogeneous_system(12, 3, sensor, base, sol.gamma_c, sol.tie_prob)
        report = evaluate_system(deployed, EstimatorPolicy.EXACT)
        assert sol.loss == pytest.approx(report.expected_loss, rel=1e-9)

    def test_divisibility_required(self, sensor, base):
        """Test an indivisible cluster count is refused."""
        with pytest.raises(DivisibilityError):
            optimize_homogeneous(12, 5, sensor, base, r_p=10)

    def test_exact_loss_non_increasing_in_comm_probability(self, base):
        """Test the exact optimum does not rise with better links."""
        losses = []
        for p_com in (0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0):
            s = SensorParams(p_fa=0.2, p_md=0.35, p_com=p_com)
            losses.append(optimize_homogeneous(12, 3, s, base, r_p=10,
                                               policy=EstimatorPolicy.EXACT).loss)
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    @pytest.mark.slow
    def test_one_cluster_wins_when_links_are_weak(self, base):
        """Test one large cluster beats ten small ones at weak links."""
        s = SensorParams(p_fa=0.2, p_md=0.35, p_com=0.1)
        single = optimize_homogeneous(100, 1, s, base, r_p=20, policy=EstimatorPolicy.EXACT)
        ten = optimize_homogeneous(100, 10, s, base, r_p=20, policy=EstimatorPolicy.EXACT)
        assert single.loss <= ten.loss

    @pytest.mark.slow
    @pytest.mark.parametrize('n_c', [2, 5])
    def test_bound_optimized_thresholds_near_exact_optimum(self, base, n_c):
        """Test bound-optimized thresholds lose at most 5% against the exact optimum."""
        for p_com in P_COM_SWEEP:
            s = SensorParams(p_fa=0.2, p_md=0.35, p_com=p_com)
            exact = optimize_homogeneous(100, n_c, s, base, r_p=20, policy=EstimatorPolicy.EXACT)
            approx = optimize_homogeneous(100, n_c, s, base, r_p=20, policy=EstimatorPolicy.AUTO)
            assert approx.report.used_cluster_bound == (100 // n_c > base.m_s)
            deployed = homogeneous_system(100, n_c, s, base, approx.gamma_c, approx.tie_prob)
            achieved = evaluate_system(deployed, EstimatorPolicy.EXACT).expected_loss
            assert achieved >= exact.loss - 1e-9 * exact.loss
            assert (achieved - exact.loss) / exact.loss <= 0.05


@pytest.mark.unit
class TestInitialValues:
    """Starting points for coordinate descent."""

    def test_midpoint(self, hetero_clusters, base):
        """Test the midpoint start."""
        gammas, ties = initial_values(hetero_clusters, InitScheme.MIDPOINT, base)
        for c, g, p in zip(hetero_clusters, gammas, ties):
            assert g == pytest.approx(0.5 * (c.ell_min + c.ell_max))
            assert p == 0.5

    def test_all_h1_starts_at_bottom(self, hetero_clusters, base):
        """Test the all-H1 start sits at the bottom of every interval."""
        gammas, ties = initial_values(hetero_clusters, InitScheme.ALL_H1, base)
        assert gammas == [c.ell_min for c in hetero_clusters]
        assert ties == [0.0] * 3

    def test_all_h0_starts_at_top(self, hetero_clusters, base):
        """Test the all-H0 start sits at the top of every interval."""
        gammas, ties = initial_values(hetero_clusters, 'all-H0', base)
        assert gammas == [c.ell_max for c in hetero_clusters]
        assert ties == [1.0] * 3

    def test_optimal_homogeneous_stays_inside_intervals(self, hetero_clusters, base):
        """Test the optimal-homogeneous start stays inside every interval."""
        gammas, ties = initial_values(hetero_clusters, InitScheme.OPTIMAL_HOMOGENEOUS, base, r_p=10)
        for c, g, p in zip(hetero_clusters, gammas, ties):
            assert c.ell_min <= g <= c.ell_max
            assert 0.0 <= p <= 1.0

    def test_unknown_scheme(self, hetero_clusters, base):
        """Test an unknown scheme name is refused."""
        with pytest.raises(ValueError):
            initial_values(hetero_clusters, 'random', base)


@pytest.mark.unit
class TestGaussSeidel:
    """Coordinate descent over per-cluster thresholds."""

    def test_trace_never_increases(self, hetero_clusters, base, gs):
        """Test the descent trace never increases."""
        sol = optimize_heterogeneous(hetero_clusters, base, gs)
        losses = sol.losses
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
        assert sol.surrogate_loss == losses[-1]
        assert sol.surrogate_loss <= losses[0] + 1e-9

    def test_converges_on_small_instance(self, hetero_clusters, base, gs):
        """Test descent settles on a small instance."""
        sol = optimize_heterogeneous(hetero_clusters, base, gs)
        assert sol.converged
        assert sol.iterations < 150
        assert len(sol.trace) == sol.iterations + 1

    def test_surrogate_matches_evaluation(self, hetero_clusters, base, gs):
        """Test the surrogate loss matches a fresh evaluation."""
        sol = optimize_heterogeneous(hetero_clusters, base, gs)
        report = evaluate_system(base.with_clusters(sol.clusters), EstimatorPolicy.AUTO)
        assert sol.surrogate_loss == pytest.approx(report.expected_loss, rel=1e-8)
        assert sol.p_fa == pytest.approx(report.p_fa, rel=1e-8, abs=1e-14)
        assert sol.p_md == pytest.approx(report.p_md, rel=1e-8, abs=1e-14)
        assert not sol.used_cluster_bound and not sol.used_fc_bound

    def test_deterministic(self, hetero_clusters, base, gs):
        """Test two runs give the same descent."""
        first = optimize_heterogeneous(hetero_clusters, base, gs)
        second = optimize_heterogeneous(hetero_clusters, base, gs)
        assert first.gammas == second.gammas
        assert first.tie_probs == second.tie_probs
        assert first.losses == second.losses

    def test_thread_count_does_not_change_result(self, hetero_clusters, base):
        """Test worker count does not change the descent."""
        one = optimize_heterogeneous(hetero_clusters, base, GaussSeidelConfig(r_gamma=5, r_p=10))
        three = optimize_heterogeneous(hetero_clusters, base,
                                       GaussSeidelConfig(r_gamma=5, r_p=10, threads=3))
        assert one.gammas == three.gammas
        assert one.losses == three.losses

    @pytest.mark.parametrize('scheme', list(InitScheme))
    def test_every_scheme_improves_its_start(self, hetero_clusters, base, scheme):
        """Test every scheme ends no worse than it starts."""
        sol = optimize_heterogeneous(hetero_clusters, base,
                                     GaussSeidelConfig(r_gamma=5, r_p=10, init_scheme=scheme))
        assert sol.surrogate_loss <= sol.losses[0] + 1e-9
        for c, g in zip(hetero_clusters, sol.gammas):
            assert c.ell_min - 1e-12 <= g <= c.ell_max + 1e-12

    @pytest.mark.parametrize('realization', [0, 1, 2])
    def test_terminal_point_is_grid_local_minimum(self, small_cfg, base, gs, realization):
        """Test no single-cluster move on the scan grid beats the converged loss."""
        clusters = small_cfg.heterogeneous_clusters(3, 0.3, realization)
        sol = optimize_heterogeneous(clusters, base, gs)
        assert sol.converged
        assert sol.iterations <= 50 * len(clusters)
        ties = np.linspace(0.0, 1.0, gs.r_p + 1)
        for j, cluster in enumerate(sol.clusters):
            low, high = cluster.interval
            steps = gs.r_gamma * cluster.size
            for gamma in low + (high - low) * np.arange(steps + 1) / steps:
                for tie in ties:
                    moved = list(sol.clusters)
                    moved[j] = cluster.with_rule(float(gamma), float(tie))
                    report = evaluate_system(base.with_clusters(moved), EstimatorPolicy.EXACT)
                    assert report.expected_loss >= sol.surrogate_loss - 1e-9 * sol.surrogate_loss

    def test_optimal_homogeneous_start_is_homogeneous_optimum(self, base, sensor):
        """Test the optimal-homogeneous start reproduces the equal-threshold optimum."""
        cfg = ExperimentConfig(n_sensors=12, n_clusters=3, p_fa_spread=0.0, p_md_spread=0.0)
        clusters = cfg.heterogeneous_clusters(3, sensor.p_com, 0)
        sol = optimize_heterogeneous(clusters, base, GaussSeidelConfig(r_gamma=5, r_p=10))
        homogeneous = optimize_homogeneous(12, 3, sensor, base, r_p=10)
        assert sol.losses[0] == pytest.approx(homogeneous.loss, rel=1e-9)
        assert sol.surrogate_loss <= homogeneous.loss + 1e-9

    def test_bound_branch_keeps_tie_at_one(self, hetero_clusters, base):
        """Test bound-evaluated clusters keep tie probability one."""
        sol = optimize_heterogeneous(hetero_clusters, base,
                                     GaussSeidelConfig(r_gamma=5, r_p=10, m_s=2))
        assert sol.tie_probs == (1.0, 1.0, 1.0)
        assert sol.used_cluster_bound
        assert {entry.branch for entry in sol.trace} == {'cluster-bound'}

    def test_iteration_cap(self, hetero_clusters, base):
        """Test the update cap stops descent."""
        sol = optimize_heterogeneous(hetero_clusters, base,
                                     GaussSeidelConfig(r_gamma=5, r_p=10, max_iters=2))
        assert sol.iterations <= 2
        if not sol.converged:
            assert sol.iterations == 2

    def test_trace_frame(self, hetero_clusters, base, gs):
        """Test the trace frame layout."""
        frame = optimize_heterogeneous(hetero_clusters, base, gs).trace_frame()
        assert list(frame.columns) == ['iteration', 'cluster', 'branch', 'loss', 'gamma', 'tie_prob']
        assert frame['cluster'].iloc[0] == -1

    @pytest.mark.parametrize('kwargs', [
        {'r_gamma': 0}, {'r_p': 0}, {'delta_gamma_tol': 0.0}, {'delta_p_tol': -1.0},
        {'max_iters': 0}, {'threads': 0}, {'m_s': 0},
    ])
    def test_config_validation(self, kwargs):
        """Test invalid descent settings are refused."""
        with pytest.raises(DomainError):
            GaussSeidelConfig(**kwargs)

    def test_scheme_names(self):
        """Test schemes parse from their names."""
        assert GaussSeidelConfig(init_scheme='all-H1').init_scheme is InitScheme.ALL_H1
        with pytest.raises(ValueError):
            GaussSeidelConfig(init_scheme='best')
