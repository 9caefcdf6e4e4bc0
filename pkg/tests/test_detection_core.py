"""
Tests for the detection core: records, weights, communication probability,
fusion threshold and the shared tie test.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.detection_core import (
    LOG_FLOOR,
    ClusterQuality,
    ClusterSpec,
    DegenerateWeightError,
    DivisibilityError,
    DomainError,
    SensorParams,
    SystemConfig,
    cluster_comm_prob,
    cluster_size_for,
    cluster_weight_arrays,
    cluster_weights,
    compare_to_threshold,
    count_to_threshold,
    expected_communicating_clusters,
    expected_loss,
    fc_threshold,
    homogeneous_cluster,
    homogeneous_comm_prob,
    homogeneous_params,
    homogeneous_system,
    is_tie,
    mean_params,
    sensor_interval,
    sensor_weights,
    threshold_to_count,
)


@pytest.fixture
def sensor():
    return SensorParams(p_fa=0.2, p_md=0.35, p_com=0.25)


@pytest.fixture
def system(sensor):
    cluster = homogeneous_cluster(4, sensor, 3, 0.0)
    return SystemConfig(clusters=(cluster,), p1=0.65, loss_fa=100.0, loss_md=200.0)


@pytest.mark.unit
class TestSensorRecords:
    """Validation of sensor and cluster records."""

    @pytest.mark.parametrize('p_fa, p_md', [(0.0, 0.3), (0.5, 0.3), (0.2, 0.5), (0.2, -0.1)])
    def test_sensor_error_probabilities_must_lie_below_half(self, p_fa, p_md):
        """Test sensor error probabilities must lie in (0, 0.5)."""
        with pytest.raises(DomainError):
            SensorParams(p_fa=p_fa, p_md=p_md, p_com=0.5)

    def test_comm_probability_allows_closed_interval(self):
        """Test link probabilities of 0 and 1 are accepted."""
        SensorParams(p_fa=0.2, p_md=0.3, p_com=0.0)
        SensorParams(p_fa=0.2, p_md=0.3, p_com=1.0)
        with pytest.raises(DomainError):
            SensorParams(p_fa=0.2, p_md=0.3, p_com=1.5)

    def test_nan_is_rejected(self):
        """Test NaN parameters are rejected."""
        with pytest.raises(DomainError):
            SensorParams(p_fa=float('nan'), p_md=0.3, p_com=0.5)

    def test_cluster_threshold_must_lie_in_interval(self, sensor):
        """Test cluster thresholds outside the interval are rejected."""
        low, high = sensor_interval([sensor] * 3)
        ClusterSpec(sensors=(sensor,) * 3, gamma=low, tie_prob=0.5)
        ClusterSpec(sensors=(sensor,) * 3, gamma=high, tie_prob=0.5)
        with pytest.raises(DomainError):
            ClusterSpec(sensors=(sensor,) * 3, gamma=high + 0.1, tie_prob=0.5)

    def test_empty_cluster_rejected(self):
        """Test a cluster needs at least one sensor."""
        with pytest.raises(DomainError):
            ClusterSpec(sensors=(), gamma=0.0)

    def test_tie_probability_range(self, sensor):
        """Test tie probabilities outside [0, 1] are rejected."""
        with pytest.raises(DomainError):
            ClusterSpec(sensors=(sensor,), gamma=0.0, tie_prob=1.2)

    def test_system_needs_valid_prior_and_losses(self, system):
        """Test system prior and losses are validated."""
        cluster = system.clusters[0]
        with pytest.raises(DomainError):
            SystemConfig(clusters=(cluster,), p1=1.0, loss_fa=100.0, loss_md=200.0)
        with pytest.raises(DomainError):
            SystemConfig(clusters=(cluster,), p1=0.5, loss_fa=0.0, loss_md=200.0)
        with pytest.raises(DomainError):
            SystemConfig(clusters=(), p1=0.5, loss_fa=1.0, loss_md=1.0)

    def test_system_counts(self, system):
        """Test system sensor and cluster counts."""
        assert system.n_clusters == 1
        assert system.n_sensors == 4
        assert system.p0 == pytest.approx(0.35)


@pytest.mark.unit
class TestWeights:
    """Sensor and cluster log-likelihood weights."""

    def test_sensor_weights(self, sensor):
        """Test sensor log-likelihood weights."""
        w = sensor_weights(sensor)
        assert w.w1 == pytest.approx(math.log(0.65 / 0.2))
        assert w.w0 == pytest.approx(math.log(0.8 / 0.35))
        assert w.w1 > 0 and w.w0 > 0

    def test_interval_is_sum_of_weights(self, sensor):
        """Test the statistic interval is the sum of the weights."""
        w = sensor_weights(sensor)
        low, high = sensor_interval([sensor] * 5)
        assert low == pytest.approx(-5 * w.w0)
        assert high == pytest.approx(5 * w.w1)

    def test_cluster_weights_match_sensor_formula(self):
        """Test cluster weights use the sensor formula."""
        q = ClusterQuality(p_fa_c=0.1, p_md_c=0.2, p_com_c=0.5)
        w = cluster_weights(q)
        assert w.w1 == pytest.approx(math.log(0.8 / 0.1))
        assert w.w0 == pytest.approx(math.log(0.9 / 0.2))

    def test_boundary_quality_raises_when_strict(self):
        """Test boundary qualities raise in strict mode."""
        q = ClusterQuality(p_fa_c=0.0, p_md_c=0.3, p_com_c=0.5)
        with pytest.raises(DegenerateWeightError):
            cluster_weights(q)

    def test_boundary_quality_floored_when_not_strict(self):
        """Test boundary qualities are floored otherwise."""
        perfect = cluster_weights(ClusterQuality(p_fa_c=0.0, p_md_c=0.3, p_com_c=0.5), strict=False)
        assert perfect.w1 == pytest.approx(math.log(0.7) - math.log(LOG_FLOOR))
        assert math.isfinite(perfect.w1)

        # never reports one under H1 nor under H0: a one is impossible, weight 0
        silent = cluster_weights(ClusterQuality(p_fa_c=0.0, p_md_c=1.0, p_com_c=0.5), strict=False)
        assert silent.w1 == pytest.approx(0.0)

    def test_weight_arrays_match_scalar(self):
        """Test array weights match scalar weights."""
        p_fa = np.array([0.1, 0.3, 0.45])
        p_md = np.array([0.2, 0.05, 0.4])
        w1, w0 = cluster_weight_arrays(p_fa, p_md)
        for i in range(3):
            w = cluster_weights(ClusterQuality(p_fa[i], p_md[i], 1.0))
            assert w1[i] == pytest.approx(w.w1)
            assert w0[i] == pytest.approx(w.w0)

    def test_weight_arrays_strict_boundary(self):
        """Test array weights raise on boundary values in strict mode."""
        with pytest.raises(DegenerateWeightError):
            cluster_weight_arrays(np.array([0.1, 1.0]), np.array([0.2, 0.2]))


@pytest.mark.unit
class TestCommunication:
    """Cluster reachability."""

    def test_single_sensor(self):
        """Test reachability of a one-sensor cluster."""
        assert homogeneous_comm_prob(1, 0.25) == pytest.approx(0.25)

    def test_fifty_sensors(self):
        """Test reachability of fifty sensors against a known value."""
        assert homogeneous_comm_prob(50, 0.05) == pytest.approx(0.923055, abs=1e-6)

    def test_closed_form_grid(self):
        """Test reachability against the closed form on a grid."""
        for p in (0.05, 0.25, 0.5):
            values = [homogeneous_comm_prob(n, p) for n in range(1, 101)]
            for n, v in enumerate(values, start=1):
                assert abs(v - (1.0 - (1.0 - p) ** n)) <= 1e-12
            assert all(b >= a for a, b in zip(values, values[1:]))

    def test_higher_sensor_probability_dominates(self):
        """Test better links give better reachability."""
        for n in range(1, 101):
            assert homogeneous_comm_prob(n, 0.5) >= homogeneous_comm_prob(n, 0.05)

    def test_edge_probabilities(self):
        """Test reachability at link probabilities 0 and 1."""
        assert homogeneous_comm_prob(10, 0.0) == 0.0
        assert homogeneous_comm_prob(10, 1.0) == 1.0

    def test_heterogeneous_cluster(self):
        """Test reachability of mixed sensors."""
        sensors = (
            SensorParams(0.2, 0.3, 0.1),
            SensorParams(0.2, 0.3, 0.5),
            SensorParams(0.2, 0.3, 0.2),
        )
        cluster = ClusterSpec(sensors=sensors, gamma=0.0)
        assert cluster_comm_prob(cluster) == pytest.approx(1.0 - 0.9 * 0.5 * 0.8)

    def test_expected_communicating_clusters(self, sensor):
        """Test the expected number of reachable clusters."""
        clusters = [homogeneous_cluster(n, sensor, 0, 0.0) for n in (1, 2, 3)]
        expected = sum(1.0 - 0.75 ** n for n in (1, 2, 3))
        assert expected_communicating_clusters(clusters) == pytest.approx(expected)

    def test_no_clusters(self):
        """Test an empty cluster list."""
        with pytest.raises(DomainError):
            expected_communicating_clusters([])


@pytest.mark.unit
class TestThresholds:
    """Fusion threshold, loss and count thresholds."""

    def test_fc_threshold(self, system):
        """Test the FC threshold from prior and losses."""
        assert fc_threshold(system) == pytest.approx(math.log(100 * 0.35 / (200 * 0.65)))

    def test_expected_loss(self, system):
        """Test expected loss from error probabilities."""
        assert expected_loss(0.1, 0.2, system) == pytest.approx(0.35 * 0.1 * 100 + 0.65 * 0.2 * 200)

    def test_count_threshold_round_trip(self, sensor):
        """Test count and statistic thresholds convert both ways."""
        w = sensor_weights(sensor)
        for gamma_c in (0, 1, 2.5, 7):
            gamma = count_to_threshold(gamma_c, 7, w)
            assert threshold_to_count(gamma, 7, w) == pytest.approx(gamma_c)

    def test_count_threshold_endpoints(self, sensor):
        """Test count thresholds at the interval ends."""
        w = sensor_weights(sensor)
        low, high = sensor_interval([sensor] * 6)
        assert count_to_threshold(0, 6, w) == pytest.approx(low)
        assert count_to_threshold(6, 6, w) == pytest.approx(high)

    def test_homogeneous_cluster_endpoints_exact(self, sensor):
        """Test homogeneous cluster endpoints land exactly on the interval."""
        for n in (1, 7, 33):
            low, high = sensor_interval([sensor] * n)
            assert homogeneous_cluster(n, sensor, 0, 0.5).gamma == pytest.approx(low, rel=1e-12)
            assert homogeneous_cluster(n, sensor, n, 0.5).gamma == pytest.approx(high, rel=1e-12)

    def test_homogeneous_cluster_rejects_bad_count(self, sensor):
        """Test out-of-range counts are rejected."""
        with pytest.raises(DomainError):
            homogeneous_cluster(4, sensor, 5, 0.5)

    def test_cluster_size_for(self):
        """Test cluster size from sensor and cluster counts."""
        assert cluster_size_for(500, 10) == 50
        with pytest.raises(DivisibilityError):
            cluster_size_for(500, 3)

    def test_homogeneous_system(self, sensor, system):
        """Test homogeneous system construction."""
        built = homogeneous_system(12, 4, sensor, system, 2, 0.5)
        assert built.n_clusters == 4
        assert all(c.size == 3 for c in built.clusters)
        assert built.p1 == system.p1


@pytest.mark.unit
class TestTieHandling:
    """Shared comparison of a statistic to its threshold."""

    def test_compare_to_threshold(self):
        """Test above, below and tied comparisons."""
        stat = np.array([1.0, 1.0 + 1e-12, 0.5, 2.0])
        assert compare_to_threshold(stat, 1.0, 1e-9).tolist() == [0, 0, -1, 1]

    def test_compare_broadcasts_per_column(self):
        """Test comparisons broadcast per column."""
        stat = np.array([[0.0, 1.0], [2.0, 1.0]])
        out = compare_to_threshold(stat, np.array([1.0, 1.0]), np.array([1e-9, 1e-9]))
        assert out.tolist() == [[-1, 0], [1, 0]]

    def test_is_tie_scales_with_width(self):
        """Test the tie tolerance scales with the interval width."""
        assert is_tie(1.0 + 5e-10, 1.0, 1.0)
        assert not is_tie(1.0 + 5e-9, 1.0, 1.0)
        assert is_tie(1.0 + 5e-9, 1.0, 100.0)


@pytest.mark.unit
class TestParameterSummaries:

    def test_homogeneous_params(self, sensor):
        """Test shared parameters of identical sensors."""
        cluster = homogeneous_cluster(3, sensor, 1, 0.5)
        assert homogeneous_params(cluster) == sensor

    def test_mixed_cluster_has_no_shared_params(self, sensor):
        """Test mixed sensors have no shared parameters."""
        other = SensorParams(p_fa=0.22, p_md=0.35, p_com=0.25)
        cluster = ClusterSpec(sensors=(sensor, other), gamma=0.0)
        assert homogeneous_params(cluster) is None
        mean = mean_params(cluster)
        assert mean.p_fa == pytest.approx(0.21)
        assert mean.p_md == pytest.approx(0.35)
