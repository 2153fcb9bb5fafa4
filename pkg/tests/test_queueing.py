"""Queue model: closed forms vs independent oracles, and simulation checks."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamload.errors import InvalidParam, Saturated
from streamload.queueing import (
    QueueModelParams,
    ServiceDistribution,
    md1_wait,
    min_workers,
    mm1_wait,
    partitioned_utilization,
    pk_wait,
    simulate_mg1,
    utilization,
)


class TestUtilization:
    def test_half(self):
        assert utilization(0.5, 1.0) == 0.5

    def test_boundary(self):
        assert utilization(1.0, 1.0) == 1.0

    def test_overload_allowed_as_value(self):
        assert utilization(2.0, 1.0) == 2.0

    def test_invalid_service_rate(self):
        with pytest.raises(InvalidParam):
            utilization(1.0, 0.0)


class TestPkWait:
    def test_mm1_case(self):
        # exponential service, mean 1: E[S^2] = 2
        params = QueueModelParams(arrival_rate=0.5, service_rate=1.0, service_second_moment=2.0)
        assert pk_wait(params) == pytest.approx(1.0)
        assert pk_wait(params) == pytest.approx(mm1_wait(0.5, 1.0))

    def test_md1_case(self):
        # deterministic service, mean 1: E[S^2] = 1
        params = QueueModelParams(arrival_rate=0.5, service_rate=1.0, service_second_moment=1.0)
        assert pk_wait(params) == pytest.approx(0.5)
        assert pk_wait(params) == pytest.approx(md1_wait(0.5, 1.0))

    def test_vanishing_load(self):
        params = QueueModelParams(arrival_rate=1e-9, service_rate=1.0, service_second_moment=2.0)
        assert pk_wait(params) < 1e-8

    def test_saturated(self):
        with pytest.raises(Saturated):
            pk_wait(QueueModelParams(1.0, 1.0, 2.0))

    def test_rejects_partitioned_params(self):
        with pytest.raises(InvalidParam):
            pk_wait(QueueModelParams(0.5, 1.0, 2.0, workers=4))

    @given(
        st.floats(min_value=0.01, max_value=0.97),
        st.floats(min_value=0.02, max_value=0.98),
        st.floats(min_value=0.001, max_value=1000.0),
        st.floats(min_value=1.0, max_value=4.0),
    )
    @settings(max_examples=150)
    def test_strictly_increasing_in_arrival_rate(self, rho_a, rho_b, mu, s2_factor):
        if abs(rho_a - rho_b) < 1e-6:
            return
        lo, hi = sorted((rho_a, rho_b))
        s2 = s2_factor / mu**2
        w_lo = pk_wait(QueueModelParams(lo * mu, mu, s2))
        w_hi = pk_wait(QueueModelParams(hi * mu, mu, s2))
        assert w_hi > w_lo

    @pytest.mark.parametrize("eps", [1e-2, 1e-4, 1e-6])
    def test_divergence_near_saturation(self, eps):
        # hold lambda*s2 = 2 fixed while rho -> 1: wait is exactly 1/eps
        mu = 1.0
        lam = 1.0 - eps
        s2 = 2.0 / lam
        w = pk_wait(QueueModelParams(lam, mu, s2))
        assert w == pytest.approx(lam * s2 / (2 * eps), rel=1e-9)
        assert w == pytest.approx(1.0 / eps, rel=1e-9)


class TestPartitioning:
    def test_example(self):
        assert partitioned_utilization(10.0, 1.0, 20) == pytest.approx(0.5)

    def test_identity_at_one_worker(self):
        assert partitioned_utilization(3.0, 2.0, 1) == utilization(3.0, 2.0)

    @given(
        st.floats(min_value=1e-3, max_value=1e6),
        st.floats(min_value=1e-3, max_value=1e6),
        st.integers(min_value=1, max_value=1000),
    )
    def test_equals_utilization_over_k(self, lam, mu, k):
        assert partitioned_utilization(lam, mu, k) == pytest.approx(
            utilization(lam, mu) / k
        )


class TestMinWorkers:
    def test_examples(self):
        assert min_workers(100.0, 100.0, 0.5) == 2
        assert min_workers(1.0, 1000.0, 0.5) == 1
        # 999 / (100 * 0.8) = 12.4875 -> 13
        assert min_workers(999.0, 100.0, 0.8) == 13

    def test_invalid_rho_max(self):
        with pytest.raises(InvalidParam):
            min_workers(1.0, 1.0, 1.0)
        with pytest.raises(InvalidParam):
            min_workers(1.0, 1.0, 0.0)

    @given(
        st.floats(min_value=1e-3, max_value=1e5),
        st.floats(min_value=1e-3, max_value=1e5),
        st.floats(min_value=0.05, max_value=0.95),
    )
    @settings(max_examples=200)
    def test_minimality(self, lam, mu, rho_max):
        k = min_workers(lam, mu, rho_max)
        assert partitioned_utilization(lam, mu, k) <= rho_max
        assert k == 1 or partitioned_utilization(lam, mu, k - 1) > rho_max


class TestServiceDistribution:
    def test_moment_inequality_enforced(self):
        with pytest.raises(InvalidParam):
            ServiceDistribution(kind="general", mean=1.0, second_moment=0.5, sample=(1.0,))

    def test_from_sample_moments(self):
        dist = ServiceDistribution.from_sample([1.0, 3.0])
        assert dist.mean == pytest.approx(2.0)
        assert dist.second_moment == pytest.approx(5.0)

    def test_empirical_requires_sample(self):
        with pytest.raises(InvalidParam):
            ServiceDistribution(kind="general", mean=1.0, second_moment=2.0)


class TestSimulateMg1:
    def test_deterministic_per_seed(self):
        dist = ServiceDistribution.exponential(1.0)
        a = simulate_mg1(dist, 0.4, 20_000, seed=7)
        b = simulate_mg1(dist, 0.4, 20_000, seed=7)
        assert a == b

    def test_different_seed_differs(self):
        dist = ServiceDistribution.exponential(1.0)
        a = simulate_mg1(dist, 0.4, 20_000, seed=7)
        b = simulate_mg1(dist, 0.4, 20_000, seed=8)
        assert a.mean_wait != b.mean_wait

    def test_saturated_rejected(self):
        with pytest.raises(Saturated):
            simulate_mg1(ServiceDistribution.deterministic(1.0), 1.0, 100, seed=1)

    def test_vanishing_load(self):
        res = simulate_mg1(ServiceDistribution.deterministic(1.0), 1e-4, 5_000, seed=3)
        assert res.mean_wait < 1e-3

    def test_matches_md1_at_moderate_load(self):
        # quick agreement check; the tight 2% comparison is in the acceptance suite
        res = simulate_mg1(ServiceDistribution.deterministic(1.0), 0.5, 60_000, seed=11)
        assert res.mean_wait == pytest.approx(md1_wait(0.5, 1.0), rel=0.06)

    def test_empirical_sample_distribution(self):
        dist = ServiceDistribution.from_sample([0.5, 0.5, 0.5, 0.5])
        res = simulate_mg1(dist, 0.8, 40_000, seed=5)
        # all-0.5 sample behaves like deterministic service with mean 0.5
        assert res.mean_wait == pytest.approx(md1_wait(0.8, 2.0), rel=0.08)
