"""Arrival schedules and sweep plans."""

from __future__ import annotations

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from streamload.errors import InvalidParam
from streamload.schedule import (
    ArrivalSchedule,
    Progression,
    StagePlan,
    build_sweep,
    constant_schedule,
    make_schedule,
    poisson_schedule,
)

NS = 1_000_000_000


class TestConstantSchedule:
    def test_two_per_second(self):
        sched = constant_schedule(2.0, 3)
        assert sched.offsets == (0, 500_000_000, 1_000_000_000)

    def test_millisecond_spacing(self):
        assert constant_schedule(1000.0, 2).offsets == (0, 1_000_000)

    def test_single_request(self):
        assert constant_schedule(5.0, 1).offsets == (0,)

    def test_quantization_error_below_one_ns(self):
        rate = 3.0
        sched = constant_schedule(rate, 100_000)
        for i in (0, 1, 7, 99_999):
            assert abs(sched.offsets[i] - i * NS / rate) <= 0.5

    def test_invalid(self):
        with pytest.raises(InvalidParam):
            constant_schedule(0.0, 5)
        with pytest.raises(InvalidParam):
            constant_schedule(1.0, 0)


class TestPoissonSchedule:
    def test_deterministic_per_seed(self):
        a = poisson_schedule(100.0, 1000, seed=9)
        b = poisson_schedule(100.0, 1000, seed=9)
        assert a.offsets == b.offsets

    def test_single_offset_positive(self):
        sched = poisson_schedule(10.0, 1, seed=1)
        assert len(sched.offsets) == 1
        assert sched.offsets[0] > 0

    def test_mean_gap_within_three_standard_errors(self):
        rate, count = 100.0, 100_000
        sched = poisson_schedule(rate, count, seed=12345)
        gaps = np.diff(np.concatenate(([0], np.asarray(sched.offsets)))) / NS
        mean_gap = gaps.mean()
        se = (1 / rate) / count**0.5
        assert abs(mean_gap - 1 / rate) < 3 * se

    def test_gaps_exponential_by_ks(self):
        # 1% asymptotic critical value of the KS statistic is 1.6276/sqrt(n)
        rate, count = 100.0, 100_000
        sched = poisson_schedule(rate, count, seed=777)
        gaps = np.diff(np.concatenate(([0], np.asarray(sched.offsets)))) / NS
        stat = scipy.stats.kstest(gaps, "expon", args=(0, 1 / rate)).statistic
        assert stat < 1.6276 / count**0.5

    def test_offsets_nondecreasing(self):
        sched = poisson_schedule(5000.0, 20_000, seed=3)
        assert all(b >= a for a, b in zip(sched.offsets, sched.offsets[1:]))


class TestMakeSchedule:
    def test_requires_seed_for_poisson(self):
        with pytest.raises(InvalidParam):
            make_schedule("poisson", 1.0, 10, None)

    def test_unknown_kind(self):
        with pytest.raises(InvalidParam):
            make_schedule("bursty", 1.0, 10, 0)


class TestArrivalScheduleType:
    def test_rejects_decreasing_offsets(self):
        with pytest.raises(InvalidParam):
            ArrivalSchedule(offsets=(5, 3), rate=1.0, kind="constant")

    def test_json_round_trip(self):
        sched = poisson_schedule(50.0, 100, seed=4)
        assert ArrivalSchedule.from_json_dict(sched.to_json_dict()) == sched


class TestBuildSweep:
    def test_linear(self):
        plan = build_sweep(10, 40, Progression("linear", step=10), requests_per_stage=10)
        assert [s.rate for s in plan.stages] == [10, 20, 30, 40]

    def test_geometric_exact(self):
        plan = build_sweep(10, 80, Progression("geometric", factor=2), requests_per_stage=10)
        assert [s.rate for s in plan.stages] == [10, 20, 40, 80]

    def test_geometric_clips_to_max(self):
        plan = build_sweep(10, 50, Progression("geometric", factor=2), requests_per_stage=10)
        assert [s.rate for s in plan.stages] == [10, 20, 40, 50]

    def test_invalid_bounds(self):
        with pytest.raises(InvalidParam):
            build_sweep(10, 10, Progression("linear", step=1), requests_per_stage=10)

    def test_requires_exactly_one_sizing(self):
        with pytest.raises(InvalidParam):
            build_sweep(1, 2, Progression("linear", step=1))
        with pytest.raises(InvalidParam):
            build_sweep(1, 2, Progression("linear", step=1),
                        stage_duration_s=1.0, requests_per_stage=5)

    def test_progression_validation(self):
        with pytest.raises(InvalidParam):
            Progression("linear", step=0)
        with pytest.raises(InvalidParam):
            Progression("geometric", factor=1.0)
        with pytest.raises(InvalidParam):
            Progression("quadratic")

    @given(
        st.floats(min_value=0.1, max_value=100.0),
        st.floats(min_value=1.01, max_value=400.0),
        st.one_of(
            st.floats(min_value=0.1, max_value=50.0).map(
                lambda s: Progression("linear", step=s)
            ),
            st.floats(min_value=1.01, max_value=8.0).map(
                lambda f: Progression("geometric", factor=f)
            ),
        ),
    )
    @settings(max_examples=200)
    def test_rates_strictly_increase_and_end_at_max(self, base, span, progression):
        max_rate = base + span
        plan = build_sweep(base, max_rate, progression, requests_per_stage=5)
        rates = [s.rate for s in plan.stages]
        assert all(b > a for a, b in zip(rates, rates[1:]))
        assert rates[-1] == max_rate
        assert rates[0] == base


class TestStagePlan:
    def test_resolve_count_from_duration(self):
        assert StagePlan(rate=10.0, duration_s=3.0).resolve_count() == 30

    def test_exactly_one_sizing(self):
        with pytest.raises(InvalidParam):
            StagePlan(rate=1.0)
        with pytest.raises(InvalidParam):
            StagePlan(rate=1.0, duration_s=1.0, request_count=5)
