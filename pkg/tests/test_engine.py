"""Engine integration tests against a real local mock server.

These spawn worker processes and real sockets; schedules are kept short so
the whole module stays fast.  Heavy timing/fidelity checks live in the
acceptance suite.
"""

from __future__ import annotations

import pytest

from streamload.engine import (
    SCHED_DELAY_LIMIT_S,
    ClientCalibration,
    EngineConfig,
    auto_size,
    fidelity_from_records,
    run_closed_loop,
    run_stage,
)
from streamload.errors import InsufficientHardware, InvalidParam, TargetUnreachable
from streamload.metrics import RequestRecord
from streamload.mockserver import MockBehavior, serve
from streamload.schedule import constant_schedule, poisson_schedule
from streamload.workload import WorkloadSpec, materialize

MS = 1_000_000


@pytest.fixture(scope="module")
def zero_delay_mock():
    handle = serve(MockBehavior(output_tokens=None), "127.0.0.1:0", server_workers=1)
    yield handle
    handle.stop()


def make_workload(n: int, tokens: int = 8, input_tokens: int = 16):
    spec = WorkloadSpec(input_tokens=input_tokens, output_tokens=tokens, seed=17)
    instances, _ = materialize(spec, n)
    return instances


def engine_config(url: str, **overrides) -> EngineConfig:
    defaults = dict(
        target=url, max_workers=1, worker_max_concurrency=64, timeout_s=10.0
    )
    defaults.update(overrides)
    return EngineConfig(**defaults)


class TestRunStage:
    def test_single_request(self, zero_delay_mock):
        sched = constant_schedule(5.0, 1)
        result = run_stage(engine_config(zero_delay_mock.url), sched, make_workload(1))
        assert len(result.records) == 1
        rec = result.records[0]
        assert rec.is_success
        assert rec.intended_dispatch == 0
        # one request over one mean gap: dispatched rate tracks the schedule
        assert result.fidelity.dispatched_qps == pytest.approx(5.0, rel=0.2)

    def test_every_offset_dispatched_exactly_once(self, zero_delay_mock):
        sched = poisson_schedule(40.0, 60, seed=5)
        result = run_stage(
            engine_config(zero_delay_mock.url, max_workers=2), sched, make_workload(60)
        )
        assert len(result.records) == len(sched.offsets)
        assert sorted(r.intended_dispatch for r in result.records) == sorted(sched.offsets)
        assert len({r.request_id for r in result.records}) == len(sched.offsets)
        assert all(r.is_success for r in result.records)
        assert all(r.actual_send >= r.intended_dispatch for r in result.records)

    def test_fidelity_at_low_rate(self, zero_delay_mock):
        sched = constant_schedule(20.0, 40)
        result = run_stage(
            engine_config(zero_delay_mock.url, max_workers=2), sched, make_workload(40)
        )
        assert result.fidelity.fidelity_ratio >= 0.98
        assert result.fidelity.sched_delay_p50_s < 0.002
        assert not result.aborted

    def test_token_accounting_crosschecks_server(self, zero_delay_mock):
        sched = constant_schedule(20.0, 10)
        result = run_stage(
            engine_config(zero_delay_mock.url), sched, make_workload(10, tokens=12)
        )
        for rec in result.records:
            assert rec.output_tokens == 12
            assert rec.server_output_tokens == 12
            assert rec.input_tokens == 16

    def test_workload_shorter_than_schedule(self, zero_delay_mock):
        with pytest.raises(InvalidParam):
            run_stage(engine_config(zero_delay_mock.url), constant_schedule(5.0, 10),
                      make_workload(5))

    def test_unreachable_target(self):
        cfg = engine_config("http://127.0.0.1:9")
        with pytest.raises(TargetUnreachable):
            run_stage(cfg, constant_schedule(5.0, 2), make_workload(2))

    def test_closed_mode_rejected(self, zero_delay_mock):
        cfg = engine_config(zero_delay_mock.url, mode="closed_loop",
                            closed_loop_concurrency=2)
        with pytest.raises(InvalidParam):
            run_stage(cfg, constant_schedule(5.0, 2), make_workload(2))

    def test_error_rate_aborts_stage(self):
        handle = serve(MockBehavior(failure_rate=1.0), "127.0.0.1:0")
        try:
            sched = constant_schedule(50.0, 80)
            result = run_stage(engine_config(handle.url), sched, make_workload(80))
            assert result.aborted
            summary = result.summary()
            assert summary.error_count > 0
            assert summary.success_count == 0
        finally:
            handle.stop()

    def test_warmup_flagged_on_long_stages(self, zero_delay_mock):
        sched = constant_schedule(40.0, 40)
        result = run_stage(
            engine_config(zero_delay_mock.url, warmup_fraction=0.10),
            sched, make_workload(40),
        )
        flagged = [r for r in result.records if r.warmup]
        assert 1 <= len(flagged) <= 8
        assert all(r.intended_dispatch < result.warmup_ns for r in flagged)


class TestClosedLoop:
    def test_littles_law(self):
        # request time ~= prefill + (tokens-1) * per_token; c in flight
        handle = serve(
            MockBehavior(prefill_delay_s=0.004, per_token_delay_s=0.008, output_tokens=6),
            "127.0.0.1:0",
        )
        try:
            cfg = engine_config(handle.url, mode="closed_loop", closed_loop_concurrency=3)
            result = run_closed_loop(cfg, 3, make_workload(90, tokens=6))
            assert len(result.records) == 90
            mean_request_s = sum(
                (r.completion - r.actual_send) for r in result.records
            ) / len(result.records) / 1e9
            achieved = len(result.records) / result.wall_time_s
            assert achieved == pytest.approx(3 / mean_request_s, rel=0.10)
            assert result.offered_qps is None
            assert result.fidelity.fidelity_ratio is None
            assert result.fidelity.mode == "closed_loop"
        finally:
            handle.stop()

    def test_zero_concurrency_rejected(self, zero_delay_mock):
        cfg = engine_config(zero_delay_mock.url)
        with pytest.raises(InvalidParam):
            run_closed_loop(cfg, 0, make_workload(2))


class TestFidelityFromRecords:
    def record(self, intended_ms: float, actual_ms: float) -> RequestRecord:
        return RequestRecord(
            request_id=f"r{intended_ms}",
            intended_dispatch=round(intended_ms * MS),
            actual_send=round(actual_ms * MS),
            token_arrivals=[round(actual_ms * MS) + MS],
            completion=round(actual_ms * MS) + MS,
            input_tokens=4,
            output_tokens=1,
        )

    def test_exact_threshold_boundary(self):
        # p99 delay exactly at 1 ms is a failure; just below passes
        late = [self.record(i, i + 1.0) for i in range(10)]
        report = fidelity_from_records(late, offered_rate=1000.0)
        assert report.sched_delay_p99_s >= SCHED_DELAY_LIMIT_S
        assert not report.valid

        tight = [self.record(i, i + 0.99) for i in range(10)]
        report = fidelity_from_records(tight, offered_rate=1000.0)
        assert report.sched_delay_p99_s < SCHED_DELAY_LIMIT_S

    def test_ratio_threshold(self):
        # dispatch stretched to double the schedule span: ratio ~ 0.5
        slow = [self.record(i, 2.0 * i) for i in range(20)]
        report = fidelity_from_records(slow, offered_rate=1000.0)
        assert report.fidelity_ratio == pytest.approx(0.5, abs=0.05)
        assert not report.valid

    def test_empty_records_invalid(self):
        report = fidelity_from_records([], offered_rate=10.0)
        assert not report.valid
        assert report.dispatched_qps == 0.0

    def test_open_loop_requires_rate(self):
        with pytest.raises(InvalidParam):
            fidelity_from_records([self.record(0, 0)], offered_rate=None)


class TestAutoSize:
    def calibration(self, service_rate: float = 10_000.0) -> ClientCalibration:
        mean = 1.0 / service_rate
        return ClientCalibration(
            service_mean_s=mean,
            service_second_moment=2 * mean**2,
            service_rate=service_rate,
            request_duration_s=0.004,
            tokens_per_request=100,
            sample_size=1000,
        )

    def base(self) -> EngineConfig:
        return EngineConfig(target="http://x", rho_max=0.5)

    def test_tiny_rate_single_worker(self):
        cfg = auto_size(0.5, self.calibration(), base_config=self.base(), host_cores=64)
        assert cfg.max_workers == 1

    def test_min_workers_example(self):
        # 999 tok/s arrival at service rate 100 tok/s, rho_max 0.8 -> 13 workers
        cal = self.calibration(service_rate=100.0)
        base = EngineConfig(target="http://x", rho_max=0.8)
        cfg = auto_size(999.0, cal, base_config=base, tokens_per_request=1, host_cores=16)
        assert cfg.max_workers == 13

    def test_insufficient_hardware(self):
        cal = self.calibration(service_rate=100.0)
        with pytest.raises(InsufficientHardware) as err:
            auto_size(
                10_000.0, cal, base_config=self.base(), tokens_per_request=1, host_cores=16
            )
        assert "workers" in str(err.value) and "16" in str(err.value)

    def test_concurrency_scales_with_inflight(self):
        cfg = auto_size(1000.0, self.calibration(service_rate=1e6),
                        base_config=self.base(), tokens_per_request=10, host_cores=8)
        # 1000 req/s x 4 ms = 4 in flight, x8 safety, floor 32
        assert cfg.worker_max_concurrency == 32
        big = auto_size(5000.0, self.calibration(service_rate=1e7),
                        base_config=self.base(), tokens_per_request=10, host_cores=8)
        assert big.worker_max_concurrency == 5000 * 0.004 * 8


class TestEngineConfigValidation:
    def test_bad_values(self):
        with pytest.raises(InvalidParam):
            EngineConfig(target="http://x", max_workers=0)
        with pytest.raises(InvalidParam):
            EngineConfig(target="http://x", timeout_s=0)
        with pytest.raises(InvalidParam):
            EngineConfig(target="http://x", mode="closed_loop")
        with pytest.raises(InvalidParam):
            EngineConfig(target="http://x", mode="half_open")
