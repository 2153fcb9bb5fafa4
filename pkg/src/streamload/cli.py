"""Command-line interface: run, sweep, calibrate, mock, analyze, version.

Exit codes: 0 success (sweep: saturation found), 1 runtime error, 2 config
error, 3 sweep completed without reaching saturation, 4 run was
client-limited (fidelity invalid); increase workers or hardware before
trusting the numbers.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import statistics
import sys
from pathlib import Path

from . import __version__
from .config import MockConfig, RunConfig, derive_seed, load_config
from .engine import (
    MODE_CLOSED_LOOP,
    ClientCalibration,
    EngineConfig,
    StageResult,
    auto_size,
    calibrate_client,
    fidelity_from_records,
    run_closed_loop,
    run_stage,
)
from .errors import ConfigError, InsufficientData, StreamloadError
from .metrics import aggregate, read_trace
from .mockserver import MockBehavior, measure_capacity, serve
from .profile import (
    EXIT_CLIENT_LIMITED,
    EXIT_CONFIG_ERROR,
    LatencyProfile,
    SaturationThresholds,
    build_profile,
    emit_report,
    make_point,
    sweep_exit_code,
)
from .queueing import min_workers
from .timeutil import NS_PER_S, format_duration
from .workload import materialize

ENV_REPORT_DIR = "STREAMLOAD_REPORT_DIR"
ENV_LOG_LEVEL = "STREAMLOAD_LOG_LEVEL"


def _expected_output_tokens(value) -> int:
    if isinstance(value, tuple):
        return round((value[0] + value[1]) / 2)
    return int(value)


def _print_fidelity(index: int, result: StageResult) -> None:
    f = result.fidelity
    verdict = "OK" if f.valid else "CLIENT-LIMITED"
    ratio = f"{f.fidelity_ratio:.4f}" if f.fidelity_ratio is not None else "n/a"
    offered = f"{f.offered_qps:g}" if f.offered_qps is not None else "n/a"
    print(
        f"stage {index}: fidelity {verdict} | offered {offered} req/s, "
        f"dispatched {f.dispatched_qps:.2f} req/s, ratio {ratio} | "
        f"sched delay p50/p90/p99 "
        f"{format_duration(f.sched_delay_p50_s)}/"
        f"{format_duration(f.sched_delay_p90_s)}/"
        f"{format_duration(f.sched_delay_p99_s)}"
        + (" | ABORTED" if result.aborted else "")
    )


def execute_run(cfg: RunConfig, report_dir: str | None = None) -> tuple[int, Path]:
    """Run all stages of a config, emit the report, return (exit code, report dir)."""
    out_dir = Path(report_dir or os.environ.get(ENV_REPORT_DIR) or cfg.report_dir)
    plans = cfg.stage_plans()
    handle = None
    calibration = None
    engine_cfg = cfg.engine
    try:
        if cfg.mock is not None:
            log_dir = out_dir / "mock_log" if cfg.mock.log_timestamps else None
            handle = serve(
                cfg.mock.behavior,
                cfg.mock.bind,
                server_workers=cfg.mock.server_workers,
                log_dir=log_dir,
            )
            print(f"mock server: {handle.url} ({cfg.mock.server_workers} worker(s))")
            if not engine_cfg.target:
                engine_cfg = dataclasses.replace(engine_cfg, target=handle.url)

        tokens_per_request = _expected_output_tokens(cfg.workload.output_tokens)
        if engine_cfg.auto_size:
            calibration = _calibrate_against_local_mock(
                tokens_per_request, engine_cfg.model_name
            )
            engine_cfg = auto_size(
                max(p.rate for p in plans),
                calibration,
                base_config=engine_cfg,
                tokens_per_request=tokens_per_request,
            )
            print(
                f"auto-size: {engine_cfg.max_workers} worker(s), "
                f"{engine_cfg.worker_max_concurrency} in-flight/worker "
                f"(service rate {calibration.service_rate:.0f} tok/s)"
            )

        max_count = max(p.resolve_count() for p in plans)
        instances, manifest = materialize(cfg.workload, max_count)
        sampling = cfg.workload.effective_sampling()

        results: list[StageResult] = []
        schedules = []
        for index, plan in enumerate(plans):
            schedule = cfg.schedule_for_stage(index, plan)
            schedules.append(schedule)
            if engine_cfg.mode == MODE_CLOSED_LOOP:
                result = run_closed_loop(
                    engine_cfg,
                    engine_cfg.closed_loop_concurrency,
                    instances[: schedule.count],
                    sampling,
                )
            else:
                result = run_stage(engine_cfg, schedule, instances, sampling)
            results.append(result)
            _print_fidelity(index, result)

        exit_code, profile = _finalize_report(
            cfg, engine_cfg, calibration, manifest, results, schedules, out_dir
        )
        if profile.saturation is not None:
            point = profile.points[profile.saturation.index]
            print(
                f"saturation: stage {profile.saturation.index} "
                f"({point.offered_qps:g} req/s offered), reason: "
                f"{profile.saturation.reason}; ideal zone: stage {profile.ideal_zone}"
            )
        elif len(profile.points) > 1:
            print("saturation: not reached within the sweep")
        print(f"report: {out_dir}")
        return exit_code, out_dir
    finally:
        if handle is not None:
            handle.stop()


def _calibrate_against_local_mock(tokens_per_request: int, model_name: str) -> ClientCalibration:
    """Client capability is measured against a throwaway zero-delay local mock."""
    probe = serve(MockBehavior(output_tokens=None), "127.0.0.1:0", server_workers=1)
    try:
        return calibrate_client(
            probe.url, tokens_per_request=tokens_per_request, model_name=model_name
        )
    finally:
        probe.stop()


def _finalize_report(
    cfg: RunConfig,
    engine_cfg: EngineConfig,
    calibration: ClientCalibration | None,
    manifest: dict,
    results: list[StageResult],
    schedules: list,
    out_dir: Path,
) -> tuple[int, LatencyProfile]:
    points = []
    stage_meta = []
    for index, (result, schedule) in enumerate(zip(results, schedules)):
        summary = result.summary()
        if summary is None:
            raise StreamloadError(f"stage {index} produced no records")
        points.append(make_point(summary, result.fidelity, aborted=result.aborted))
        stage_meta.append(
            {
                "index": index,
                "kind": schedule.kind,
                "rate": schedule.rate,
                "seed": schedule.seed,
                "request_count": schedule.count,
                "mode": result.mode,
                "offered_qps": result.offered_qps,
                "warmup_ns": result.warmup_ns,
                "wall_time_s": result.wall_time_s,
                "fidelity_ratio_threshold": engine_cfg.fidelity_ratio_threshold,
                "aborted": result.aborted,
            }
        )

    if len(points) >= 2:
        profile = build_profile(points, cfg.saturation)
    else:
        profile = LatencyProfile(points=tuple(points))

    effective = cfg.to_json_dict()
    effective["engine"] = engine_cfg.to_json_dict()
    client_model = None
    if calibration is not None:
        client_model = calibration.to_json_dict()
        client_model["derived_workers"] = engine_cfg.max_workers
        client_model["rho_max"] = engine_cfg.rho_max

    emit_report(
        profile,
        effective,
        client_model,
        manifest,
        out_dir,
        traces=[r.records for r in results],
        schedules=[s.to_json_dict() for s in schedules],
        stage_meta=stage_meta,
    )

    if len(points) >= 2:
        return sweep_exit_code(profile), profile
    return (0 if points[0].fidelity.valid else EXIT_CLIENT_LIMITED), profile


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    code, _ = execute_run(cfg, report_dir=args.report_dir)
    return code


def cmd_calibrate(args: argparse.Namespace) -> int:
    handle = None
    target = args.target
    try:
        if target is None:
            handle = serve(MockBehavior(), "127.0.0.1:0", server_workers=1)
            target = handle.url
            print(f"calibrating against local zero-delay mock at {target}")
        calibration = calibrate_client(
            target,
            tokens_per_request=args.tokens_per_request,
            requests=args.requests,
        )
    finally:
        if handle is not None:
            handle.stop()

    print(f"service rate (mu):      {calibration.service_rate:.0f} tokens/s")
    print(f"mean service time:      {calibration.service_mean_s * 1e6:.2f} us/token")
    print(f"service second moment:  {calibration.service_second_moment:.3e} s^2")
    print(f"zero-load request time: {calibration.request_duration_s * 1e3:.2f} ms")
    print(f"sample size:            {calibration.sample_size}")
    if args.target_rate:
        token_rate = args.target_rate * args.tokens_per_request
        k = min_workers(token_rate, calibration.service_rate, args.rho_max)
        cores = os.cpu_count() or 1
        print(
            f"workers for {args.target_rate:g} req/s x {args.tokens_per_request} tok "
            f"at rho_max {args.rho_max}: {k}"
        )
        if k > cores:
            print(f"warning: required workers {k} exceed host cores {cores}")
    if args.json:
        Path(args.json).write_text(
            json.dumps(calibration.to_json_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        print(f"wrote {args.json}")
    return 0


def cmd_mock(args: argparse.Namespace) -> int:
    behavior = MockBehavior(
        prefill_delay_s=args.prefill_delay,
        per_token_delay_s=args.per_token_delay,
        jitter_s=args.jitter,
        output_tokens=args.output_tokens,
        failure_rate=args.failure_rate,
        seed=args.seed,
    )
    handle = serve(
        behavior,
        args.bind,
        server_workers=args.server_workers,
        log_dir=args.log_dir,
    )
    try:
        print(f"mock server listening on {handle.url}")
        print(
            f"behavior: prefill {format_duration(behavior.prefill_delay_s)}, "
            f"per-token {format_duration(behavior.per_token_delay_s)}, "
            f"output tokens "
            f"{behavior.output_tokens if behavior.output_tokens else 'echo max_tokens'}, "
            f"failure rate {behavior.failure_rate:g}"
        )
        if not args.no_selftest:
            capacity = measure_capacity(handle.url, seconds=1.5)
            print(f"self-test capacity: ~{capacity:.0f} streaming req/s")
        print("press Ctrl-C to stop")
        while True:
            import time as _time

            _time.sleep(3600)
    except KeyboardInterrupt:
        print("shutting down")
        return 0
    finally:
        handle.stop()


def cmd_analyze(args: argparse.Namespace) -> int:
    trace_dir = Path(args.traces)
    meta_path = trace_dir / "stages.json"
    if not meta_path.exists():
        raise InsufficientData(f"{trace_dir}: no stages.json; nothing to analyze")
    stage_meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if not stage_meta:
        raise InsufficientData(f"{trace_dir}: empty stage index")

    points = []
    for meta in stage_meta:
        records = read_trace(trace_dir / f"stage-{meta['index']:03d}.jsonl")
        last = max(r.completion for r in records)
        wall = max((last - meta["warmup_ns"]) / NS_PER_S, 1e-9)
        summary = aggregate(records, meta["offered_qps"], wall)
        fidelity = fidelity_from_records(
            records,
            meta["offered_qps"],
            ratio_threshold=meta["fidelity_ratio_threshold"],
            mode=meta["mode"],
            wall_time_s=wall,
        )
        points.append(make_point(summary, fidelity, aborted=meta.get("aborted", False)))

    if len(points) >= 2:
        profile = build_profile(points)
    else:
        profile = LatencyProfile(points=tuple(points))

    out_dir = Path(args.out)
    emit_report(
        profile,
        {"analyzed_from": str(trace_dir)},
        None,
        {"analyzed_from": str(trace_dir)},
        out_dir,
        stage_meta=stage_meta,
    )
    print(f"analysis report: {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamload",
        description="Open-loop load generator and latency profiler for "
        "token-streaming inference servers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("run", "execute a single stage or a sweep from a config file"),
        ("sweep", "alias of run for sweep configs"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML config or archived report.json")
        p.add_argument("--report-dir", default=None, help="override the report directory")
        p.set_defaults(func=cmd_run)

    p = sub.add_parser("calibrate", help="measure client service rate and sizing")
    p.add_argument("--target", default=None, help="server URL (default: local zero-delay mock)")
    p.add_argument("--tokens-per-request", type=int, default=128)
    p.add_argument("--requests", type=int, default=48)
    p.add_argument("--target-rate", type=float, default=None, help="print workers for this rate")
    p.add_argument("--rho-max", type=float, default=0.5)
    p.add_argument("--json", default=None, help="write calibration JSON here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("mock", help="run the mock inference server until interrupted")
    p.add_argument("--bind", default="127.0.0.1:8100")
    p.add_argument("--prefill-delay", type=float, default=0.0, help="seconds")
    p.add_argument("--per-token-delay", type=float, default=0.0, help="seconds")
    p.add_argument("--jitter", type=float, default=0.0, help="seconds (stddev)")
    p.add_argument("--output-tokens", type=int, default=None)
    p.add_argument("--failure-rate", type=float, default=0.0)
    p.add_argument("--server-workers", type=int, default=1)
    p.add_argument("--log-dir", default=None, help="write per-request timestamp logs here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-selftest", action="store_true")
    p.set_defaults(func=cmd_mock)

    p = sub.add_parser("analyze", help="recompute reports from archived traces")
    p.add_argument("--traces", required=True, help="traces/ directory of a previous run")
    p.add_argument("--out", required=True, help="output report directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("version", help="print the tool version")
    p.set_defaults(func=lambda args: (print(f"streamload {__version__}"), 0)[1])

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except StreamloadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
