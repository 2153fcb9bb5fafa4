"""Open-loop, partitioned load engine.

The orchestrator spawns ``max_workers`` isolated OS processes; each runs its
own asyncio event loop and httpx client, so no interpreter lock or event
loop is shared between workers.  Schedule offsets are assigned round-robin,
so every worker sees 1/k of the arrival rate with the same inter-arrival
character, and the per-worker utilization argument for sizing k applies
directly.

Dispatch discipline:

* Schedules are pre-materialized; the dispatcher only sleeps and fires.
* A late worker sends immediately (never skips, never re-times); lateness is
  visible in scheduling-delay statistics rather than masked.
* Token arrival timestamps are taken when bytes land from the transport,
  before any chunk parsing.
* Dispatch never waits on responses (open loop); a closed-loop mode with a
  fixed in-flight count exists strictly as a labeled comparison mode.
"""

from __future__ import annotations

import asyncio
import dataclasses
import json
import math
import multiprocessing as mp
import os
import socket
import time
import traceback
import urllib.parse
from dataclasses import dataclass

import httpx

from .errors import InsufficientHardware, InvalidParam, TargetUnreachable
from .metrics import (
    STATUS_ERROR,
    STATUS_SUCCESS,
    STATUS_TIMEOUT,
    RequestRecord,
    StageSummary,
    aggregate,
    mark_warmup,
    nearest_rank,
)
from .queueing import ServiceDistribution, min_workers
from .schedule import ArrivalSchedule
from .timeutil import NS_PER_S, now_ns, sleep_until
from .workload import DEFAULT_SAMPLING, PromptInstance

MODE_OPEN_LOOP = "open_loop"
MODE_CLOSED_LOOP = "closed_loop"

# Scheduling delays above this are a fidelity failure; the bound is exact.
SCHED_DELAY_LIMIT_S = 0.001

# Lead time between worker readiness and the stage epoch.
_START_MARGIN_S = 0.5

# Stages shorter than this many requests skip warm-up flagging entirely.
_MIN_REQUESTS_FOR_WARMUP = 20


@dataclass(frozen=True)
class EngineConfig:
    """Engine knobs: worker topology, target, timeouts, and thresholds."""

    target: str
    max_workers: int = 1
    worker_max_concurrency: int = 256
    timeout_s: float = 30.0
    mode: str = MODE_OPEN_LOOP
    closed_loop_concurrency: int | None = None
    auto_size: bool = False
    model_name: str = "mock-model"
    rho_max: float = 0.5
    fidelity_ratio_threshold: float = 0.99
    error_abort_fraction: float = 0.05
    warmup_fraction: float = 0.10
    stream: bool = True

    def __post_init__(self) -> None:
        if self.max_workers < 1:
            raise InvalidParam("max_workers must be >= 1")
        if self.worker_max_concurrency < 1:
            raise InvalidParam("worker_max_concurrency must be >= 1")
        if self.timeout_s <= 0:
            raise InvalidParam("timeout_s must be > 0")
        if self.mode not in (MODE_OPEN_LOOP, MODE_CLOSED_LOOP):
            raise InvalidParam(f"unknown mode {self.mode!r}")
        if self.mode == MODE_CLOSED_LOOP and (
            self.closed_loop_concurrency is None or self.closed_loop_concurrency < 1
        ):
            raise InvalidParam("closed_loop mode requires closed_loop_concurrency >= 1")
        if not 0 < self.rho_max < 1:
            raise InvalidParam("rho_max must be in (0, 1)")
        if not 0 < self.fidelity_ratio_threshold <= 1:
            raise InvalidParam("fidelity_ratio_threshold must be in (0, 1]")
        if not 0 <= self.warmup_fraction < 1:
            raise InvalidParam("warmup_fraction must be in [0, 1)")

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "EngineConfig":
        return cls(**d)


@dataclass(frozen=True)
class FidelityReport:
    """Scheduling precision and dispatch throughput of one stage.

    ``valid`` is a pure function of the stated thresholds: all three delay
    percentiles under 1 ms and dispatched/offered at or above the ratio
    threshold.  Closed-loop stages have no offered rate, so the ratio is
    undefined there and validity rests on delays alone.
    """

    sched_delay_p50_s: float
    sched_delay_p90_s: float
    sched_delay_p99_s: float
    dispatched_qps: float
    offered_qps: float | None
    fidelity_ratio: float | None
    valid: bool
    mode: str = MODE_OPEN_LOOP
    ratio_threshold: float = 0.99

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "FidelityReport":
        return cls(**d)


@dataclass
class StageResult:
    """Everything one stage produced: records, fidelity, timing, abort flag."""

    records: list[RequestRecord]
    fidelity: FidelityReport
    wall_time_s: float
    offered_qps: float | None
    warmup_ns: int
    aborted: bool = False
    mode: str = MODE_OPEN_LOOP

    def summary(self) -> StageSummary | None:
        if not self.records:
            return None
        wall = self.measurement_wall_s()
        return aggregate(self.records, self.offered_qps, wall)

    def measurement_wall_s(self) -> float:
        """Wall time of the post-warm-up measurement window, seconds."""
        if not self.records:
            return 0.0
        last = max(r.completion for r in self.records)
        return max((last - self.warmup_ns) / NS_PER_S, 1e-9)


def fidelity_from_records(
    records: list[RequestRecord],
    offered_rate: float | None,
    *,
    ratio_threshold: float = 0.99,
    mode: str = MODE_OPEN_LOOP,
    wall_time_s: float | None = None,
) -> FidelityReport:
    """Compute the fidelity report from intended vs actual send times.

    Dispatch span and schedule span each include one mean inter-arrival gap
    so a single-request stage still yields a finite rate; the ratio is then
    schedule span over actual span, which equals dispatched/offered.
    """
    if not records:
        return FidelityReport(
            sched_delay_p50_s=float("inf"),
            sched_delay_p90_s=float("inf"),
            sched_delay_p99_s=float("inf"),
            dispatched_qps=0.0,
            offered_qps=offered_rate,
            fidelity_ratio=0.0 if offered_rate else None,
            valid=False,
            mode=mode,
            ratio_threshold=ratio_threshold,
        )
    delays = sorted((r.actual_send - r.intended_dispatch) / NS_PER_S for r in records)
    p50 = nearest_rank(delays, 50)
    p90 = nearest_rank(delays, 90)
    p99 = nearest_rank(delays, 99)
    n = len(records)

    if mode == MODE_OPEN_LOOP:
        if not offered_rate or offered_rate <= 0:
            raise InvalidParam("open-loop fidelity requires the offered rate")
        gap_s = 1.0 / offered_rate
        sched_span = max(r.intended_dispatch for r in records) / NS_PER_S + gap_s
        actual_span = max(r.actual_send for r in records) / NS_PER_S + gap_s
        dispatched_qps = n / actual_span
        ratio = sched_span / actual_span
        valid = ratio >= ratio_threshold and p99 < SCHED_DELAY_LIMIT_S
    else:
        wall = wall_time_s or (max(r.actual_send for r in records) / NS_PER_S or 1e-9)
        dispatched_qps = n / wall
        ratio = None
        valid = p99 < SCHED_DELAY_LIMIT_S
    valid = valid and p50 < SCHED_DELAY_LIMIT_S and p90 < SCHED_DELAY_LIMIT_S
    return FidelityReport(
        sched_delay_p50_s=p50,
        sched_delay_p90_s=p90,
        sched_delay_p99_s=p99,
        dispatched_qps=dispatched_qps,
        offered_qps=offered_rate,
        fidelity_ratio=ratio,
        valid=valid,
        mode=mode,
        ratio_threshold=ratio_threshold,
    )


# ---------------------------------------------------------------------------
# Worker process internals
# ---------------------------------------------------------------------------


def _sse_events(buf: bytearray):
    """Split complete SSE frames out of the buffer, yielding data payloads."""
    while True:
        idx = buf.find(b"\n\n")
        if idx < 0:
            return
        frame = bytes(buf[:idx])
        del buf[: idx + 2]
        for line in frame.split(b"\n"):
            line = line.strip(b"\r")
            if line.startswith(b"data:"):
                yield line[5:].strip()


async def _consume_stream(resp, on_read=None) -> tuple[list[int], int, dict | None, int | None]:
    """Drain an SSE response; returns (arrival ts per token, tokens, usage, done ts).

    The timestamp is taken the moment a raw read returns, before parsing;
    every token completed by that read shares it.  A chunk declaring a
    multi-token count contributes that many arrivals at one timestamp.
    """
    buf = bytearray()
    arrivals: list[int] = []
    usage: dict | None = None
    done_ts: int | None = None
    async for raw in resp.aiter_raw():
        ts = time.monotonic_ns()
        buf.extend(raw)
        read_tokens = 0
        for payload in _sse_events(buf):
            if payload == b"[DONE]":
                done_ts = ts
                continue
            try:
                obj = json.loads(payload)
            except json.JSONDecodeError:
                continue
            if "usage" in obj and obj["usage"]:
                usage = obj["usage"]
            count = 0
            choices = obj.get("choices") or []
            if choices and (choices[0].get("delta") or {}).get("content"):
                count = int(obj.get("token_count", 1))
            read_tokens += count
            arrivals.extend([ts] * count)
        if on_read is not None and read_tokens:
            on_read(ts, read_tokens)
    return arrivals, len(arrivals), usage, done_ts


def _request_body(cfg: EngineConfig, prompt: str, max_tokens: int, sampling: dict) -> dict:
    body = {
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "max_tokens": max_tokens,
        "stream": cfg.stream,
    }
    body.update(sampling)
    if cfg.stream:
        body["stream_options"] = {"include_usage": True}
    return body


async def _send_one(
    client: httpx.AsyncClient,
    cfg: EngineConfig,
    item: tuple,
    epoch_ns: int,
    sampling: dict,
    sem: asyncio.Semaphore,
    records: list[RequestRecord],
    counters: dict,
    on_read=None,
) -> None:
    request_id, offset_ns, prompt, input_tokens, max_tokens = item
    body = _request_body(cfg, prompt, max_tokens, sampling)
    async with sem:
        send_abs = time.monotonic_ns()
        arrivals: list[int] = []
        usage = None
        done_ts: int | None = None
        status = STATUS_SUCCESS
        error_kind = None
        try:
            async with client.stream(
                "POST",
                "/v1/chat/completions",
                json=body,
                headers={"x-request-id": request_id},
            ) as resp:
                if resp.status_code != 200:
                    await resp.aread()
                    status = STATUS_ERROR
                    error_kind = f"http_{resp.status_code}"
                elif cfg.stream:
                    arrivals, _, usage, done_ts = await _consume_stream(resp, on_read)
                else:
                    await resp.aread()
                    ts = time.monotonic_ns()
                    payload = resp.json()
                    usage = payload.get("usage") or {}
                    n = int(usage.get("completion_tokens", 1)) or 1
                    arrivals = [ts] * n
                    done_ts = ts
        except httpx.TimeoutException:
            status = STATUS_TIMEOUT
            error_kind = "timeout"
        except (httpx.HTTPError, OSError) as exc:
            status = STATUS_ERROR
            error_kind = type(exc).__name__

        end_abs = done_ts or (arrivals[-1] if arrivals else time.monotonic_ns())
        if status == STATUS_SUCCESS and not arrivals:
            status = STATUS_ERROR
            error_kind = "empty_stream"
        records.append(
            RequestRecord(
                request_id=request_id,
                intended_dispatch=offset_ns,
                actual_send=send_abs - epoch_ns,
                token_arrivals=[t - epoch_ns for t in arrivals],
                completion=end_abs - epoch_ns,
                input_tokens=input_tokens,
                output_tokens=len(arrivals),
                status=status,
                error_kind=error_kind,
                server_output_tokens=(
                    int(usage.get("completion_tokens")) if usage and
                    usage.get("completion_tokens") is not None else None
                ),
            )
        )
        counters["done"] += 1
        if status != STATUS_SUCCESS:
            counters["failed"] += 1


def _make_client(cfg: EngineConfig) -> httpx.AsyncClient:
    limits = httpx.Limits(
        max_connections=cfg.worker_max_concurrency,
        max_keepalive_connections=cfg.worker_max_concurrency,
    )
    timeout = httpx.Timeout(cfg.timeout_s, connect=min(cfg.timeout_s, 10.0))
    return httpx.AsyncClient(base_url=cfg.target, limits=limits, timeout=timeout)


async def _open_loop_worker(
    cfg: EngineConfig,
    items: list[tuple],
    sampling: dict,
    epoch_ns: int,
    stop_event,
) -> tuple[list[RequestRecord], bool]:
    records: list[RequestRecord] = []
    counters = {"done": 0, "failed": 0}
    aborted = False
    async with _make_client(cfg) as client:
        sem = asyncio.Semaphore(cfg.worker_max_concurrency)
        pending: set[asyncio.Task] = set()
        for item in items:
            if stop_event is not None and stop_event.is_set():
                aborted = True
                break
            if counters["done"] >= 20 and (
                counters["failed"] / counters["done"] > cfg.error_abort_fraction
            ):
                aborted = True
                break
            await sleep_until(epoch_ns + item[1])
            task = asyncio.create_task(
                _send_one(client, cfg, item, epoch_ns, sampling, sem, records, counters)
            )
            pending.add(task)
            task.add_done_callback(pending.discard)
        if pending:
            wait_for = asyncio.gather(*pending, return_exceptions=True)
            if aborted:
                try:
                    await asyncio.wait_for(asyncio.shield(wait_for), timeout=5.0)
                except asyncio.TimeoutError:
                    for task in list(pending):
                        task.cancel()
                    await asyncio.gather(*pending, return_exceptions=True)
            else:
                await wait_for
    return records, aborted


async def _closed_loop_worker(
    cfg: EngineConfig,
    items: list[tuple],
    sampling: dict,
    concurrency: int,
    epoch_ns: int,
    stop_event,
) -> tuple[list[RequestRecord], bool]:
    records: list[RequestRecord] = []
    counters = {"done": 0, "failed": 0}
    queue = list(reversed(items))
    aborted = False
    async with _make_client(cfg) as client:
        sem = asyncio.Semaphore(cfg.worker_max_concurrency)
        await sleep_until(epoch_ns)

        async def puller() -> None:
            nonlocal aborted
            while queue:
                if stop_event is not None and stop_event.is_set():
                    aborted = True
                    return
                request_id, _, prompt, input_tokens, max_tokens = queue.pop()
                # closed loop has no schedule: intent is the moment of send
                offset = time.monotonic_ns() - epoch_ns
                item = (request_id, offset, prompt, input_tokens, max_tokens)
                await _send_one(client, cfg, item, epoch_ns, sampling, sem, records, counters)

        await asyncio.gather(*(puller() for _ in range(concurrency)))
    return records, aborted


def _worker_entry(
    worker_index: int,
    cfg: EngineConfig,
    items: list[tuple],
    sampling: dict,
    mode: str,
    concurrency_share: int,
    conn,
    stop_event,
) -> None:
    import gc

    try:
        # collector pauses are milliseconds; measurement code is essentially
        # acyclic, so run the stage without the cyclic collector
        gc.collect()
        gc.disable()
        conn.send(("ready", worker_index))
        message = conn.recv()
        if message[0] != "go":
            conn.send(("result", worker_index, [], True))
            return
        epoch_ns = message[1]
        if mode == MODE_OPEN_LOOP:
            records, aborted = asyncio.run(
                _open_loop_worker(cfg, items, sampling, epoch_ns, stop_event)
            )
        else:
            records, aborted = asyncio.run(
                _closed_loop_worker(cfg, items, sampling, concurrency_share, epoch_ns, stop_event)
            )
        conn.send(("result", worker_index, records, aborted))
    except Exception:
        try:
            conn.send(("error", worker_index, traceback.format_exc()))
        except (BrokenPipeError, OSError):
            pass
    finally:
        conn.close()


# ---------------------------------------------------------------------------
# Orchestrator
# ---------------------------------------------------------------------------


def probe_target(target: str, timeout_s: float = 5.0) -> None:
    """TCP-connect probe; raises TargetUnreachable on failure."""
    parts = urllib.parse.urlsplit(target)
    host = parts.hostname or "127.0.0.1"
    port = parts.port or (443 if parts.scheme == "https" else 80)
    try:
        with socket.create_connection((host, port), timeout=timeout_s):
            pass
    except OSError as exc:
        raise TargetUnreachable(f"cannot connect to {target}: {exc}") from exc


def _items_from_workload(
    schedule_offsets: list[int], workload: list[PromptInstance]
) -> list[tuple]:
    return [
        (f"r{i:06d}", offset, p.payload, p.input_token_count, p.max_output_tokens)
        for i, (offset, p) in enumerate(zip(schedule_offsets, workload))
    ]


def _run_partitioned(
    cfg: EngineConfig,
    items: list[tuple],
    sampling: dict,
    mode: str,
    concurrency: int,
    horizon_ns: int,
) -> tuple[list[RequestRecord], bool, int]:
    """Spawn workers, synchronize an epoch, run, and merge results."""
    k = cfg.max_workers
    partitions = [items[w::k] for w in range(k)]
    shares = [concurrency // k + (1 if w < concurrency % k else 0) for w in range(k)]

    ctx = mp.get_context("spawn")
    stop_event = ctx.Event()
    conns = []
    procs = []
    for w in range(k):
        parent_conn, child_conn = ctx.Pipe()
        proc = ctx.Process(
            target=_worker_entry,
            args=(w, cfg, partitions[w], sampling, mode, shares[w], child_conn, stop_event),
            daemon=True,
        )
        proc.start()
        child_conn.close()
        conns.append(parent_conn)
        procs.append(proc)

    records: list[RequestRecord] = []
    aborted = False
    epoch_ns = 0
    try:
        for conn in conns:
            if not conn.poll(timeout=120.0):
                raise RuntimeError("worker did not become ready within 120s")
            message = conn.recv()
            if message[0] != "ready":
                raise RuntimeError(f"unexpected worker message: {message[0]}")
        epoch_ns = now_ns() + round(_START_MARGIN_S * NS_PER_S)
        for conn in conns:
            conn.send(("go", epoch_ns))

        result_deadline = (
            time.monotonic()
            + _START_MARGIN_S
            + horizon_ns / NS_PER_S
            + cfg.timeout_s
            + 120.0
        )
        outstanding = list(conns)
        while outstanding:
            try:
                conn = outstanding[0]
                if not conn.poll(timeout=max(0.1, result_deadline - time.monotonic())):
                    aborted = True
                    break
                message = conn.recv()
                if message[0] == "result":
                    records.extend(message[2])
                    aborted = aborted or message[3]
                elif message[0] == "error":
                    raise RuntimeError(f"worker {message[1]} failed:\n{message[2]}")
                outstanding.pop(0)
            except KeyboardInterrupt:
                # graceful teardown: stop dispatching, collect partial records
                stop_event.set()
                aborted = True
                result_deadline = time.monotonic() + cfg.timeout_s + 15.0
    finally:
        for proc in procs:
            proc.join(timeout=5.0)
            if proc.is_alive():
                proc.terminate()
                proc.join(timeout=2.0)
        for conn in conns:
            conn.close()

    records.sort(key=lambda r: (r.intended_dispatch, r.request_id))
    return records, aborted, epoch_ns


def run_stage(
    config: EngineConfig,
    schedule: ArrivalSchedule,
    workload: list[PromptInstance],
    sampling: dict | None = None,
) -> StageResult:
    """Dispatch one open-loop stage and return records plus its fidelity report."""
    if config.mode != MODE_OPEN_LOOP:
        raise InvalidParam("run_stage is open-loop; use run_closed_loop for closed mode")
    if len(workload) < schedule.count:
        raise InvalidParam(
            f"workload has {len(workload)} prompts but schedule needs {schedule.count}"
        )
    sampling = dict(DEFAULT_SAMPLING if sampling is None else sampling)
    probe_target(config.target)

    items = _items_from_workload(list(schedule.offsets), workload[: schedule.count])
    horizon_ns = schedule.duration_ns + round(schedule.mean_gap_ns)
    records, aborted, _ = _run_partitioned(
        config, items, sampling, MODE_OPEN_LOOP, 0, horizon_ns
    )

    warmup_ns = 0
    if schedule.count >= _MIN_REQUESTS_FOR_WARMUP and config.warmup_fraction > 0:
        warmup_ns = round(horizon_ns * config.warmup_fraction)
    records = mark_warmup(records, warmup_ns)

    if records:
        failed = sum(1 for r in records if r.status != STATUS_SUCCESS)
        aborted = aborted or failed / len(records) > config.error_abort_fraction
        wall = max(max(r.completion for r in records), horizon_ns) / NS_PER_S
    else:
        aborted = True
        wall = horizon_ns / NS_PER_S

    fidelity = fidelity_from_records(
        records,
        schedule.rate,
        ratio_threshold=config.fidelity_ratio_threshold,
        mode=MODE_OPEN_LOOP,
    )
    return StageResult(
        records=records,
        fidelity=fidelity,
        wall_time_s=wall,
        offered_qps=schedule.rate,
        warmup_ns=warmup_ns,
        aborted=aborted,
        mode=MODE_OPEN_LOOP,
    )


def run_closed_loop(
    config: EngineConfig,
    concurrency: int,
    workload: list[PromptInstance],
    sampling: dict | None = None,
) -> StageResult:
    """Maintain a fixed in-flight count; labeled comparison mode only.

    There is no offered rate: a new request is dispatched whenever one
    completes, so the achieved rate is capped by response latency and the
    results must never be read as open-loop throughput.
    """
    if concurrency < 1:
        raise InvalidParam("concurrency must be >= 1")
    if not workload:
        raise InvalidParam("workload is empty")
    sampling = dict(DEFAULT_SAMPLING if sampling is None else sampling)
    probe_target(config.target)

    cfg = config
    if cfg.max_workers > concurrency:
        cfg = dataclasses.replace(cfg, max_workers=concurrency)
    items = _items_from_workload([0] * len(workload), workload)
    horizon_ns = round(len(workload) * cfg.timeout_s * NS_PER_S)
    records, aborted, _ = _run_partitioned(
        cfg, items, sampling, MODE_CLOSED_LOOP, concurrency, horizon_ns
    )

    wall = max((r.completion for r in records), default=0) / NS_PER_S or 1e-9
    fidelity = fidelity_from_records(
        records, None, mode=MODE_CLOSED_LOOP, wall_time_s=wall,
        ratio_threshold=cfg.fidelity_ratio_threshold,
    )
    return StageResult(
        records=records,
        fidelity=fidelity,
        wall_time_s=wall,
        offered_qps=None,
        warmup_ns=0,
        aborted=aborted,
        mode=MODE_CLOSED_LOOP,
    )


# ---------------------------------------------------------------------------
# Calibration and auto-sizing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientCalibration:
    """Measured client-side token-processing capability of one worker.

    ``service_rate`` is the sustainable tokens/second of a single worker's
    event loop against a zero-delay server; the second moment feeds the
    waiting-time formula.  ``request_duration_s`` is the mean zero-load
    request wall time, used to size per-worker in-flight capacity.
    """

    service_mean_s: float
    service_second_moment: float
    service_rate: float
    request_duration_s: float
    tokens_per_request: int
    sample_size: int
    service_sample: tuple[float, ...] = ()

    def service_distribution(self) -> ServiceDistribution:
        if self.service_sample:
            return ServiceDistribution.from_sample(self.service_sample)
        return ServiceDistribution(
            kind="general",
            mean=self.service_mean_s,
            second_moment=self.service_second_moment,
            sample=(self.service_mean_s,),
        )

    def single_worker_capacity_qps(self, tokens_per_request: int | None = None) -> float:
        """Request rate at which one worker's token utilization reaches 1."""
        t = tokens_per_request or self.tokens_per_request
        return self.service_rate / t

    def to_json_dict(self) -> dict:
        return {
            "service_mean_s": self.service_mean_s,
            "service_second_moment": self.service_second_moment,
            "service_rate": self.service_rate,
            "request_duration_s": self.request_duration_s,
            "tokens_per_request": self.tokens_per_request,
            "sample_size": self.sample_size,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ClientCalibration":
        return cls(
            service_mean_s=d["service_mean_s"],
            service_second_moment=d["service_second_moment"],
            service_rate=d["service_rate"],
            request_duration_s=d["request_duration_s"],
            tokens_per_request=d["tokens_per_request"],
            sample_size=d["sample_size"],
        )


def calibrate_client(
    target: str,
    *,
    requests: int = 48,
    tokens_per_request: int = 128,
    burst_concurrency: int = 24,
    sequential_requests: int = 8,
    model_name: str = "mock-model",
    timeout_s: float = 30.0,
) -> ClientCalibration:
    """Measure one worker's token-processing service time against a target.

    Run against a co-located zero-delay mock so that server time is
    negligible.  Phase one sends a few sequential requests for the zero-load
    request duration.  Phase two saturates a single event loop with a
    concurrent burst and records, for every raw read, the gap from the
    previous read; a read completing j tokens contributes j service samples
    of gap/j.  Gaps far above the median are idle time (the loop waiting on
    the server), not service, and are dropped.
    """
    probe_target(target)
    cfg = EngineConfig(
        target=target,
        max_workers=1,
        worker_max_concurrency=max(burst_concurrency, 8),
        timeout_s=timeout_s,
        model_name=model_name,
    )
    prompt = "calibration " * 8
    sampling = dict(DEFAULT_SAMPLING)

    async def _run() -> tuple[list[float], float]:
        async with _make_client(cfg) as client:
            counters = {"done": 0, "failed": 0}
            sem = asyncio.Semaphore(cfg.worker_max_concurrency)
            epoch = time.monotonic_ns()

            durations: list[float] = []
            for i in range(sequential_requests):
                recs: list[RequestRecord] = []
                item = (f"cal-seq-{i}", 0, prompt, 8, tokens_per_request)
                await _send_one(client, cfg, item, epoch, sampling, sem, recs, counters)
                if recs and recs[0].is_success:
                    durations.append((recs[0].completion - recs[0].actual_send) / NS_PER_S)

            events: list[tuple[int, int]] = []

            def on_read(ts: int, tokens: int) -> None:
                events.append((ts, tokens))

            recs = []
            burst = [
                (f"cal-burst-{i}", 0, prompt, 8, tokens_per_request) for i in range(requests)
            ]
            await asyncio.gather(
                *(
                    _send_one(client, cfg, item, epoch, sampling, sem, recs, counters, on_read)
                    for item in burst
                )
            )

            events.sort(key=lambda e: e[0])
            sample: list[float] = []
            for (prev_ts, _), (ts, tokens) in zip(events, events[1:]):
                gap_s = (ts - prev_ts) / NS_PER_S
                sample.extend([gap_s / tokens] * tokens)
            if not durations or not sample:
                raise RuntimeError("calibration produced no usable measurements")
            return sample, sum(durations) / len(durations)

    raw_sample, request_duration = asyncio.run(_run())

    positive = sorted(s for s in raw_sample if s > 0)
    median = positive[len(positive) // 2] if positive else 0.0
    idle_cutoff = max(20.0 * median, 0.002)
    sample = [s for s in raw_sample if s <= idle_cutoff]
    mean = math.fsum(sample) / len(sample)
    second = math.fsum(s * s for s in sample) / len(sample)
    return ClientCalibration(
        service_mean_s=mean,
        service_second_moment=second,
        service_rate=1.0 / mean,
        request_duration_s=request_duration,
        tokens_per_request=tokens_per_request,
        sample_size=len(sample),
        service_sample=tuple(sample),
    )


def auto_size(
    target_rate: float,
    calibration: ClientCalibration,
    *,
    base_config: EngineConfig,
    tokens_per_request: int | None = None,
    host_cores: int | None = None,
    inflight_safety: float = 8.0,
) -> EngineConfig:
    """Size worker count and per-worker concurrency for a target request rate.

    Worker count is the smallest k keeping per-worker token utilization at or
    below rho_max; exceeding the host core count is an explicit error, never
    a silent degradation.
    """
    if target_rate <= 0:
        raise InvalidParam("target_rate must be > 0")
    tokens = tokens_per_request or calibration.tokens_per_request
    token_rate = target_rate * tokens
    k = min_workers(token_rate, calibration.service_rate, base_config.rho_max)
    cores = host_cores or os.cpu_count() or 1
    if k > cores:
        raise InsufficientHardware(
            f"target {target_rate:g} req/s x {tokens} tok = {token_rate:g} tok/s needs "
            f"{k} workers at service rate {calibration.service_rate:.0f} tok/s and "
            f"rho_max {base_config.rho_max}, but host has {cores} cores"
        )
    inflight = target_rate * max(calibration.request_duration_s, 1e-3) / k
    concurrency = max(32, math.ceil(inflight * inflight_safety))
    return dataclasses.replace(
        base_config, max_workers=k, worker_max_concurrency=concurrency, auto_size=True
    )
