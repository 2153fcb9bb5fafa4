"""Per-request token latency metrics and stage-level aggregation.

Timestamps in a :class:`RequestRecord` are integer nanoseconds on the host's
monotonic clock, relative to the stage epoch.  Metric functions return
seconds.  Conventions (documented, fixed):

* TTFT is ``first token arrival - actual send``.
* TPOT is decode-phase only: ``(last arrival - first arrival) / (tokens - 1)``,
  i.e. the gap-count (N-1) denominator.
* NTPOT is end-to-end latency over output tokens: ``(completion - actual
  send) / tokens``.  End-to-end latency starts at ``actual_send``, never at
  ``intended_dispatch``, so client scheduling delay is reported separately
  and never inflates server-attributed latency.
* A streaming chunk that declares a multi-token count contributes that many
  arrivals sharing one timestamp; intra-chunk gaps are therefore zero.  This
  chunk-level attribution is a documented caveat of streaming transports.
* Percentiles use nearest-rank on the sorted sample (no interpolation), so
  aggregated numbers are exactly reproducible across implementations.
* Sample variance uses the (M-1) denominator; a single sample reports
  variance 0 with ``single_sample`` set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyInput, FormatError, InvalidParam, MetricUndefined
from .timeutil import NS_PER_S

STATUS_SUCCESS = "success"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"

_STATUSES = (STATUS_SUCCESS, STATUS_ERROR, STATUS_TIMEOUT)


# ---------------------------------------------------------------------------
# Record types
# ---------------------------------------------------------------------------


@dataclass
class RequestRecord:
    """Full timestamp trace of one request.

    ``intended_dispatch`` is the schedule's offset for the request;
    ``actual_send`` is when the request was handed to the transport;
    ``token_arrivals`` is one timestamp per received output token, captured
    at byte receipt; ``completion`` is stream close.
    """

    request_id: str
    intended_dispatch: int
    actual_send: int
    token_arrivals: list[int]
    completion: int
    input_tokens: int
    output_tokens: int
    status: str = STATUS_SUCCESS
    error_kind: str | None = None
    warmup: bool = False
    server_output_tokens: int | None = None

    @property
    def is_success(self) -> bool:
        return self.status == STATUS_SUCCESS

    def check(self) -> None:
        """Raise FormatError if the record violates its invariants."""
        if self.status not in _STATUSES:
            raise FormatError(f"unknown status {self.status!r}")
        if self.input_tokens < 1:
            raise FormatError("input_tokens must be >= 1 for a dispatched request")
        if self.is_success:
            if self.output_tokens != len(self.token_arrivals):
                raise FormatError(
                    f"output_tokens={self.output_tokens} != "
                    f"{len(self.token_arrivals)} token arrivals"
                )
            seq = [self.intended_dispatch, self.actual_send, *self.token_arrivals, self.completion]
            if any(a > b for a, b in zip(seq, seq[1:])):
                raise FormatError("timestamps not monotone for success record")


@dataclass(frozen=True)
class NtpotDecomposition:
    """Analytic phase breakdown of one request's serving cost.

    The client cannot observe these server-side phases; this type exists for
    modeling and for constructing synthetic traces in tests.
    """

    queue_wait: float
    input_len: int
    prefill_per_token: float
    output_len: int
    decode_per_token: float

    def __post_init__(self) -> None:
        if min(self.queue_wait, self.prefill_per_token, self.decode_per_token) < 0:
            raise InvalidParam("phase durations must be >= 0")
        if self.input_len < 1 or self.output_len < 1:
            raise InvalidParam("token counts must be >= 1")


@dataclass(frozen=True)
class StatBlock:
    """Summary statistics of one latency metric, in seconds."""

    mean: float
    sample_variance: float
    min: float
    max: float
    p50: float
    p90: float
    p99: float
    count: int
    single_sample: bool = False

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mean,
            "sample_variance": self.sample_variance,
            "min": self.min,
            "max": self.max,
            "p50": self.p50,
            "p90": self.p90,
            "p99": self.p99,
            "count": self.count,
            "single_sample": self.single_sample,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "StatBlock":
        return cls(**d)


@dataclass(frozen=True)
class StageSummary:
    """Aggregated statistics for one load stage."""

    offered_qps: float
    achieved_qps: float
    request_count: int
    ttft_stats: StatBlock | None
    tpot_stats: StatBlock | None
    itl_stats: StatBlock | None
    ntpot_stats: StatBlock | None
    e2e_stats: StatBlock | None
    total_input_tokens: int
    total_output_tokens: int
    token_throughput: float
    sched_delay_stats: dict[str, float]
    error_count: int
    timeout_count: int
    success_count: int
    warmup_count: int = 0

    def to_json_dict(self) -> dict:
        d = {
            "offered_qps": self.offered_qps,
            "achieved_qps": self.achieved_qps,
            "request_count": self.request_count,
            "total_input_tokens": self.total_input_tokens,
            "total_output_tokens": self.total_output_tokens,
            "token_throughput": self.token_throughput,
            "sched_delay_stats": dict(self.sched_delay_stats),
            "error_count": self.error_count,
            "timeout_count": self.timeout_count,
            "success_count": self.success_count,
            "warmup_count": self.warmup_count,
        }
        for name in ("ttft", "tpot", "itl", "ntpot", "e2e"):
            block: StatBlock | None = getattr(self, f"{name}_stats")
            d[f"{name}_stats"] = block.to_json_dict() if block is not None else None
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "StageSummary":
        kwargs = dict(d)
        for name in ("ttft", "tpot", "itl", "ntpot", "e2e"):
            raw = kwargs[f"{name}_stats"]
            kwargs[f"{name}_stats"] = StatBlock.from_json_dict(raw) if raw else None
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Per-request metrics
# ---------------------------------------------------------------------------


def _require_success(record: RequestRecord, min_tokens: int, what: str) -> None:
    if not record.is_success:
        raise MetricUndefined(f"{what} undefined for status {record.status!r}")
    if len(record.token_arrivals) < min_tokens:
        raise MetricUndefined(
            f"{what} needs >= {min_tokens} token arrivals, got {len(record.token_arrivals)}"
        )


def ttft(record: RequestRecord) -> float:
    """Time to first token, seconds."""
    _require_success(record, 1, "ttft")
    return (record.token_arrivals[0] - record.actual_send) / NS_PER_S


def tpot(record: RequestRecord) -> float:
    """Decode-phase time per output token: (last - first) / (N - 1), seconds."""
    _require_success(record, 2, "tpot")
    n = len(record.token_arrivals)
    return (record.token_arrivals[-1] - record.token_arrivals[0]) / (n - 1) / NS_PER_S


def itl(record: RequestRecord) -> list[float]:
    """The N-1 consecutive inter-token gaps, seconds."""
    _require_success(record, 2, "itl")
    arr = record.token_arrivals
    return [(b - a) / NS_PER_S for a, b in zip(arr, arr[1:])]


def ntpot(record: RequestRecord) -> float:
    """End-to-end latency amortized over output tokens, seconds per token."""
    _require_success(record, 1, "ntpot")
    if record.output_tokens < 1:
        raise MetricUndefined("ntpot undefined for zero output tokens")
    return (record.completion - record.actual_send) / record.output_tokens / NS_PER_S


def ntpot_decomposed(d: NtpotDecomposition) -> float:
    """Phase-sum form: (queue + I*prefill + N*decode) / N, seconds per token."""
    total = d.queue_wait + d.input_len * d.prefill_per_token + d.output_len * d.decode_per_token
    return total / d.output_len


def synthetic_record(d: NtpotDecomposition, *, request_id: str = "synthetic") -> RequestRecord:
    """Build a record whose trace realizes a phase decomposition exactly.

    Queue wait plus full prefill elapse before the first token; decode gaps
    are uniform.  Timestamps are ns-quantized, so ``ntpot(record)`` equals
    ``ntpot_decomposed(d)`` within quantization error.
    """
    send = 0
    first = send + round((d.queue_wait + d.input_len * d.prefill_per_token) * NS_PER_S)
    arrivals = [
        first + round(k * d.decode_per_token * NS_PER_S) for k in range(1, d.output_len + 1)
    ]
    return RequestRecord(
        request_id=request_id,
        intended_dispatch=send,
        actual_send=send,
        token_arrivals=arrivals,
        completion=arrivals[-1],
        input_tokens=d.input_len,
        output_tokens=d.output_len,
    )


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile of an ascending sample (1-indexed ceil rank)."""
    if not sorted_values:
        raise EmptyInput("percentile of empty sample")
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def stat_block(values: Iterable[float]) -> StatBlock | None:
    """Summarize a metric sample; None when the sample is empty."""
    vals = sorted(values)
    if not vals:
        return None
    n = len(vals)
    mean = math.fsum(vals) / n
    if n == 1:
        variance = 0.0
    else:
        variance = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
    return StatBlock(
        mean=mean,
        sample_variance=variance,
        min=vals[0],
        max=vals[-1],
        p50=nearest_rank(vals, 50),
        p90=nearest_rank(vals, 90),
        p99=nearest_rank(vals, 99),
        count=n,
        single_sample=(n == 1),
    )


def aggregate(
    records: Sequence[RequestRecord],
    offered_qps: float,
    wall_time_s: float,
) -> StageSummary:
    """Aggregate request records into a stage summary.

    Warm-up records are excluded entirely; errors and timeouts are counted
    but contribute nothing to latency statistics; token throughput covers
    successful requests only.
    """
    if not records:
        raise EmptyInput("no records to aggregate")
    measured = [r for r in records if not r.warmup]
    warmup_count = len(records) - len(measured)
    if not measured:
        raise EmptyInput("all records are flagged warm-up")
    if wall_time_s <= 0:
        raise InvalidParam(f"wall_time_s must be > 0, got {wall_time_s}")

    successes = [r for r in measured if r.status == STATUS_SUCCESS]
    errors = sum(1 for r in measured if r.status == STATUS_ERROR)
    timeouts = sum(1 for r in measured if r.status == STATUS_TIMEOUT)

    ttft_vals = [ttft(r) for r in successes if len(r.token_arrivals) >= 1]
    tpot_vals = [tpot(r) for r in successes if len(r.token_arrivals) >= 2]
    itl_vals = [g for r in successes if len(r.token_arrivals) >= 2 for g in itl(r)]
    ntpot_vals = [ntpot(r) for r in successes if r.output_tokens >= 1]
    e2e_vals = [(r.completion - r.actual_send) / NS_PER_S for r in successes]
    delays = sorted((r.actual_send - r.intended_dispatch) / NS_PER_S for r in measured)

    total_in = sum(r.input_tokens for r in successes)
    total_out = sum(r.output_tokens for r in successes)

    return StageSummary(
        offered_qps=offered_qps,
        achieved_qps=len(measured) / wall_time_s,
        request_count=len(measured),
        ttft_stats=stat_block(ttft_vals),
        tpot_stats=stat_block(tpot_vals),
        itl_stats=stat_block(itl_vals),
        ntpot_stats=stat_block(ntpot_vals),
        e2e_stats=stat_block(e2e_vals),
        total_input_tokens=total_in,
        total_output_tokens=total_out,
        token_throughput=(total_in + total_out) / wall_time_s,
        sched_delay_stats={
            "p50": nearest_rank(delays, 50),
            "p90": nearest_rank(delays, 90),
            "p99": nearest_rank(delays, 99),
        },
        error_count=errors,
        timeout_count=timeouts,
        success_count=len(successes),
        warmup_count=warmup_count,
    )


# ---------------------------------------------------------------------------
# Trace serialization (JSON lines, fixed field names)
# ---------------------------------------------------------------------------

TRACE_FIELDS = (
    "request_id",
    "intended_dispatch_ns",
    "actual_send_ns",
    "token_arrivals_ns",
    "completion_ns",
    "input_tokens",
    "output_tokens",
    "status",
    "error_kind",
    "warmup",
    "server_output_tokens",
)


def record_to_json_dict(record: RequestRecord) -> dict:
    return {
        "request_id": record.request_id,
        "intended_dispatch_ns": record.intended_dispatch,
        "actual_send_ns": record.actual_send,
        "token_arrivals_ns": list(record.token_arrivals),
        "completion_ns": record.completion,
        "input_tokens": record.input_tokens,
        "output_tokens": record.output_tokens,
        "status": record.status,
        "error_kind": record.error_kind,
        "warmup": record.warmup,
        "server_output_tokens": record.server_output_tokens,
    }


def record_from_json_dict(d: dict) -> RequestRecord:
    try:
        return RequestRecord(
            request_id=str(d["request_id"]),
            intended_dispatch=int(d["intended_dispatch_ns"]),
            actual_send=int(d["actual_send_ns"]),
            token_arrivals=[int(t) for t in d["token_arrivals_ns"]],
            completion=int(d["completion_ns"]),
            input_tokens=int(d["input_tokens"]),
            output_tokens=int(d["output_tokens"]),
            status=str(d["status"]),
            error_kind=d.get("error_kind"),
            warmup=bool(d.get("warmup", False)),
            server_output_tokens=d.get("server_output_tokens"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad trace record: {exc}") from exc


def write_trace(path: str | Path, records: Iterable[RequestRecord]) -> None:
    """Write records as JSON lines; timestamps are ns relative to the run epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json_dict(r), separators=(",", ":")))
            fh.write("\n")


def read_trace(path: str | Path) -> list[RequestRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: not JSON: {exc}") from exc
            records.append(record_from_json_dict(d))
    return records


def mark_warmup(records: Sequence[RequestRecord], warmup_ns: int) -> list[RequestRecord]:
    """Copy of records with those scheduled before the warm-up cutoff flagged."""
    return [
        replace(r, warmup=True) if r.intended_dispatch < warmup_ns else r for r in records
    ]
