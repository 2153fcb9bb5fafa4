"""Latency profiles: stage assembly, saturation detection, report emission.

A latency profile is the ordered sequence of per-stage points mapping
offered load to achieved throughput and latency.  Points whose fidelity
report is invalid are flagged client-limited and excluded from saturation
analysis: a client-bound sweep must never be read as server saturation.
"""

from __future__ import annotations

import csv
import io
import json
import os
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .engine import FidelityReport
from .errors import InsufficientData, InvalidParam
from .metrics import RequestRecord, StageSummary, StatBlock, write_trace

SCHEMA_VERSION = 1

REASON_RATE_SHORTFALL = "achieved_qps_shortfall"
REASON_NTPOT_KNEE = "ntpot_spike_flat_throughput"

# Exit codes for the sweep command, documented in the CLI.
EXIT_SATURATION_FOUND = 0
EXIT_CONFIG_ERROR = 2
EXIT_NO_SATURATION = 3
EXIT_CLIENT_LIMITED = 4

MIN_POINTS_FOR_DETECTION = 4


@dataclass(frozen=True)
class SaturationThresholds:
    """Knee-detection knobs; the defaults are documented conventions."""

    achieved_ratio_floor: float = 0.95
    ntpot_spike_factor: float = 2.0
    marginal_gain_fraction: float = 0.10

    def __post_init__(self) -> None:
        if not 0 < self.achieved_ratio_floor <= 1:
            raise InvalidParam("achieved_ratio_floor must be in (0, 1]")
        if self.ntpot_spike_factor <= 1:
            raise InvalidParam("ntpot_spike_factor must be > 1")
        if not 0 < self.marginal_gain_fraction < 1:
            raise InvalidParam("marginal_gain_fraction must be in (0, 1)")


@dataclass(frozen=True)
class Saturation:
    index: int
    reason: str

    def to_json_dict(self) -> dict:
        return {"index": self.index, "reason": self.reason}


@dataclass(frozen=True)
class ProfilePoint:
    """One stage of the profile: summary stats plus the fidelity verdict."""

    summary: StageSummary
    fidelity: FidelityReport
    aborted: bool = False

    @property
    def offered_qps(self) -> float:
        return self.summary.offered_qps

    @property
    def achieved_qps(self) -> float:
        return self.summary.achieved_qps

    @property
    def token_throughput(self) -> float:
        return self.summary.token_throughput

    @property
    def ntpot_stats(self) -> StatBlock | None:
        return self.summary.ntpot_stats

    @property
    def ttft_stats(self) -> StatBlock | None:
        return self.summary.ttft_stats

    @property
    def client_limited(self) -> bool:
        return not self.fidelity.valid

    def to_json_dict(self) -> dict:
        return {
            "summary": self.summary.to_json_dict(),
            "fidelity": self.fidelity.to_json_dict(),
            "aborted": self.aborted,
            "client_limited": self.client_limited,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ProfilePoint":
        return cls(
            summary=StageSummary.from_json_dict(d["summary"]),
            fidelity=FidelityReport.from_json_dict(d["fidelity"]),
            aborted=d.get("aborted", False),
        )


@dataclass(frozen=True)
class LatencyProfile:
    """Ordered profile points plus the detected saturation point, if any.

    ``ideal_zone`` is the index of the last usable point before saturation:
    the operating point right below the knee.
    """

    points: tuple[ProfilePoint, ...]
    saturation: Saturation | None = None
    ideal_zone: int | None = None

    def __post_init__(self) -> None:
        rates = [p.offered_qps for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise InvalidParam("profile points must have strictly increasing offered_qps")
        if self.saturation is not None and not 0 <= self.saturation.index < len(self.points):
            raise InvalidParam("saturation index out of bounds")

    def valid_indices(self) -> list[int]:
        return [i for i, p in enumerate(self.points) if not p.client_limited and not p.aborted]

    def to_json_dict(self) -> dict:
        return {
            "points": [p.to_json_dict() for p in self.points],
            "saturation": self.saturation.to_json_dict() if self.saturation else None,
            "ideal_zone": self.ideal_zone,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "LatencyProfile":
        sat = d.get("saturation")
        return cls(
            points=tuple(ProfilePoint.from_json_dict(p) for p in d["points"]),
            saturation=Saturation(**sat) if sat else None,
            ideal_zone=d.get("ideal_zone"),
        )


def make_point(
    summary: StageSummary, fidelity: FidelityReport, aborted: bool = False
) -> ProfilePoint:
    return ProfilePoint(summary=summary, fidelity=fidelity, aborted=aborted)


def build_profile(
    points: Sequence[ProfilePoint],
    thresholds: SaturationThresholds = SaturationThresholds(),
) -> LatencyProfile:
    """Assemble stages into a profile and run saturation detection.

    Needs at least two stages; saturation is only claimed with at least
    four fidelity-valid points.
    """
    if len(points) < 2:
        raise InsufficientData(f"profile needs >= 2 stages, got {len(points)}")
    profile = LatencyProfile(points=tuple(points))
    if len(profile.valid_indices()) < MIN_POINTS_FOR_DETECTION:
        return profile
    saturation = detect_saturation(profile, thresholds)
    ideal = None
    if saturation is not None:
        usable = [i for i in profile.valid_indices() if i < saturation.index]
        ideal = usable[-1] if usable else None
    return LatencyProfile(points=tuple(points), saturation=saturation, ideal_zone=ideal)


def detect_saturation(
    profile: LatencyProfile | Sequence[ProfilePoint],
    thresholds: SaturationThresholds = SaturationThresholds(),
) -> Saturation | None:
    """Find the first knee in the profile, or None if load never saturated.

    Two rules, checked in order at each valid point i:

    (a) achieved/offered drops below the floor while every earlier valid
        point was at or above it: the stack stopped absorbing offered load.
    (b) p99 NTPOT exceeds ``ntpot_spike_factor`` times the median p99 NTPOT
        of the first quartile of valid points, while the marginal token
        throughput gain over the previous point falls below
        ``marginal_gain_fraction`` of the mean per-stage gain inside that
        first quartile: latency is degrading with nothing bought in return.

    Both rules use ratios only, so uniform rescaling of all NTPOT values (or
    all throughputs) cannot change the outcome.
    """
    points = profile.points if isinstance(profile, LatencyProfile) else tuple(profile)
    prof = profile if isinstance(profile, LatencyProfile) else LatencyProfile(points=points)
    valid = prof.valid_indices()
    if len(valid) < MIN_POINTS_FOR_DETECTION:
        raise InsufficientData(
            f"saturation detection needs >= {MIN_POINTS_FOR_DETECTION} valid points, "
            f"got {len(valid)}"
        )

    quartile = valid[: max(2, -(-len(valid) // 4))]
    baseline_ntpot = sorted(
        points[i].ntpot_stats.p99 for i in quartile if points[i].ntpot_stats is not None
    )
    gains = [
        points[b].token_throughput - points[a].token_throughput
        for a, b in zip(quartile, quartile[1:])
    ]
    baseline_gain = sum(gains) / len(gains) if gains else 0.0

    for pos, i in enumerate(valid):
        point = points[i]
        ratio = point.achieved_qps / point.offered_qps if point.offered_qps else 1.0
        # scanning in order makes this the first shortfall, so every earlier
        # valid point was at or above the floor, as rule (a) requires
        if ratio < thresholds.achieved_ratio_floor:
            return Saturation(index=i, reason=REASON_RATE_SHORTFALL)

        if pos >= len(quartile) and baseline_ntpot and point.ntpot_stats is not None:
            median_baseline = baseline_ntpot[len(baseline_ntpot) // 2]
            prev = points[valid[pos - 1]]
            marginal = point.token_throughput - prev.token_throughput
            spiked = point.ntpot_stats.p99 > thresholds.ntpot_spike_factor * median_baseline
            flat = (
                baseline_gain > 0
                and marginal < thresholds.marginal_gain_fraction * baseline_gain
            )
            if spiked and flat:
                return Saturation(index=i, reason=REASON_NTPOT_KNEE)
    return None


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

# Fixed column order of profile.csv; downstream plotting relies on it.
CSV_COLUMNS = [
    "stage",
    "offered_qps",
    "achieved_qps",
    "dispatched_qps",
    "fidelity_ratio",
    "fidelity_valid",
    "client_limited",
    "aborted",
    "sched_delay_p50_s",
    "sched_delay_p90_s",
    "sched_delay_p99_s",
    "request_count",
    "success_count",
    "error_count",
    "timeout_count",
    "total_input_tokens",
    "total_output_tokens",
    "token_throughput",
]
_STAT_METRICS = ("ttft", "tpot", "itl", "ntpot", "e2e")
_STAT_FIELDS = ("mean", "sample_variance", "min", "max", "p50", "p90", "p99")
for _metric in _STAT_METRICS:
    for _field in _STAT_FIELDS:
        CSV_COLUMNS.append(f"{_metric}_{_field}_s")


def profile_csv_rows(points: Sequence[ProfilePoint]) -> list[dict]:
    rows = []
    for idx, point in enumerate(points):
        s = point.summary
        f = point.fidelity
        row = {
            "stage": idx,
            "offered_qps": s.offered_qps,
            "achieved_qps": s.achieved_qps,
            "dispatched_qps": f.dispatched_qps,
            "fidelity_ratio": f.fidelity_ratio,
            "fidelity_valid": f.valid,
            "client_limited": point.client_limited,
            "aborted": point.aborted,
            "sched_delay_p50_s": f.sched_delay_p50_s,
            "sched_delay_p90_s": f.sched_delay_p90_s,
            "sched_delay_p99_s": f.sched_delay_p99_s,
            "request_count": s.request_count,
            "success_count": s.success_count,
            "error_count": s.error_count,
            "timeout_count": s.timeout_count,
            "total_input_tokens": s.total_input_tokens,
            "total_output_tokens": s.total_output_tokens,
            "token_throughput": s.token_throughput,
        }
        for metric in _STAT_METRICS:
            block: StatBlock | None = getattr(s, f"{metric}_stats")
            for field_name in _STAT_FIELDS:
                value = getattr(block, field_name) if block is not None else None
                row[f"{metric}_{field_name}_s"] = value
        rows.append(row)
    return rows


def render_csv(points: Sequence[ProfilePoint]) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in profile_csv_rows(points):
        writer.writerow(row)
    return out.getvalue()


def emit_report(
    profile: LatencyProfile,
    run_config: dict,
    client_model: dict | None,
    workload_manifest: dict,
    out_dir: str | Path,
    *,
    traces: Sequence[Sequence[RequestRecord]] = (),
    schedules: Sequence[dict] = (),
    stage_meta: Sequence[dict] = (),
    extra: dict | None = None,
) -> dict:
    """Write report.json, profile.csv, and per-stage traces into out_dir.

    ``run_config`` must be the effective configuration with every default
    resolved, so a rerun from the archived report reproduces the run.
    Returns the report dictionary that was written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    report = {
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "streamload", "version": _tool_version()},
        "host": {"cpu_count": os.cpu_count(), "platform": platform.platform()},
        "config": run_config,
        "client_model": client_model,
        "workload_manifest": workload_manifest,
        "stages": list(stage_meta),
        "profile": profile.to_json_dict(),
    }
    if extra:
        report.update(extra)

    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "profile.csv", "w", encoding="utf-8") as fh:
        fh.write(render_csv(profile.points))
    with open(out / "workload_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(workload_manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if traces:
        trace_dir = out / "traces"
        trace_dir.mkdir(exist_ok=True)
        for idx, records in enumerate(traces):
            write_trace(trace_dir / f"stage-{idx:03d}.jsonl", records)
        with open(trace_dir / "stages.json", "w", encoding="utf-8") as fh:
            json.dump(list(stage_meta), fh, indent=2, sort_keys=True)
            fh.write("\n")
    if schedules:
        sched_dir = out / "schedules"
        sched_dir.mkdir(exist_ok=True)
        for idx, sched in enumerate(schedules):
            with open(sched_dir / f"stage-{idx:03d}.json", "w", encoding="utf-8") as fh:
                json.dump(sched, fh, sort_keys=True, separators=(",", ":"))
                fh.write("\n")
    return report


def _tool_version() -> str:
    from . import __version__

    return __version__


def sweep_exit_code(profile: LatencyProfile) -> int:
    """Encode the sweep outcome: found / not reached / client-limited."""
    if profile.saturation is not None:
        return EXIT_SATURATION_FOUND
    limited = [p for p in profile.points if p.client_limited]
    if len(limited) >= len(profile.points) / 2 or (profile.points and
                                                   profile.points[-1].client_limited):
        return EXIT_CLIENT_LIMITED
    return EXIT_NO_SATURATION
