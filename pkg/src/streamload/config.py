"""Declarative run configuration: strict YAML schema and seed fan-out.

Unknown keys are errors, not warnings; silent misconfiguration is the
reproducibility failure mode this tool exists to prevent.  A master seed
deterministically derives every component seed (fixed sha256 derivation), so
archiving the master seed archives the whole randomness story.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .engine import MODE_CLOSED_LOOP, MODE_OPEN_LOOP, EngineConfig
from .errors import ConfigError
from .mockserver import MockBehavior
from .profile import SaturationThresholds
from .schedule import (
    KIND_CONSTANT,
    KIND_POISSON,
    ArrivalSchedule,
    Progression,
    StagePlan,
    build_sweep,
    make_schedule,
)
from .timeutil import NS_PER_S, parse_duration_ns
from .workload import WorkloadSpec


def derive_seed(master: int, label: str) -> int:
    """Stable sub-seed: first 8 bytes of sha256("<master>:<label>"), big-endian."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Config dataclasses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SingleStageSpec:
    kind: str
    rate: float
    duration_s: float | None = None
    request_count: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "rate": self.rate,
            "duration_s": self.duration_s,
            "request_count": self.request_count,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SingleStageSpec":
        return cls(**d)


@dataclass(frozen=True)
class SweepSpec:
    kind: str
    base_rate: float
    max_rate: float
    progression: Progression
    stage_duration_s: float | None = None
    requests_per_stage: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "base_rate": self.base_rate,
            "max_rate": self.max_rate,
            "progression": self.progression.to_json_dict(),
            "stage_duration_s": self.stage_duration_s,
            "requests_per_stage": self.requests_per_stage,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SweepSpec":
        return cls(
            kind=d["kind"],
            base_rate=d["base_rate"],
            max_rate=d["max_rate"],
            progression=Progression.from_json_dict(d["progression"]),
            stage_duration_s=d.get("stage_duration_s"),
            requests_per_stage=d.get("requests_per_stage"),
        )


@dataclass(frozen=True)
class MockConfig:
    behavior: MockBehavior
    bind: str = "127.0.0.1:0"
    server_workers: int = 1
    log_timestamps: bool = False

    def to_json_dict(self) -> dict:
        return {
            "behavior": self.behavior.to_json_dict(),
            "bind": self.bind,
            "server_workers": self.server_workers,
            "log_timestamps": self.log_timestamps,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MockConfig":
        return cls(
            behavior=MockBehavior.from_json_dict(d["behavior"]),
            bind=d.get("bind", "127.0.0.1:0"),
            server_workers=d.get("server_workers", 1),
            log_timestamps=d.get("log_timestamps", False),
        )


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration of one run (single stage or sweep)."""

    engine: EngineConfig
    workload: WorkloadSpec
    report_dir: str
    seed: int = 0
    stage: SingleStageSpec | None = None
    sweep: SweepSpec | None = None
    mock: MockConfig | None = None
    saturation: SaturationThresholds = field(default_factory=SaturationThresholds)

    def __post_init__(self) -> None:
        if (self.stage is None) == (self.sweep is None):
            raise ConfigError("exactly one of 'stage' / 'sweep' must be present")

    def stage_plans(self) -> list[StagePlan]:
        if self.stage is not None:
            return [
                StagePlan(
                    rate=self.stage.rate,
                    duration_s=self.stage.duration_s,
                    request_count=self.stage.request_count,
                )
            ]
        plan = build_sweep(
            self.sweep.base_rate,
            self.sweep.max_rate,
            self.sweep.progression,
            stage_duration_s=self.sweep.stage_duration_s,
            requests_per_stage=self.sweep.requests_per_stage,
        )
        return list(plan.stages)

    def schedule_kind(self) -> str:
        return self.stage.kind if self.stage is not None else self.sweep.kind

    def schedule_for_stage(self, index: int, plan: StagePlan) -> ArrivalSchedule:
        seed = derive_seed(self.seed, f"schedule.stage{index}")
        return make_schedule(self.schedule_kind(), plan.rate, plan.resolve_count(), seed)

    def to_json_dict(self) -> dict:
        return {
            "engine": self.engine.to_json_dict(),
            "workload": self.workload.to_json_dict(),
            "report_dir": self.report_dir,
            "seed": self.seed,
            "stage": self.stage.to_json_dict() if self.stage else None,
            "sweep": self.sweep.to_json_dict() if self.sweep else None,
            "mock": self.mock.to_json_dict() if self.mock else None,
            "saturation": {
                "achieved_ratio_floor": self.saturation.achieved_ratio_floor,
                "ntpot_spike_factor": self.saturation.ntpot_spike_factor,
                "marginal_gain_fraction": self.saturation.marginal_gain_fraction,
            },
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RunConfig":
        return cls(
            engine=EngineConfig.from_json_dict(d["engine"]),
            workload=WorkloadSpec.from_json_dict(d["workload"]),
            report_dir=d["report_dir"],
            seed=d["seed"],
            stage=SingleStageSpec.from_json_dict(d["stage"]) if d.get("stage") else None,
            sweep=SweepSpec.from_json_dict(d["sweep"]) if d.get("sweep") else None,
            mock=MockConfig.from_json_dict(d["mock"]) if d.get("mock") else None,
            saturation=SaturationThresholds(**d["saturation"]),
        )


# ---------------------------------------------------------------------------
# Strict parsing
# ---------------------------------------------------------------------------

_MISSING = object()


class _Section:
    """A config mapping that tracks consumed keys and rejects leftovers."""

    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
        self.data = dict(data)
        self.path = path

    def take(self, key: str, default=_MISSING):
        if key in self.data:
            return self.data.pop(key)
        if default is _MISSING:
            raise ConfigError(f"{self.path}.{key}: required key missing")
        return default

    def take_number(self, key: str, default=_MISSING, *, minimum=None) -> float:
        value = self.take(key, default)
        if value is default and default is not _MISSING:
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{self.path}.{key}: expected a number, got {value!r}")
        if minimum is not None and value < minimum:
            raise ConfigError(f"{self.path}.{key}: must be >= {minimum}, got {value}")
        return value

    def take_duration_s(self, key: str, default=_MISSING) -> float | None:
        value = self.take(key, default)
        if value is None or value is default:
            return value
        try:
            return parse_duration_ns(value) / NS_PER_S
        except Exception as exc:
            raise ConfigError(f"{self.path}.{key}: {exc}") from exc

    def subsection(self, key: str) -> "_Section | None":
        value = self.take(key, None)
        if value is None:
            return None
        return _Section(value, f"{self.path}.{key}")

    def finish(self) -> None:
        if self.data:
            unknown = ", ".join(sorted(self.data))
            raise ConfigError(f"{self.path}: unknown key(s): {unknown}")


def _parse_token_count(section: _Section, key: str, default=_MISSING):
    value = section.take(key, default)
    if value is None or value is default:
        return value
    if isinstance(value, bool):
        raise ConfigError(f"{section.path}.{key}: expected a count")
    if isinstance(value, int):
        return value
    if isinstance(value, dict) and set(value) == {"uniform"}:
        lo, hi = value["uniform"]
        return (int(lo), int(hi))
    raise ConfigError(f"{section.path}.{key}: expected int or {{uniform: [lo, hi]}}")


def _parse_engine(section: _Section | None, has_mock: bool) -> EngineConfig:
    if section is None:
        section = _Section({}, "engine")
    target = section.take("target", "" if has_mock else _MISSING)
    mode = section.take("mode", MODE_OPEN_LOOP)
    if mode not in (MODE_OPEN_LOOP, MODE_CLOSED_LOOP):
        raise ConfigError(f"{section.path}.mode: unknown mode {mode!r}")
    cfg = EngineConfig(
        target=target or "",
        max_workers=int(section.take_number("max_workers", 1, minimum=1)),
        worker_max_concurrency=int(
            section.take_number("worker_max_concurrency", 256, minimum=1)
        ),
        timeout_s=section.take_duration_s("timeout", 30.0),
        mode=mode,
        closed_loop_concurrency=(
            int(section.take_number("closed_loop_concurrency", 0, minimum=0)) or None
        ),
        auto_size=bool(section.take("auto_size", False)),
        model_name=str(section.take("model_name", "mock-model")),
        rho_max=section.take_number("rho_max", 0.5),
        fidelity_ratio_threshold=section.take_number("fidelity_ratio_threshold", 0.99),
        error_abort_fraction=section.take_number("error_abort_fraction", 0.05, minimum=0),
        warmup_fraction=section.take_number("warmup_fraction", 0.10, minimum=0),
        stream=bool(section.take("stream", True)),
    )
    section.finish()
    return cfg


def _parse_workload(section: _Section | None) -> WorkloadSpec:
    if section is None:
        raise ConfigError("workload: section is required")
    sampling = section.take("sampling", {})
    if not isinstance(sampling, dict):
        raise ConfigError(f"{section.path}.sampling: expected a mapping")
    spec = WorkloadSpec(
        source=str(section.take("source", "synthetic")),
        input_tokens=_parse_token_count(section, "input_tokens", None),
        output_tokens=_parse_token_count(section, "output_tokens", 128),
        shared_prefix_fraction=section.take_number("shared_prefix_fraction", 0.0, minimum=0),
        truncation_limit=int(section.take_number("truncation_limit", 4096, minimum=1)),
        sampling=dict(sampling),
        dataset_path=section.take("dataset_path", None),
        dataset_field=str(section.take("dataset_field", "text")),
    )
    section.finish()
    return spec


def _parse_stage(section: _Section) -> SingleStageSpec:
    kind = str(section.take("kind", KIND_POISSON))
    if kind not in (KIND_CONSTANT, KIND_POISSON):
        raise ConfigError(f"{section.path}.kind: unknown kind {kind!r}")
    rate = section.take_number("rate", minimum=None)
    if rate <= 0:
        raise ConfigError(f"{section.path}.rate: must be > 0, got {rate}")
    duration = section.take_duration_s("duration", None)
    requests = section.take("requests", None)
    section.finish()
    if (duration is None) == (requests is None):
        raise ConfigError(f"{section.path}: set exactly one of duration / requests")
    return SingleStageSpec(
        kind=kind,
        rate=rate,
        duration_s=duration,
        request_count=int(requests) if requests is not None else None,
    )


def _parse_sweep(section: _Section) -> SweepSpec:
    kind = str(section.take("kind", KIND_POISSON))
    if kind not in (KIND_CONSTANT, KIND_POISSON):
        raise ConfigError(f"{section.path}.kind: unknown kind {kind!r}")
    progression_kind = str(section.take("progression", "geometric"))
    step = section.take("step", None)
    factor = section.take("factor", None)
    try:
        progression = Progression(
            kind=progression_kind,
            step=float(step) if step is not None else None,
            factor=float(factor) if factor is not None else None,
        )
    except Exception as exc:
        raise ConfigError(f"{section.path}: {exc}") from exc
    base_rate = section.take_number("base_rate")
    max_rate = section.take_number("max_rate")
    duration = section.take_duration_s("stage_duration", None)
    requests = section.take("requests_per_stage", None)
    section.finish()
    if (duration is None) == (requests is None):
        raise ConfigError(
            f"{section.path}: set exactly one of stage_duration / requests_per_stage"
        )
    return SweepSpec(
        kind=kind,
        base_rate=base_rate,
        max_rate=max_rate,
        progression=progression,
        stage_duration_s=duration,
        requests_per_stage=int(requests) if requests is not None else None,
    )


def _parse_mock(section: _Section, master_seed: int) -> MockConfig:
    raw_output = section.take("output_tokens", None)
    behavior = MockBehavior(
        prefill_delay_s=section.take_duration_s("prefill_delay", 0.0),
        per_token_delay_s=section.take_duration_s("per_token_delay", 0.0),
        jitter_s=section.take_duration_s("jitter", 0.0),
        output_tokens=int(raw_output) if raw_output else None,
        failure_rate=section.take_number("failure_rate", 0.0, minimum=0),
        max_connections=int(section.take_number("max_connections", 10_000, minimum=1)),
        seed=derive_seed(master_seed, "mock") & 0x7FFFFFFF,
        model_name=str(section.take("model_name", "mock-model")),
    )
    mock = MockConfig(
        behavior=behavior,
        bind=str(section.take("bind", "127.0.0.1:0")),
        server_workers=int(section.take_number("server_workers", 1, minimum=1)),
        log_timestamps=bool(section.take("log_timestamps", False)),
    )
    section.finish()
    return mock


def parse_config(data: dict) -> RunConfig:
    """Validate a parsed YAML document into a RunConfig; strict on unknown keys."""
    root = _Section(data, "config")
    seed = int(root.take_number("seed", 0))
    report_dir = str(root.take("report_dir"))

    mock_section = root.subsection("mock")
    mock = _parse_mock(mock_section, seed) if mock_section is not None else None

    engine = _parse_engine(root.subsection("engine"), has_mock=mock is not None)
    workload_spec = _parse_workload(root.subsection("workload"))

    stage_section = root.subsection("stage")
    sweep_section = root.subsection("sweep")
    saturation_section = root.subsection("saturation")

    saturation = SaturationThresholds()
    if saturation_section is not None:
        saturation = SaturationThresholds(
            achieved_ratio_floor=saturation_section.take_number("achieved_ratio_floor", 0.95),
            ntpot_spike_factor=saturation_section.take_number("ntpot_spike_factor", 2.0),
            marginal_gain_fraction=saturation_section.take_number(
                "marginal_gain_fraction", 0.10
            ),
        )
        saturation_section.finish()

    root.finish()

    if (stage_section is None) == (sweep_section is None):
        raise ConfigError("config: exactly one of 'stage' / 'sweep' must be present")

    workload_spec = replace(workload_spec, seed=derive_seed(seed, "workload") & 0x7FFFFFFF)
    return RunConfig(
        engine=engine,
        workload=workload_spec,
        report_dir=report_dir,
        seed=seed,
        stage=_parse_stage(stage_section) if stage_section is not None else None,
        sweep=_parse_sweep(sweep_section) if sweep_section is not None else None,
        mock=mock,
        saturation=saturation,
    )


def load_config(path: str | Path) -> RunConfig:
    """Load a YAML config file, or re-load the config archived in a report.json."""
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: not a mapping")
    if "schema_version" in data and "config" in data:
        return RunConfig.from_json_dict(data["config"])
    return parse_config(data)
