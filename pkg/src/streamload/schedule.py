"""Open-loop arrival schedules and multi-stage sweep plans.

Schedules are fully materialized before a stage starts so the dispatcher does
no RNG or arithmetic on the hot path.  Offsets are integer nanoseconds from
the stage epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParam
from .timeutil import NS_PER_S

KIND_CONSTANT = "constant"
KIND_POISSON = "poisson"

# Fraction of each stage treated as warm-up and excluded from statistics;
# continuous-batching servers need ramp time before steady state.
DEFAULT_WARMUP_FRACTION = 0.10


@dataclass(frozen=True)
class ArrivalSchedule:
    """Dispatch offsets (ns from stage start) for one stage."""

    offsets: tuple[int, ...]
    rate: float
    kind: str
    seed: int | None = None

    def __post_init__(self) -> None:
        if any(b < a for a, b in zip(self.offsets, self.offsets[1:])):
            raise InvalidParam("offsets must be nondecreasing")
        if self.offsets and self.offsets[0] < 0:
            raise InvalidParam("offsets must be nonnegative")

    @property
    def count(self) -> int:
        return len(self.offsets)

    @property
    def mean_gap_ns(self) -> float:
        return NS_PER_S / self.rate

    @property
    def duration_ns(self) -> int:
        return self.offsets[-1] if self.offsets else 0

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "rate": self.rate,
            "count": self.count,
            "seed": self.seed,
            "offsets_ns": list(self.offsets),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ArrivalSchedule":
        return cls(
            offsets=tuple(int(o) for o in d["offsets_ns"]),
            rate=float(d["rate"]),
            kind=str(d["kind"]),
            seed=d.get("seed"),
        )


def constant_schedule(rate: float, count: int) -> ArrivalSchedule:
    """Evenly spaced offsets: offsets[i] = i / rate, ns-quantized per index."""
    _check_rate_count(rate, count)
    offsets = tuple(round(i * NS_PER_S / rate) for i in range(count))
    return ArrivalSchedule(offsets=offsets, rate=rate, kind=KIND_CONSTANT)


def poisson_schedule(rate: float, count: int, seed: int) -> ArrivalSchedule:
    """Cumulative sums of i.i.d. Exponential(rate) gaps; deterministic per seed."""
    _check_rate_count(rate, count)
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / rate, count)
    offsets = np.rint(np.cumsum(gaps) * NS_PER_S).astype(np.int64)
    return ArrivalSchedule(
        offsets=tuple(int(o) for o in offsets), rate=rate, kind=KIND_POISSON, seed=seed
    )


def _check_rate_count(rate: float, count: int) -> None:
    if rate <= 0:
        raise InvalidParam(f"rate must be > 0, got {rate}")
    if count < 1:
        raise InvalidParam(f"count must be >= 1, got {count}")


def make_schedule(kind: str, rate: float, count: int, seed: int | None = None) -> ArrivalSchedule:
    if kind == KIND_CONSTANT:
        return constant_schedule(rate, count)
    if kind == KIND_POISSON:
        if seed is None:
            raise InvalidParam("poisson schedule requires a seed")
        return poisson_schedule(rate, count, seed)
    raise InvalidParam(f"unknown schedule kind {kind!r}")


# ---------------------------------------------------------------------------
# Sweep plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Progression:
    """Stage-rate progression: linear(step) or geometric(factor)."""

    kind: str
    step: float | None = None
    factor: float | None = None

    def __post_init__(self) -> None:
        if self.kind == "linear":
            if self.step is None or self.step <= 0:
                raise InvalidParam("linear progression requires step > 0")
        elif self.kind == "geometric":
            if self.factor is None or self.factor <= 1.0:
                raise InvalidParam("geometric progression requires factor > 1")
        else:
            raise InvalidParam(f"unknown progression kind {self.kind!r}")

    def next_rate(self, rate: float) -> float:
        if self.kind == "linear":
            return rate + self.step
        return rate * self.factor

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "step": self.step, "factor": self.factor}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Progression":
        return cls(kind=d["kind"], step=d.get("step"), factor=d.get("factor"))


@dataclass(frozen=True)
class StagePlan:
    """One sweep stage: a rate plus either a duration or a request count."""

    rate: float
    duration_s: float | None = None
    request_count: int | None = None

    def __post_init__(self) -> None:
        if (self.duration_s is None) == (self.request_count is None):
            raise InvalidParam("exactly one of duration_s / request_count must be set")
        if self.duration_s is not None and self.duration_s <= 0:
            raise InvalidParam("duration_s must be > 0")
        if self.request_count is not None and self.request_count < 1:
            raise InvalidParam("request_count must be >= 1")

    def resolve_count(self) -> int:
        """Number of requests this stage dispatches."""
        if self.request_count is not None:
            return self.request_count
        return max(1, math.ceil(self.rate * self.duration_s))


@dataclass(frozen=True)
class SweepPlan:
    """Ordered load progression from a base rate up to a maximum rate."""

    stages: tuple[StagePlan, ...]
    progression: Progression
    base_rate: float
    max_rate: float

    def __post_init__(self) -> None:
        rates = [s.rate for s in self.stages]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise InvalidParam("stage rates must be strictly increasing")


def build_sweep(
    base_rate: float,
    max_rate: float,
    progression: Progression,
    *,
    stage_duration_s: float | None = None,
    requests_per_stage: int | None = None,
) -> SweepPlan:
    """Expand a progression into stages; the final stage is clipped to max_rate.

    A geometric step that would overshoot is replaced by max_rate itself so
    the profile always includes the user's stated maximum.
    """
    if not 0 < base_rate < max_rate:
        raise InvalidParam(f"need 0 < base_rate < max_rate, got {base_rate}, {max_rate}")
    if (stage_duration_s is None) == (requests_per_stage is None):
        raise InvalidParam("exactly one of stage_duration_s / requests_per_stage must be set")

    rates: list[float] = []
    rate = base_rate
    while rate < max_rate * (1.0 - 1e-12):
        rates.append(rate)
        rate = progression.next_rate(rate)
    rates.append(max_rate)

    stages = tuple(
        StagePlan(rate=r, duration_s=stage_duration_s, request_count=requests_per_stage)
        for r in rates
    )
    return SweepPlan(
        stages=stages, progression=progression, base_rate=base_rate, max_rate=max_rate
    )
