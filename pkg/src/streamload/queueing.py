"""Analytic single-server queue model of the client event loop.

The load client's event loop is modeled as an M/G/1 queue: token arrivals
from all concurrent streams form the arrival process, and the loop's
per-token deserialize-and-record work is the service process.  The closed
forms here (utilization, Pollaczek-Khinchine waiting time, k-way partitioned
utilization) are validated by an independent discrete-event simulation based
on Lindley's recurrence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParam, Saturated

# Relative slack for the E[S^2] >= mean^2 moment inequality under float noise.
_MOMENT_SLACK = 1e-9


@dataclass(frozen=True)
class QueueModelParams:
    """Parameters of the client model: arrival rate, service rate, E[S^2], workers."""

    arrival_rate: float
    service_rate: float
    service_second_moment: float
    workers: int = 1

    def __post_init__(self) -> None:
        if self.arrival_rate <= 0:
            raise InvalidParam(f"arrival_rate must be > 0, got {self.arrival_rate}")
        if self.service_rate <= 0:
            raise InvalidParam(f"service_rate must be > 0, got {self.service_rate}")
        mean_sq = (1.0 / self.service_rate) ** 2
        if self.service_second_moment < mean_sq * (1.0 - _MOMENT_SLACK):
            raise InvalidParam(
                f"second moment {self.service_second_moment} below squared mean {mean_sq}"
            )
        if self.workers < 1:
            raise InvalidParam(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class ServiceDistribution:
    """Service-time distribution: deterministic, exponential, or empirical."""

    kind: str
    mean: float
    second_moment: float
    sample: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("deterministic", "exponential", "general"):
            raise InvalidParam(f"unknown service distribution kind {self.kind!r}")
        if self.mean <= 0:
            raise InvalidParam(f"mean service time must be > 0, got {self.mean}")
        if self.second_moment < self.mean**2 * (1.0 - _MOMENT_SLACK):
            raise InvalidParam("second moment below squared mean")
        if self.kind == "general" and not self.sample:
            raise InvalidParam("empirical distribution requires a nonempty sample")

    @classmethod
    def deterministic(cls, mean: float) -> "ServiceDistribution":
        return cls(kind="deterministic", mean=mean, second_moment=mean**2)

    @classmethod
    def exponential(cls, mean: float) -> "ServiceDistribution":
        return cls(kind="exponential", mean=mean, second_moment=2.0 * mean**2)

    @classmethod
    def from_sample(cls, values) -> "ServiceDistribution":
        sample = tuple(float(v) for v in values)
        if not sample:
            raise InvalidParam("empty service-time sample")
        if min(sample) < 0:
            raise InvalidParam("service times must be >= 0")
        mean = math.fsum(sample) / len(sample)
        second = math.fsum(v * v for v in sample) / len(sample)
        return cls(kind="general", mean=mean, second_moment=second, sample=sample)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "deterministic":
            return np.full(n, self.mean)
        if self.kind == "exponential":
            return rng.exponential(self.mean, n)
        return rng.choice(np.asarray(self.sample), size=n, replace=True)


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------


def utilization(arrival_rate: float, service_rate: float) -> float:
    """Event-loop utilization: arrivals over service capacity."""
    if service_rate <= 0:
        raise InvalidParam(f"service_rate must be > 0, got {service_rate}")
    return arrival_rate / service_rate


def pk_wait(params: QueueModelParams) -> float:
    """Pollaczek-Khinchine mean queue wait for a single server, seconds.

    W = arrival_rate * E[S^2] / (2 * (1 - utilization)).  Raises Saturated at
    utilization >= 1, where the steady-state wait diverges.
    """
    if params.workers != 1:
        raise InvalidParam("pk_wait is the single-server form; partition first")
    rho = utilization(params.arrival_rate, params.service_rate)
    if rho >= 1.0:
        raise Saturated(f"utilization {rho:.4f} >= 1; no steady state")
    return params.arrival_rate * params.service_second_moment / (2.0 * (1.0 - rho))


def partitioned_utilization(arrival_rate: float, service_rate: float, workers: int) -> float:
    """Per-worker utilization when arrivals are split evenly across workers."""
    if workers < 1:
        raise InvalidParam(f"workers must be >= 1, got {workers}")
    return utilization(arrival_rate, service_rate) / workers


def min_workers(arrival_rate: float, service_rate: float, rho_max: float) -> int:
    """Smallest worker count keeping per-worker utilization at or below rho_max."""
    if not 0 < rho_max < 1:
        raise InvalidParam(f"rho_max must be in (0, 1), got {rho_max}")
    if arrival_rate <= 0 or service_rate <= 0:
        raise InvalidParam("rates must be > 0")
    k = max(1, math.ceil(arrival_rate / (service_rate * rho_max)))
    # guard against float rounding in the ceil argument
    while partitioned_utilization(arrival_rate, service_rate, k) > rho_max:
        k += 1
    return k


# ---------------------------------------------------------------------------
# Discrete-event oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimResult:
    """Mean simulated queue wait with a batch-means 95% confidence half-width."""

    mean_wait: float
    ci_halfwidth: float
    n_arrivals: int


def simulate_mg1(
    dist: ServiceDistribution,
    arrival_rate: float,
    n_arrivals: int,
    seed: int,
) -> SimResult:
    """Simulate a single FIFO server with Poisson arrivals; exact per Lindley.

    W(n+1) = max(0, W(n) + S(n) - A(n+1)) with the system starting empty.
    Deterministic for a given seed (PCG64 generator).  The confidence
    half-width uses batch means, which under-corrects for autocorrelation at
    high utilization; the closed forms are the authoritative comparison.
    """
    if n_arrivals < 1:
        raise InvalidParam(f"n_arrivals must be >= 1, got {n_arrivals}")
    if arrival_rate <= 0:
        raise InvalidParam(f"arrival_rate must be > 0, got {arrival_rate}")
    rho = arrival_rate * dist.mean
    if rho >= 1.0:
        raise Saturated(f"offered load {rho:.4f} >= 1; queue is unstable")

    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / arrival_rate, n_arrivals).tolist()
    services = dist.draw(rng, n_arrivals).tolist()

    waits = [0.0] * n_arrivals
    w = 0.0
    for i in range(1, n_arrivals):
        w = max(0.0, w + services[i - 1] - gaps[i])
        waits[i] = w

    mean_wait = math.fsum(waits) / n_arrivals

    n_batches = min(50, n_arrivals)
    batch = n_arrivals // n_batches
    means = [
        math.fsum(waits[i * batch : (i + 1) * batch]) / batch for i in range(n_batches)
    ]
    if n_batches > 1:
        grand = math.fsum(means) / n_batches
        var = math.fsum((m - grand) ** 2 for m in means) / (n_batches - 1)
        half = 1.96 * math.sqrt(var / n_batches)
    else:
        half = float("inf")
    return SimResult(mean_wait=mean_wait, ci_halfwidth=half, n_arrivals=n_arrivals)


# Closed-form specializations used as independent oracles in tests.


def mm1_wait(arrival_rate: float, service_rate: float) -> float:
    """M/M/1 mean queue wait: rho / (mu - lambda)."""
    rho = utilization(arrival_rate, service_rate)
    if rho >= 1.0:
        raise Saturated(f"utilization {rho:.4f} >= 1")
    return rho / (service_rate - arrival_rate)


def md1_wait(arrival_rate: float, service_rate: float) -> float:
    """M/D/1 mean queue wait: rho / (2 * mu * (1 - rho))."""
    rho = utilization(arrival_rate, service_rate)
    if rho >= 1.0:
        raise Saturated(f"utilization {rho:.4f} >= 1")
    return rho / (2.0 * service_rate * (1.0 - rho))
