"""Clock access, precise async sleeping, and duration parsing.

All internal timestamps and durations are integer nanoseconds on the host's
monotonic clock; seconds appear only at reporting boundaries.
"""

from __future__ import annotations

import asyncio
import re
import time

from .errors import InvalidParam

NS_PER_S = 1_000_000_000

# Below this remaining time we stop trusting the event loop timer and poll the
# clock in a cooperative loop instead (epoll timeouts are ~1 ms granular).
SPIN_WINDOW_NS = 2_000_000


def now_ns() -> int:
    """Current monotonic time in integer nanoseconds."""
    return time.monotonic_ns()


async def sleep_until(deadline_ns: int, *, spin_window_ns: int = SPIN_WINDOW_NS) -> int:
    """Sleep until the monotonic deadline, returning the wake-up time.

    Coarse-sleeps to within ``spin_window_ns`` of the deadline, then yields in
    a tight loop so the final error is clock-poll jitter rather than timer
    granularity.  With ``spin_window_ns=0`` this is a plain ``asyncio.sleep``.
    """
    while True:
        remaining = deadline_ns - time.monotonic_ns()
        if remaining <= 0:
            return time.monotonic_ns()
        if remaining > spin_window_ns:
            await asyncio.sleep((remaining - spin_window_ns) / NS_PER_S)
        else:
            while time.monotonic_ns() < deadline_ns:
                await asyncio.sleep(0)
            return time.monotonic_ns()


def measure_timer_granularity(samples: int = 25) -> float:
    """Median overshoot, in seconds, of a 1 ms asyncio sleep on this host.

    Used as the "OS timer granularity" reference when checking emission
    timing; floored at 1 ms since that is the typical epoll resolution.
    """

    async def _probe() -> float:
        overshoots = []
        for _ in range(samples):
            t0 = time.monotonic_ns()
            await asyncio.sleep(0.001)
            overshoots.append((time.monotonic_ns() - t0) / NS_PER_S - 0.001)
        overshoots.sort()
        return overshoots[len(overshoots) // 2]

    measured = asyncio.run(_probe())
    return max(measured, 0.001)


_DURATION_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*(ns|us|ms|s|m)?\s*$")

_UNIT_NS = {"ns": 1, "us": 1_000, "ms": 1_000_000, "s": NS_PER_S, "m": 60 * NS_PER_S}


def parse_duration_ns(value: str | int | float) -> int:
    """Parse a human duration ("20ms", "1.5s", bare seconds) to integer ns."""
    if isinstance(value, bool):
        raise InvalidParam(f"not a duration: {value!r}")
    if isinstance(value, (int, float)):
        if value < 0:
            raise InvalidParam(f"negative duration: {value!r}")
        return round(value * NS_PER_S)
    m = _DURATION_RE.match(value)
    if not m:
        raise InvalidParam(f"cannot parse duration: {value!r}")
    number, unit = m.groups()
    return round(float(number) * _UNIT_NS[unit or "s"])


def format_duration(seconds: float) -> str:
    """Compact human rendering used in console output."""
    if seconds >= 1.0:
        return f"{seconds:.3g}s"
    if seconds >= 1e-3:
        return f"{seconds * 1e3:.3g}ms"
    return f"{seconds * 1e6:.3g}us"
