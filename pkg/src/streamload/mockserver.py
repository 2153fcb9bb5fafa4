"""OpenAI-compatible streaming inference simulator with configurable delays.

The simulator emits chat-completion chunks with configured prefill and
per-token delays.  In zero-delay mode no sleep is ever taken on the response
path, so any latency a client measures against it is, by construction,
client (plus loopback) overhead.

The HTTP layer is a hand-rolled ASGI app on uvicorn rather than a web
framework: the response path must cost microseconds and coalesce chunk
writes, and request routing is two endpoints.  Multiple server processes
share one port via SO_REUSEPORT so the simulator itself is never
interpreter-locked into a single core.

Chunk framing contract (the compatibility surface):

* ``POST /v1/chat/completions`` with ``"stream": true`` responds with
  ``text/event-stream`` frames ``data: <json>\\n\\n``; each content chunk is a
  chat.completion.chunk object carrying ``choices[0].delta.content``, a
  ``token_count`` field (tokens in this chunk, always 1 here), and on the
  final content chunk a ``finish_reason``; a terminal usage chunk carries
  ``usage`` totals; the stream ends with ``data: [DONE]``.
* ``"stream": false`` returns one chat.completion object after the full
  configured delay.
* ``GET /health`` returns 200 once the server is accepting requests.
"""

from __future__ import annotations

import asyncio
import json
import multiprocessing as mp
import os
import random
import socket
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Awaitable, Callable

from .errors import BindError, InvalidParam, MockStartFailure
from .timeutil import NS_PER_S

# Patchable sleep reference: the zero-delay path must never reach it, and
# tests assert that by instrumenting this symbol.
_sleep = asyncio.sleep


@dataclass(frozen=True)
class MockBehavior:
    """Configured per-request timing and failure behavior of the simulator."""

    prefill_delay_s: float = 0.0
    per_token_delay_s: float = 0.0
    jitter_s: float = 0.0
    output_tokens: int | None = None
    default_output_tokens: int = 16
    failure_rate: float = 0.0
    max_connections: int = 10_000
    seed: int = 0
    model_name: str = "mock-model"

    def __post_init__(self) -> None:
        if min(self.prefill_delay_s, self.per_token_delay_s, self.jitter_s) < 0:
            raise InvalidParam("delays must be >= 0")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise InvalidParam("failure_rate must be in [0, 1]")
        if self.output_tokens is not None and self.output_tokens < 1:
            raise InvalidParam("output_tokens must be >= 1 when fixed")
        if self.max_connections < 1:
            raise InvalidParam("max_connections must be >= 1")

    @property
    def zero_delay(self) -> bool:
        return self.prefill_delay_s == 0 and self.per_token_delay_s == 0 and self.jitter_s == 0

    def to_json_dict(self) -> dict:
        return {
            "prefill_delay_s": self.prefill_delay_s,
            "per_token_delay_s": self.per_token_delay_s,
            "jitter_s": self.jitter_s,
            "output_tokens": self.output_tokens,
            "default_output_tokens": self.default_output_tokens,
            "failure_rate": self.failure_rate,
            "max_connections": self.max_connections,
            "seed": self.seed,
            "model_name": self.model_name,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MockBehavior":
        return cls(**d)


class TimestampLog:
    """Append-only per-request server-side timing log, flushed at shutdown."""

    def __init__(self) -> None:
        self.entries: list[dict] = []

    def add(self, request_id: str, receipt_ns: int, emissions_ns: list[int], **extra) -> None:
        entry = {"request_id": request_id, "receipt_ns": receipt_ns, "emissions_ns": emissions_ns}
        entry.update(extra)
        self.entries.append(entry)

    def flush(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry, separators=(",", ":")))
                fh.write("\n")


# ---------------------------------------------------------------------------
# ASGI application
# ---------------------------------------------------------------------------

_SSE_HEADERS = [
    (b"content-type", b"text/event-stream"),
    (b"cache-control", b"no-cache"),
]
_JSON_HEADERS = [(b"content-type", b"application/json")]


def _frame(obj: dict) -> bytes:
    return b"data: " + json.dumps(obj, separators=(",", ":")).encode() + b"\n\n"


def build_app(
    behavior: MockBehavior,
    log: TimestampLog | None = None,
    *,
    rng_seed: int | None = None,
) -> Callable:
    """Build the ASGI app implementing the simulator behavior."""
    rng = random.Random(behavior.seed if rng_seed is None else rng_seed)
    state = {"active": 0, "served": 0}
    per_token_ns = round(behavior.per_token_delay_s * NS_PER_S)
    prefill_ns = round(behavior.prefill_delay_s * NS_PER_S)

    async def _send_json(send, status: int, obj: dict) -> None:
        body = json.dumps(obj).encode()
        await send(
            {"type": "http.response.start", "status": status, "headers": _JSON_HEADERS}
        )
        await send({"type": "http.response.body", "body": body})

    async def _read_body(receive) -> bytes:
        chunks = []
        while True:
            message = await receive()
            if message["type"] == "http.disconnect":
                raise ConnectionResetError("client disconnected")
            chunks.append(message.get("body", b""))
            if not message.get("more_body"):
                return b"".join(chunks)

    def _gap_deadlines(receipt_ns: int, n_tokens: int) -> list[int]:
        """Absolute emission deadlines; zero-delay mode yields all-past deadlines."""
        deadlines = []
        t = receipt_ns + prefill_ns
        for k in range(n_tokens):
            if k > 0:
                gap = per_token_ns
                if behavior.jitter_s > 0:
                    gap = max(0, round(gap + rng.gauss(0.0, behavior.jitter_s) * NS_PER_S))
                t += gap
            deadlines.append(t)
        return deadlines

    async def _stream_response(send, req_id: str, n_tokens: int, prompt_tokens: int,
                               receipt_ns: int, emissions: list[int]) -> None:
        await send(
            {"type": "http.response.start", "status": 200, "headers": list(_SSE_HEADERS)}
        )
        deadlines = _gap_deadlines(receipt_ns, n_tokens)
        created = int(time.time())
        base = {
            "id": req_id,
            "object": "chat.completion.chunk",
            "created": created,
            "model": behavior.model_name,
        }

        pending: list[bytes] = []
        pending_tokens = 0

        async def flush(more: bool = True) -> None:
            nonlocal pending_tokens
            if not pending:
                return
            ts = time.monotonic_ns()
            emissions.extend([ts] * pending_tokens)
            body = b"".join(pending)
            pending.clear()
            pending_tokens = 0
            await send({"type": "http.response.body", "body": body, "more_body": more})

        for k in range(n_tokens):
            remaining = deadlines[k] - time.monotonic_ns()
            if remaining > 0:
                await flush()
                while remaining > 0:
                    await _sleep(remaining / NS_PER_S)
                    remaining = deadlines[k] - time.monotonic_ns()
            chunk = dict(base)
            chunk["choices"] = [
                {
                    "index": 0,
                    "delta": {"content": f"tok{k % 50000:05d} "},
                    "finish_reason": "length" if k == n_tokens - 1 else None,
                }
            ]
            chunk["token_count"] = 1
            pending.append(_frame(chunk))
            pending_tokens += 1

        usage_chunk = dict(base)
        usage_chunk["choices"] = []
        usage_chunk["usage"] = {
            "prompt_tokens": prompt_tokens,
            "completion_tokens": n_tokens,
            "total_tokens": prompt_tokens + n_tokens,
        }
        pending.append(_frame(usage_chunk))
        pending.append(b"data: [DONE]\n\n")
        await flush(more=False)

    async def _handle_completion(scope, receive, send) -> None:
        headers = {k.decode(): v.decode() for k, v in scope.get("headers", [])}
        body = await _read_body(receive)
        receipt_ns = time.monotonic_ns()
        try:
            req = json.loads(body) if body else {}
        except json.JSONDecodeError:
            await _send_json(send, 400, {"error": {"message": "body is not JSON"}})
            return

        state["served"] += 1
        req_id = headers.get("x-request-id") or f"mock-{os.getpid()}-{state['served']}"
        prompt_tokens = 0
        for message in req.get("messages", []):
            prompt_tokens += len(str(message.get("content", "")).split())

        if behavior.failure_rate > 0 and rng.random() < behavior.failure_rate:
            if log is not None:
                log.add(req_id, receipt_ns, [], failed=True)
            await _send_json(
                send, 500, {"error": {"message": "injected failure", "type": "mock_failure"}}
            )
            return

        n_tokens = behavior.output_tokens
        if n_tokens is None:
            n_tokens = int(req.get("max_tokens") or behavior.default_output_tokens)
        n_tokens = max(1, n_tokens)

        emissions: list[int] = []
        disconnected = False
        try:
            if req.get("stream", False):
                await _stream_response(send, req_id, n_tokens, prompt_tokens,
                                       receipt_ns, emissions)
            else:
                total_ns = prefill_ns + n_tokens * per_token_ns
                remaining = receipt_ns + total_ns - time.monotonic_ns()
                if remaining > 0:
                    await _sleep(remaining / NS_PER_S)
                emissions.append(time.monotonic_ns())
                await _send_json(
                    send,
                    200,
                    {
                        "id": req_id,
                        "object": "chat.completion",
                        "created": int(time.time()),
                        "model": behavior.model_name,
                        "choices": [
                            {
                                "index": 0,
                                "message": {
                                    "role": "assistant",
                                    "content": " ".join(
                                        f"tok{k % 50000:05d}" for k in range(n_tokens)
                                    ),
                                },
                                "finish_reason": "length",
                            }
                        ],
                        "usage": {
                            "prompt_tokens": prompt_tokens,
                            "completion_tokens": n_tokens,
                            "total_tokens": prompt_tokens + n_tokens,
                        },
                    },
                )
        except (ConnectionResetError, OSError):
            disconnected = True
        finally:
            if log is not None:
                log.add(req_id, receipt_ns, emissions, disconnected=disconnected)

    async def app(scope, receive, send) -> None:
        if scope["type"] != "http":
            raise RuntimeError("http only")
        path = scope["path"]
        method = scope["method"]
        if method == "GET" and path == "/health":
            await _send_json(send, 200, {"status": "ok"})
            return
        if method == "POST" and path == "/v1/chat/completions":
            if state["active"] >= behavior.max_connections:
                await _send_json(send, 503, {"error": {"message": "connection limit"}})
                return
            state["active"] += 1
            try:
                await _handle_completion(scope, receive, send)
            finally:
                state["active"] -= 1
            return
        await _send_json(send, 404, {"error": {"message": f"no route {method} {path}"}})

    return app


# ---------------------------------------------------------------------------
# Multi-process server
# ---------------------------------------------------------------------------


def _reuseport_socket(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
    sock.bind((host, port))
    return sock


def _server_process_main(
    behavior: MockBehavior,
    host: str,
    port: int,
    log_path: str | None,
    worker_index: int,
    bound_event,
) -> None:
    import signal

    import uvicorn

    # uvicorn captures SIGTERM/SIGINT for graceful shutdown and then
    # re-raises the signal with the pre-existing handler restored; turn that
    # re-raise into a clean exit so the log flush below still runs.
    def _exit_handler(signum, frame):
        raise SystemExit(0)

    signal.signal(signal.SIGTERM, _exit_handler)
    signal.signal(signal.SIGINT, _exit_handler)

    sock = _reuseport_socket(host, port)
    bound_event.set()
    log = TimestampLog() if log_path else None
    app = build_app(behavior, log=log, rng_seed=behavior.seed * 1000003 + worker_index)
    config = uvicorn.Config(
        app,
        host=host,
        port=port,
        log_level="warning",
        access_log=False,
        lifespan="off",
        timeout_graceful_shutdown=3,
    )
    server = uvicorn.Server(config)
    try:
        server.run(sockets=[sock])
    finally:
        # no interruptions while flushing the log
        signal.signal(signal.SIGTERM, signal.SIG_IGN)
        signal.signal(signal.SIGINT, signal.SIG_IGN)
        if log is not None and log_path:
            log.flush(log_path)


@dataclass
class MockServerHandle:
    """A running simulator: its address, worker processes, and log locations."""

    behavior: MockBehavior
    host: str
    port: int
    processes: list
    log_paths: list[str]
    _placeholder: socket.socket | None = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def stop(self) -> None:
        """Gracefully stop all server processes and release the port."""
        for p in self.processes:
            if p.is_alive():
                p.terminate()
        deadline = time.monotonic() + 8.0
        for p in self.processes:
            p.join(timeout=max(0.1, deadline - time.monotonic()))
            if p.is_alive():
                p.kill()
                p.join(timeout=2.0)
        if self._placeholder is not None:
            self._placeholder.close()
            self._placeholder = None

    def read_timestamp_log(self) -> dict[str, dict]:
        """Merge per-process logs into a request-id keyed mapping."""
        merged: dict[str, dict] = {}
        for path in self.log_paths:
            if not Path(path).exists():
                continue
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        entry = json.loads(line)
                        merged[entry["request_id"]] = entry
        return merged


def self_timestamp_log(handle: MockServerHandle) -> dict[str, dict]:
    """Per-request server-side receipt and chunk-emission timestamps."""
    return handle.read_timestamp_log()


def serve(
    behavior: MockBehavior,
    bind_address: str = "127.0.0.1:0",
    *,
    server_workers: int = 1,
    log_dir: str | Path | None = None,
    ready_timeout_s: float = 20.0,
) -> MockServerHandle:
    """Start the simulator on the given address and wait until it is ready.

    ``server_workers`` processes share the port via SO_REUSEPORT; port 0
    picks a free port.  Raises BindError if the address cannot be bound and
    MockStartFailure if the server never answers its health check.
    """
    host, _, port_str = bind_address.partition(":")
    host = host or "127.0.0.1"
    port = int(port_str or 0)
    if server_workers < 1:
        raise InvalidParam("server_workers must be >= 1")

    try:
        placeholder = _reuseport_socket(host, port)
    except OSError as exc:
        raise BindError(f"cannot bind {bind_address}: {exc}") from exc
    port = placeholder.getsockname()[1]

    log_paths: list[str] = []
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)

    ctx = mp.get_context("spawn")
    processes = []
    bound_events = []
    for i in range(server_workers):
        log_path = str(Path(log_dir) / f"mock-w{i}.jsonl") if log_dir is not None else None
        if log_path:
            log_paths.append(log_path)
        event = ctx.Event()
        proc = ctx.Process(
            target=_server_process_main,
            args=(behavior, host, port, log_path, i, event),
            daemon=True,
        )
        proc.start()
        processes.append(proc)
        bound_events.append(event)

    handle = MockServerHandle(
        behavior=behavior,
        host=host,
        port=port,
        processes=processes,
        log_paths=log_paths,
        _placeholder=placeholder,
    )
    try:
        deadline = time.monotonic() + ready_timeout_s
        for event in bound_events:
            if not event.wait(timeout=max(0.1, deadline - time.monotonic())):
                raise MockStartFailure("server process never bound its socket")
        _wait_healthy(handle.url, deadline)
    except Exception:
        handle.stop()
        raise
    return handle


def _wait_healthy(url: str, deadline: float) -> None:
    import httpx

    last_error: Exception | None = None
    while time.monotonic() < deadline:
        try:
            resp = httpx.get(f"{url}/health", timeout=1.0)
            if resp.status_code == 200:
                return
        except httpx.HTTPError as exc:
            last_error = exc
        time.sleep(0.05)
    raise MockStartFailure(f"mock server at {url} not healthy: {last_error}")


def measure_capacity(
    url: str,
    *,
    seconds: float = 2.0,
    concurrency: int = 16,
    max_tokens: int = 8,
    model: str = "mock-model",
) -> float:
    """Rough streaming requests/second the server sustains (self-test probe)."""
    import httpx

    async def _probe() -> float:
        done = 0
        deadline = time.monotonic() + seconds
        async with httpx.AsyncClient(base_url=url, timeout=10.0) as client:

            async def worker() -> None:
                nonlocal done
                body = {
                    "model": model,
                    "messages": [{"role": "user", "content": "capacity probe"}],
                    "max_tokens": max_tokens,
                    "stream": True,
                }
                while time.monotonic() < deadline:
                    async with client.stream("POST", "/v1/chat/completions", json=body) as r:
                        async for _ in r.aiter_raw():
                            pass
                    done += 1

            start = time.monotonic()
            await asyncio.gather(*(worker() for _ in range(concurrency)))
            elapsed = time.monotonic() - start
        return done / elapsed

    return asyncio.run(_probe())
