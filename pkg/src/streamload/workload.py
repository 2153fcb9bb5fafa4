"""Request payload generation with exact input-token accounting.

Synthetic prompts are built from a fixed synthetic vocabulary so the token
count of every payload is known exactly, without a model tokenizer round
trip.  Dataset prompts are tokenized, truncated at a standardized limit, and
ordered deterministically per seed, so total input-token volume is a pure
function of (spec, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import FormatError, InvalidParam, TokenizerUnavailable

SOURCE_SYNTHETIC = "synthetic"
SOURCE_DATASET = "dataset"

# Sampling parameters are never defaulted silently: these effective values
# are merged under user-supplied ones and archived in every report.
DEFAULT_SAMPLING: dict[str, object] = {"temperature": 1.0}

# Domain tags keeping the per-purpose RNG streams disjoint under one seed.
_DOMAIN_SYNTH = 1
_DOMAIN_PREFIX = 2
_DOMAIN_SUFFIX = 3
_DOMAIN_DATASET = 4


class Tokenizer(Protocol):
    """Minimal tokenizer contract; adapters can wrap any real tokenizer."""

    name: str
    vocab_size: int

    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids: Sequence[int]) -> str: ...

    def truncate(self, text: str, limit: int) -> tuple[str, int]:
        """Return (payload clipped to at most limit tokens, its token count)."""
        ...


class WordTokenizer:
    """Whitespace tokenizer over a fixed synthetic vocabulary.

    Every whitespace-separated word is one token.  Words from the synthetic
    vocabulary round-trip exactly; out-of-vocabulary words (dataset text) map
    to a stable hashed id, which preserves counts and equality comparisons
    but not the original spelling.
    """

    name = "word"

    def __init__(self, vocab_size: int = 50_000):
        if vocab_size < 2:
            raise TokenizerUnavailable("vocab_size must be >= 2")
        self.vocab_size = vocab_size
        self._words = [f"tok{i:05d}" for i in range(vocab_size)]
        self._ids = {w: i for i, w in enumerate(self._words)}

    def encode(self, text: str) -> list[int]:
        out = []
        for word in text.split():
            known = self._ids.get(word)
            if known is None:
                digest = hashlib.blake2b(word.encode(), digest_size=8).digest()
                known = int.from_bytes(digest, "big") % self.vocab_size
            out.append(known)
        return out

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self._words[i % self.vocab_size] for i in ids)

    def truncate(self, text: str, limit: int) -> tuple[str, int]:
        words = text.split()[:limit]
        return " ".join(words), len(words)


_DEFAULT_TOKENIZER: WordTokenizer | None = None


def default_tokenizer() -> WordTokenizer:
    global _DEFAULT_TOKENIZER
    if _DEFAULT_TOKENIZER is None:
        _DEFAULT_TOKENIZER = WordTokenizer()
    return _DEFAULT_TOKENIZER


# ---------------------------------------------------------------------------
# Spec and instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkloadSpec:
    """Declarative description of the request payload population.

    ``input_tokens`` / ``output_tokens`` take a fixed count or a (low, high)
    tuple drawn uniformly per request.  ``output_tokens`` is sent as the
    request's max-token parameter; received counts are reported alongside so
    server-side shortfalls are visible rather than hidden.
    """

    source: str = SOURCE_SYNTHETIC
    input_tokens: int | tuple[int, int] | None = None
    output_tokens: int | tuple[int, int] = 128
    shared_prefix_fraction: float = 0.0
    truncation_limit: int = 4096
    seed: int = 0
    sampling: dict = field(default_factory=dict)
    dataset_path: str | None = None
    dataset_field: str = "text"

    def __post_init__(self) -> None:
        if self.source not in (SOURCE_SYNTHETIC, SOURCE_DATASET):
            raise InvalidParam(f"unknown workload source {self.source!r}")
        if not 0.0 <= self.shared_prefix_fraction <= 1.0:
            raise InvalidParam("shared_prefix_fraction must be in [0, 1]")
        if self.truncation_limit < 1:
            raise InvalidParam("truncation_limit must be >= 1")
        if self.source == SOURCE_SYNTHETIC and self.input_tokens is None:
            raise InvalidParam("synthetic workload requires explicit input_tokens")
        if self.source == SOURCE_DATASET and not self.dataset_path:
            raise InvalidParam("dataset workload requires dataset_path")
        for name in ("input_tokens", "output_tokens"):
            value = getattr(self, name)
            if value is None:
                continue
            if isinstance(value, int):
                if value < 1:
                    raise InvalidParam(f"{name} must be >= 1")
            else:
                lo, hi = value
                if lo < 1 or hi < lo:
                    raise InvalidParam(f"{name} range must satisfy 1 <= low <= high")

    def effective_sampling(self) -> dict:
        merged = dict(DEFAULT_SAMPLING)
        merged.update(self.sampling)
        return merged

    def to_json_dict(self) -> dict:
        return {
            "source": self.source,
            "input_tokens": _count_to_json(self.input_tokens),
            "output_tokens": _count_to_json(self.output_tokens),
            "shared_prefix_fraction": self.shared_prefix_fraction,
            "truncation_limit": self.truncation_limit,
            "seed": self.seed,
            "sampling": dict(self.sampling),
            "dataset_path": self.dataset_path,
            "dataset_field": self.dataset_field,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "WorkloadSpec":
        return cls(
            source=d["source"],
            input_tokens=_count_from_json(d.get("input_tokens")),
            output_tokens=_count_from_json(d.get("output_tokens")),
            shared_prefix_fraction=d.get("shared_prefix_fraction", 0.0),
            truncation_limit=d.get("truncation_limit", 4096),
            seed=d.get("seed", 0),
            sampling=dict(d.get("sampling", {})),
            dataset_path=d.get("dataset_path"),
            dataset_field=d.get("dataset_field", "text"),
        )


def _count_to_json(value):
    if isinstance(value, tuple):
        return {"uniform": [value[0], value[1]]}
    return value


def _count_from_json(value):
    if isinstance(value, dict):
        lo, hi = value["uniform"]
        return (int(lo), int(hi))
    return value


@dataclass(frozen=True)
class PromptInstance:
    """One request payload with its exact token count."""

    payload: str
    input_token_count: int
    prefix_id: str | None = None
    max_output_tokens: int = 128


def sample_count(value: int | tuple[int, int], rng: np.random.Generator) -> int:
    if isinstance(value, int):
        return value
    lo, hi = value
    return int(rng.integers(lo, hi + 1))


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def synth_prompt(
    spec: WorkloadSpec, index: int, tokenizer: Tokenizer | None = None
) -> PromptInstance:
    """Random prompt with an exact token count, deterministic per (seed, index)."""
    if spec.source != SOURCE_SYNTHETIC:
        raise InvalidParam("synth_prompt requires a synthetic workload spec")
    tok = tokenizer or default_tokenizer()
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, _DOMAIN_SYNTH, index])
    n = min(sample_count(spec.input_tokens, rng), spec.truncation_limit)
    ids = rng.integers(0, tok.vocab_size, size=n)
    payload = tok.decode([int(i) for i in ids])
    return PromptInstance(
        payload=payload,
        input_token_count=n,
        prefix_id=None,
        max_output_tokens=sample_count(spec.output_tokens, rng),
    )


def prefixed_prompts(
    spec: WorkloadSpec, n: int, tokenizer: Tokenizer | None = None
) -> list[PromptInstance]:
    """Prompts whose first ceil(p * input_tokens) tokens are identical.

    The shared prefix enforces a known cache-eligible fraction
    ceil(p*I)/I; suffix tokens are independent per prompt.  Requires a fixed
    input token count.
    """
    if spec.source != SOURCE_SYNTHETIC:
        raise InvalidParam("prefixed_prompts requires a synthetic workload spec")
    if not isinstance(spec.input_tokens, int):
        raise InvalidParam("shared-prefix prompts require a fixed input_tokens count")
    if n < 1:
        raise InvalidParam(f"n must be >= 1, got {n}")
    tok = tokenizer or default_tokenizer()
    total = min(spec.input_tokens, spec.truncation_limit)
    plen = math.ceil(spec.shared_prefix_fraction * total)

    seed32 = spec.seed & 0xFFFFFFFF
    prefix_rng = np.random.default_rng([seed32, _DOMAIN_PREFIX])
    prefix_ids = [int(i) for i in prefix_rng.integers(0, tok.vocab_size, size=plen)]
    prefix_id = None
    if plen:
        digest = hashlib.sha256(json.dumps(prefix_ids).encode()).hexdigest()[:12]
        prefix_id = f"prefix-{digest}"

    out = []
    for i in range(n):
        suffix_rng = np.random.default_rng([seed32, _DOMAIN_SUFFIX, i])
        suffix_ids = [int(v) for v in suffix_rng.integers(0, tok.vocab_size, size=total - plen)]
        ids = prefix_ids + suffix_ids
        out.append(
            PromptInstance(
                payload=tok.decode(ids),
                input_token_count=total,
                prefix_id=prefix_id,
                max_output_tokens=sample_count(spec.output_tokens, suffix_rng),
            )
        )
    return out


def load_dataset(spec: WorkloadSpec, tokenizer: Tokenizer | None = None) -> list[PromptInstance]:
    """Load JSON-lines prompts, truncate at the standardized limit, order per seed."""
    if spec.source != SOURCE_DATASET:
        raise InvalidParam("load_dataset requires a dataset workload spec")
    tok = tokenizer or default_tokenizer()
    path = Path(spec.dataset_path)
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: not JSON: {exc}") from exc
            if not isinstance(obj, dict) or spec.dataset_field not in obj:
                raise FormatError(f"{path}:{lineno}: missing field {spec.dataset_field!r}")
            payload, count = tok.truncate(str(obj[spec.dataset_field]), spec.truncation_limit)
            if count == 0:
                raise FormatError(f"{path}:{lineno}: prompt has no tokens")
            rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, _DOMAIN_DATASET, lineno])
            instances.append(
                PromptInstance(
                    payload=payload,
                    input_token_count=count,
                    prefix_id=None,
                    max_output_tokens=sample_count(spec.output_tokens, rng),
                )
            )
    if not instances:
        raise FormatError(f"{path}: dataset is empty")
    order_rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, _DOMAIN_DATASET])
    order = order_rng.permutation(len(instances))
    return [instances[int(i)] for i in order]


def materialize(
    spec: WorkloadSpec, n: int, tokenizer: Tokenizer | None = None
) -> tuple[list[PromptInstance], dict]:
    """Produce exactly n prompt instances plus the workload manifest.

    Dataset workloads cycle deterministically when n exceeds the dataset
    size.  The manifest captures everything needed to audit token accounting:
    counts, totals, prefix control, seed, and effective sampling parameters.
    """
    if n < 1:
        raise InvalidParam(f"n must be >= 1, got {n}")
    tok = tokenizer or default_tokenizer()
    if spec.source == SOURCE_SYNTHETIC:
        if spec.shared_prefix_fraction > 0:
            instances = prefixed_prompts(spec, n, tok)
        else:
            instances = [synth_prompt(spec, i, tok) for i in range(n)]
    else:
        pool = load_dataset(spec, tok)
        instances = [pool[i % len(pool)] for i in range(n)]

    total_input = sum(p.input_token_count for p in instances)
    prefix_tokens = 0
    if spec.source == SOURCE_SYNTHETIC and isinstance(spec.input_tokens, int):
        prefix_tokens = math.ceil(spec.shared_prefix_fraction * spec.input_tokens)
    manifest = {
        "source": spec.source,
        "count": n,
        "total_input_tokens": total_input,
        "requested_output_tokens": _count_to_json(spec.output_tokens),
        "shared_prefix_fraction": spec.shared_prefix_fraction,
        "shared_prefix_tokens": prefix_tokens,
        "cache_eligible_fraction": (
            prefix_tokens / spec.input_tokens
            if isinstance(spec.input_tokens, int) and spec.input_tokens
            else 0.0
        ),
        "truncation_limit": spec.truncation_limit,
        "seed": spec.seed,
        "sampling": spec.effective_sampling(),
        "tokenizer": tok.name,
        "dataset_path": spec.dataset_path,
    }
    return instances, manifest
