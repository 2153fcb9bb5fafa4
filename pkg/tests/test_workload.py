"""Workload generation: exact token accounting, prefix control, determinism."""

from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamload.errors import FormatError, InvalidParam
from streamload.workload import (
    WorkloadSpec,
    default_tokenizer,
    load_dataset,
    materialize,
    prefixed_prompts,
    synth_prompt,
)


def common_prefix_len(token_lists: list[list[int]]) -> int:
    """Independent oracle: longest prefix shared by every token sequence."""
    n = min(len(t) for t in token_lists)
    for i in range(n):
        first = token_lists[0][i]
        if any(t[i] != first for t in token_lists[1:]):
            return i
    return n


class TestSynthPrompt:
    def test_exact_token_count(self):
        spec = WorkloadSpec(input_tokens=320, seed=1)
        inst = synth_prompt(spec, 0)
        assert inst.input_token_count == 320
        assert len(default_tokenizer().encode(inst.payload)) == 320

    def test_single_token(self):
        inst = synth_prompt(WorkloadSpec(input_tokens=1, seed=1), 0)
        assert inst.input_token_count == 1
        assert " " not in inst.payload

    def test_deterministic_per_seed_and_index(self):
        spec = WorkloadSpec(input_tokens=64, seed=9)
        assert synth_prompt(spec, 3) == synth_prompt(spec, 3)
        assert synth_prompt(spec, 3) != synth_prompt(spec, 4)

    def test_truncation_limit_caps_count(self):
        spec = WorkloadSpec(input_tokens=500, truncation_limit=100, seed=1)
        assert synth_prompt(spec, 0).input_token_count == 100

    def test_uniform_range(self):
        spec = WorkloadSpec(input_tokens=(10, 20), seed=2)
        counts = {synth_prompt(spec, i).input_token_count for i in range(50)}
        assert counts <= set(range(10, 21))
        assert len(counts) > 1


class TestPrefixedPrompts:
    def test_no_shared_prefix(self):
        spec = WorkloadSpec(input_tokens=64, shared_prefix_fraction=0.0, seed=5)
        prompts = prefixed_prompts(spec, 40)
        tokens = [default_tokenizer().encode(p.payload) for p in prompts]
        assert common_prefix_len(tokens) == 0
        assert all(p.prefix_id is None for p in prompts)

    def test_full_prefix_identical_prompts(self):
        spec = WorkloadSpec(input_tokens=64, shared_prefix_fraction=1.0, seed=5)
        prompts = prefixed_prompts(spec, 10)
        assert len({p.payload for p in prompts}) == 1
        assert prompts[0].prefix_id is not None

    def test_half_prefix_token_oracle(self):
        spec = WorkloadSpec(input_tokens=320, shared_prefix_fraction=0.5, seed=5)
        prompts = prefixed_prompts(spec, 50)
        tokens = [default_tokenizer().encode(p.payload) for p in prompts]
        assert all(len(t) == 320 for t in tokens)
        assert common_prefix_len(tokens) == 160

    @pytest.mark.parametrize("fraction,total", [(0.3, 10), (0.25, 13), (0.9, 7)])
    def test_pairwise_prefix_at_least_ceil(self, fraction, total):
        spec = WorkloadSpec(input_tokens=total, shared_prefix_fraction=fraction, seed=8)
        prompts = prefixed_prompts(spec, 12)
        expected = math.ceil(fraction * total)
        tokens = [default_tokenizer().encode(p.payload) for p in prompts]
        for a in tokens:
            for b in tokens:
                assert common_prefix_len([a, b]) >= expected

    def test_requires_fixed_input_tokens(self):
        spec = WorkloadSpec(input_tokens=(10, 20), shared_prefix_fraction=0.5, seed=1)
        with pytest.raises(InvalidParam):
            prefixed_prompts(spec, 5)


class TestLoadDataset:
    @pytest.fixture
    def dataset(self, tmp_path):
        path = tmp_path / "prompts.jsonl"
        lines = [
            {"text": "alpha beta gamma delta"},
            {"text": " ".join(f"word{i}" for i in range(50))},
            {"text": "solo"},
        ]
        path.write_text("\n".join(json.dumps(line) for line in lines) + "\n")
        return str(path)

    def test_exact_counts(self, dataset):
        spec = WorkloadSpec(source="dataset", dataset_path=dataset, seed=1)
        instances = load_dataset(spec)
        assert sorted(p.input_token_count for p in instances) == [1, 4, 50]

    def test_truncates_to_limit(self, dataset):
        spec = WorkloadSpec(source="dataset", dataset_path=dataset, truncation_limit=8, seed=1)
        instances = load_dataset(spec)
        assert max(p.input_token_count for p in instances) == 8
        for p in instances:
            assert p.input_token_count <= 8

    def test_deterministic_ordering_and_totals(self, dataset):
        spec = WorkloadSpec(source="dataset", dataset_path=dataset, seed=77)
        a = load_dataset(spec)
        b = load_dataset(spec)
        assert a == b
        other = load_dataset(WorkloadSpec(source="dataset", dataset_path=dataset, seed=78))
        assert sum(p.input_token_count for p in other) == sum(
            p.input_token_count for p in a
        )

    def test_missing_field(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"prompt": "hi"}\n')
        spec = WorkloadSpec(source="dataset", dataset_path=str(path), seed=1)
        with pytest.raises(FormatError):
            load_dataset(spec)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("not json\n")
        with pytest.raises(FormatError):
            load_dataset(WorkloadSpec(source="dataset", dataset_path=str(path), seed=1))

    def test_missing_file(self, tmp_path):
        spec = WorkloadSpec(source="dataset", dataset_path=str(tmp_path / "nope.jsonl"), seed=1)
        with pytest.raises(OSError):
            load_dataset(spec)


class TestMaterialize:
    def test_manifest_totals(self):
        spec = WorkloadSpec(input_tokens=32, output_tokens=10, seed=4)
        instances, manifest = materialize(spec, 25)
        assert manifest["count"] == 25
        assert manifest["total_input_tokens"] == sum(p.input_token_count for p in instances)
        assert manifest["total_input_tokens"] == 25 * 32
        assert manifest["sampling"] == {"temperature": 1.0}

    def test_sampling_override_archived(self):
        spec = WorkloadSpec(input_tokens=8, sampling={"temperature": 0.7, "top_p": 0.9}, seed=1)
        _, manifest = materialize(spec, 1)
        assert manifest["sampling"] == {"temperature": 0.7, "top_p": 0.9}

    def test_cache_fraction_reported(self):
        spec = WorkloadSpec(input_tokens=320, shared_prefix_fraction=0.5, seed=2)
        _, manifest = materialize(spec, 4)
        assert manifest["shared_prefix_tokens"] == 160
        assert manifest["cache_eligible_fraction"] == pytest.approx(0.5)

    def test_dataset_cycles_deterministically(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"text": "a b"}\n{"text": "c d e"}\n')
        spec = WorkloadSpec(source="dataset", dataset_path=str(path), seed=3)
        instances, manifest = materialize(spec, 5)
        assert len(instances) == 5
        assert instances[0] == instances[2] == instances[4]
        again, manifest2 = materialize(spec, 5)
        assert again == instances and manifest == manifest2

    @given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=1, max_value=40))
    @settings(max_examples=30, deadline=None)
    def test_total_tokens_pure_function_of_spec_and_seed(self, seed, n):
        spec = WorkloadSpec(input_tokens=(5, 50), seed=seed)
        _, m1 = materialize(spec, n)
        _, m2 = materialize(spec, n)
        assert m1["total_input_tokens"] == m2["total_input_tokens"]
        assert m1 == m2


class TestSpecValidation:
    def test_synthetic_requires_input_tokens(self):
        with pytest.raises(InvalidParam):
            WorkloadSpec()

    def test_fraction_range(self):
        with pytest.raises(InvalidParam):
            WorkloadSpec(input_tokens=8, shared_prefix_fraction=1.5)

    def test_dataset_requires_path(self):
        with pytest.raises(InvalidParam):
            WorkloadSpec(source="dataset")

    def test_json_round_trip(self):
        spec = WorkloadSpec(
            input_tokens=(10, 32), output_tokens=64, shared_prefix_fraction=0.25,
            truncation_limit=128, seed=11, sampling={"temperature": 0.2},
        )
        assert WorkloadSpec.from_json_dict(spec.to_json_dict()) == spec
