import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samp.allocator import (
    Profile,
    ProfilePoint,
    allocate_decay_aware,
    build_profile,
    evaluate_accuracy,
    load_eval_file,
    rank_by_ratio,
    select_by_accuracy_threshold,
    select_by_latency_threshold,
    sweep_layer_counts,
)
from samp.encoder import FFN_ONLY, FP, FULLY_QUANT, PrecisionPlan
from samp.errors import ConfigurationError, DataFormatError, InfeasibleError


def make_profile(acc, lat, spd=None, mode=FFN_ONLY):
    spd = spd or [lat[0] / l for l in lat]
    points = [
        ProfilePoint(2 * i, a, l, s) for i, (a, l, s) in enumerate(zip(acc, lat, spd))
    ]
    return Profile(mode=mode, points=points)


@st.composite
def random_profiles(draw):
    n = draw(st.integers(min_value=1, max_value=8))
    accs = draw(st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n))
    lats = draw(st.lists(st.floats(0.01, 10.0), min_size=n, max_size=n))
    return make_profile(accs, lats)


class TestDecayAware:
    def test_single_point(self):
        assert allocate_decay_aware(make_profile([0.9], [10.0])) == 0

    def test_hand_trace(self):
        # i=1: dr = 0.005 < MAX -> record; i=2: dr = 0.045, no update
        assert allocate_decay_aware(make_profile([0.90, 0.89, 0.80], [10.0, 8.0, 6.0])) == 1

    def test_constant_accuracy_increasing_latency_regression(self):
        # i=1 updates with dr = 0, later i never do: the result is 1
        profile = make_profile([0.5, 0.5, 0.5], [1.0, 2.0, 3.0])
        assert allocate_decay_aware(profile) == 1

    def test_negative_dr_always_updates(self):
        # accuracy improves while latency drops: dr < 0 at every step
        profile = make_profile([0.5, 0.6, 0.7], [3.0, 2.0, 1.0])
        assert allocate_decay_aware(profile) == 2

    def test_identical_latency_skipped_with_warning(self, caplog):
        profile = make_profile([0.9, 0.8, 0.7], [1.0, 1.0, 0.5])
        with caplog.at_level(logging.WARNING, logger="samp.allocator"):
            idx = allocate_decay_aware(profile)
        assert any("skipping" in rec.message for rec in caplog.records)
        assert idx == 2

    def test_speedup_semantics_degenerates_on_monotone_tradeoff(self):
        profile = make_profile([0.9, 0.8, 0.7, 0.6], [4.0, 3.0, 2.0, 1.0])
        assert allocate_decay_aware(profile, "speedup") == 3
        assert allocate_decay_aware(profile, "latency") == 1

    def test_bad_semantics(self):
        with pytest.raises(ConfigurationError):
            allocate_decay_aware(make_profile([0.5], [1.0]), "throughput")


class TestThresholdSelectors:
    def test_latency_infeasible_reports_floor(self):
        profile = make_profile([0.9, 0.8], [2.0, 1.0])
        with pytest.raises(InfeasibleError, match="1"):
            select_by_latency_threshold(profile, 0.5)

    def test_latency_unconstrained_is_accuracy_argmax(self):
        profile = make_profile([0.7, 0.9, 0.8], [3.0, 2.0, 1.0])
        assert select_by_latency_threshold(profile, float("inf")) == 1

    def test_accuracy_infeasible_reports_ceiling(self):
        profile = make_profile([0.6, 0.5], [2.0, 1.0])
        with pytest.raises(InfeasibleError, match="0.6"):
            select_by_accuracy_threshold(profile, 0.95)

    def test_accuracy_unconstrained_is_latency_argmin(self):
        profile = make_profile([0.9, 0.7, 0.8], [3.0, 1.0, 2.0])
        assert select_by_accuracy_threshold(profile, float("-inf")) == 1

    def test_tie_break_lowest_index(self):
        profile = make_profile([0.9, 0.9, 0.9], [3.0, 2.0, 2.0])
        assert select_by_latency_threshold(profile, 10.0) == 0
        assert select_by_accuracy_threshold(profile, 0.5) == 1

    @given(random_profiles())
    @settings(max_examples=50, deadline=None)
    def test_unconstrained_properties(self, profile):
        accs = [p.accuracy for p in profile.points]
        lats = [p.latency for p in profile.points]
        i = select_by_latency_threshold(profile, float("inf"))
        assert accs[i] == max(accs) and accs.index(max(accs)) == i
        j = select_by_accuracy_threshold(profile, float("-inf"))
        assert lats[j] == min(lats) and lats.index(min(lats)) == j


class TestRankByRatio:
    def test_baseline_only_is_empty(self):
        assert rank_by_ratio(make_profile([0.9], [1.0])) == []

    def test_single_candidate(self):
        assert rank_by_ratio(make_profile([0.9, 0.8], [2.0, 1.0])) == [1]

    def test_free_speedup_ranks_first(self):
        profile = make_profile([0.80, 0.85, 0.70], [3.0, 2.0, 1.0])
        assert rank_by_ratio(profile)[0] == 1

    def test_equal_losses_rank_by_speedup(self):
        acc = [0.9, 0.8, 0.8, 0.8]
        spd = [1.0, 3.0, 2.0, 4.0]
        profile = make_profile(acc, [1.0 / s for s in spd], spd)
        assert rank_by_ratio(profile) == [3, 1, 2]

    @given(random_profiles())
    @settings(max_examples=50, deadline=None)
    def test_indices_unique_and_exclude_baseline(self, profile):
        ranked = rank_by_ratio(profile)
        assert len(ranked) == len(set(ranked))
        assert 0 not in ranked
        assert len(ranked) <= 5


class TestProfileSerialization:
    def test_round_trip(self):
        profile = make_profile([0.9, 0.8], [2.0, 1.0])
        profile.env["repeats"] = 3
        loaded = Profile.from_json(profile.to_json())
        assert loaded.mode == profile.mode
        assert loaded.points == profile.points
        assert loaded.env["repeats"] == 3

    def test_schema_fields(self):
        import json

        doc = json.loads(make_profile([0.9, 0.8], [2.0, 1.0]).to_json())
        assert set(doc) == {"mode", "baseline", "points", "env"}
        assert set(doc["points"][0]) == {"quantized_layers", "accuracy", "latency_s", "speedup"}
        assert doc["baseline"] == doc["points"][0]

    def test_bad_document(self):
        with pytest.raises(DataFormatError):
            Profile.from_json('{"mode": "FFN_ONLY"}')

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            Profile(mode=FFN_ONLY, points=[])
        with pytest.raises(ConfigurationError):
            ProfilePoint(0, 0.9, 0.0, 1.0)
        with pytest.raises(ConfigurationError):
            ProfilePoint(0, 0.9, 1.0, -2.0)
        p = [ProfilePoint(2, 0.9, 1.0, 1.0), ProfilePoint(2, 0.8, 1.0, 1.0)]
        with pytest.raises(ConfigurationError):
            Profile(mode=FFN_ONLY, points=p)


class TestEvalData:
    def test_eval_file_parsing(self, tmp_path):
        path = tmp_path / "eval.tsv"
        path.write_text("hello\t1\na\tb\t0\n\n", encoding="utf-8")
        rows = load_eval_file(path)
        assert rows == [("hello", None, "1"), ("a", "b", "0")]

    def test_bad_line_reports_number(self, tmp_path):
        path = tmp_path / "eval.tsv"
        path.write_text("only-one-field\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="line 1"):
            load_eval_file(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "eval.tsv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(DataFormatError, match="empty"):
            load_eval_file(path)


class TestBuildProfile:
    def test_sweep_layer_counts(self):
        assert sweep_layer_counts(2, 2) == [0, 2]
        assert sweep_layer_counts(12, 2) == [0, 2, 4, 6, 8, 10, 12]
        assert sweep_layer_counts(5, 2) == [0, 2, 4, 5]
        with pytest.raises(ConfigurationError):
            sweep_layer_counts(2, 0)

    def test_endpoints_profile(self, tiny_engine):
        examples = [("the quick brown fox", None, "0"), ("a lazy dog", None, "1")]
        profile = build_profile(tiny_engine, FFN_ONLY, examples, layer_step=2,
                                repeats=2, warmup=0)
        assert [p.quantized_layers for p in profile.points] == [0, 2]
        assert profile.points[0].speedup == 1.0

    def test_baseline_accuracy_equals_direct_fp_eval(self, tiny_engine):
        examples = [
            ("the quick brown fox", None, "0"),
            ("a lazy dog", None, "1"),
            ("good fast model", None, "0"),
        ]
        profile = build_profile(tiny_engine, FULLY_QUANT, examples, layer_step=1,
                                repeats=1, warmup=0)
        direct = evaluate_accuracy(tiny_engine, PrecisionPlan.prefix(FP, 2, 0), examples)
        assert profile.points[0].accuracy == direct

    def test_gemm_cost_metric_nonincreasing(self, tiny_engine):
        examples = [(t, None, "0") for t in (
            "the quick brown fox", "a lazy dog runs", "good fast model",
            "bad slow model", "quant the model layer", "unable to match",
            "the dog walks", "a fox jumps", "text match good", "the lazy cat",
            "fast dog", "slow fox", "the model", "a text", "good dog",
            "bad cat", "quick match", "lazy model", "fox text", "dog model",
        )]
        profile = build_profile(tiny_engine, FULLY_QUANT, examples, layer_step=1,
                                repeats=1, warmup=0)
        stats = profile.env["gemm_stats"]
        costs = [
            stats[str(p.quantized_layers)]["f32_gemm_bytes"]
            + stats[str(p.quantized_layers)]["int8_gemm_bytes"]
            for p in profile.points
        ]
        assert all(a >= b for a, b in zip(costs, costs[1:]))
        int8_counts = [stats[str(p.quantized_layers)]["int8_gemms"] for p in profile.points]
        assert int8_counts == sorted(int8_counts)
