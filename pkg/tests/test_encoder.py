import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from samp.encoder import (
    EMBED_OUT_SITE,
    FFN_ONLY,
    FP,
    FULLY_QUANT,
    LAYER_FFN_INT8,
    LAYER_FP,
    LAYER_FULL_INT8,
    Engine,
    LayerWeights,
    PrecisionPlan,
    attn_in_site,
    embed_fused,
    ffn_fp,
    mha_fp,
)
from samp.errors import CalibrationError, ConfigurationError, InputError
from samp.kernels import add_bias_residual, f16_round, gelu, gemm_f32, layernorm
from samp.synthetic import build_archive
from samp.tokenization import EncodedInput
from samp.trace import trace_ops

F32 = np.float32


def make_layer(hidden, inter, rng, layer_index=0, scale=0.4):
    def mat(r, c):
        return (scale * rng.standard_normal((r, c))).astype(F32)

    def vec(n, s=0.1):
        return (s * rng.standard_normal(n)).astype(F32)

    return LayerWeights(
        qw=mat(hidden, hidden), qb=vec(hidden),
        kw=mat(hidden, hidden), kb=vec(hidden),
        vw=mat(hidden, hidden), vb=vec(hidden),
        ow=mat(hidden, hidden), ob=vec(hidden),
        attn_ln_g=(1.0 + vec(hidden)).astype(F32), attn_ln_b=vec(hidden),
        w1=mat(hidden, inter), b1=vec(inter),
        w2=mat(inter, hidden), b2=vec(hidden),
        ffn_ln_g=(1.0 + vec(hidden)).astype(F32), ffn_ln_b=vec(hidden),
        layer_index=layer_index,
    )


class TestEmbedFused:
    def test_zero_tables_give_beta(self, tiny_archive):
        arch = build_archive(seed=21)
        tensors = {k: np.zeros_like(v) for k, v in arch.tensors.items()}
        beta = np.array([0.5, -0.25] * 4, dtype=F32)
        tensors["embeddings.layernorm.beta"] = beta
        from samp.archive import ModelArchive

        zeroed = ModelArchive(arch.manifest, tensors, arch.vocab)
        enc = EncodedInput([1, 2, 3], [0, 0, 0], 3)
        out = embed_fused(zeroed, enc)
        for row in out:
            np.testing.assert_array_equal(row, beta)

    def test_matches_unfused_oracle_bitwise(self, tiny_archive):
        enc = EncodedInput([4, 5, 6, 2], [0, 0, 1, 1], 4)
        t = tiny_archive.tensors
        ids = np.array(enc.token_ids)
        segs = np.array(enc.segment_ids)
        word = t["embeddings.word.weight"][ids]
        pos = t["embeddings.position.weight"][: len(ids)]
        typ = t["embeddings.token_type.weight"][segs]
        oracle = layernorm(
            ((word + pos) + typ).astype(F32),
            t["embeddings.layernorm.gamma"],
            t["embeddings.layernorm.beta"],
            tiny_archive.manifest.layernorm_eps,
        )
        np.testing.assert_array_equal(embed_fused(tiny_archive, enc), oracle)

    def test_single_token_hand_trace(self):
        from samp.archive import ModelArchive, ModelManifest
        from samp.tokenization import SPECIAL_TOKENS, Vocab

        manifest = ModelManifest(1, 2, 1, 2, 5, 4, 2, 0.0, "sequence_labeling", 2)
        vocab = Vocab.from_tokens(list(SPECIAL_TOKENS) + ["a"], max_seq_len=4)
        tensors = {
            "embeddings.word.weight": np.array(
                [[0, 0], [1, 3], [0, 0], [0, 0], [0, 0]], dtype=F32
            ),
            "embeddings.position.weight": np.array([[2, 0]] * 4, dtype=F32),
            "embeddings.token_type.weight": np.array([[0, 2], [0, 0]], dtype=F32),
            "embeddings.layernorm.gamma": np.array([1, 1], dtype=F32),
            "embeddings.layernorm.beta": np.array([0, 0], dtype=F32),
            "head.weight": np.zeros((2, 2), dtype=F32),
            "head.bias": np.zeros(2, dtype=F32),
        }
        for i in range(1):
            from samp.archive import layer_keys

            for name, key in layer_keys(i).items():
                shape = {"w1": (2, 2), "w2": (2, 2), "b1": (2,)}.get(name, None)
                if key.endswith(("weight",)) and "attn" in key:
                    tensors[key] = np.zeros((2, 2), dtype=F32)
                elif shape:
                    tensors[key] = np.zeros(shape, dtype=F32)
                else:
                    tensors[key] = np.zeros(2, dtype=F32)
        arch = ModelArchive(manifest, tensors, vocab)
        # token 1, segment 0: sum = [1+2+0, 3+0+2] = [3, 5]; mean 4, var 1
        out = embed_fused(arch, EncodedInput([1], [0], 1))
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-6)

    def test_id_out_of_range(self, tiny_archive):
        big = tiny_archive.manifest.vocab_size
        with pytest.raises(InputError):
            embed_fused(tiny_archive, EncodedInput([big], [0], 1))
        with pytest.raises(InputError):
            embed_fused(tiny_archive, EncodedInput([0], [7], 1))


class TestMhaFp:
    def test_single_position_identity_mixture(self, rng):
        h = 4
        lw = make_layer(h, 8, rng)
        x = rng.standard_normal((1, h)).astype(F32)
        out = mha_fp(lw, x, attention_length=1, num_heads=1, eps=1e-12)
        v = gemm_f32(x, lw.vw) + lw.vb
        proj = gemm_f32(v.astype(F32), lw.ow)
        expected = layernorm(add_bias_residual(proj, lw.ob, x), lw.attn_ln_g, lw.attn_ln_b, 1e-12)
        np.testing.assert_array_equal(out, expected)

    def test_uniform_value_rows_dominate_scores(self, rng):
        h, seq = 4, 3
        lw = make_layer(h, 8, rng)
        lw.vw[:] = 0.0
        lw.vb[:] = np.array([1.0, -2.0, 0.5, 3.0])
        lw.__post_init__()  # rebuild fused QKV after the edit
        x = rng.standard_normal((seq, h)).astype(F32)
        taps = {}
        mha_fp(lw, x, seq, num_heads=2, eps=1e-12, taps=taps)
        ctx = taps["L0.attn.out_in"]
        np.testing.assert_allclose(ctx, np.tile(lw.vb, (seq, 1)), atol=1e-6)

    def test_against_scalar_oracle(self, rng):
        h, seq, heads = 4, 2, 2
        d = h // heads
        lw = make_layer(h, 8, rng)
        x = rng.standard_normal((seq, h)).astype(F32)
        out = mha_fp(lw, x, attention_length=seq, num_heads=heads, eps=1e-12)

        # independent scalar re-derivation in float64
        xw = x.astype(float)
        q = xw @ lw.qw.astype(float) + lw.qb.astype(float)
        k = xw @ lw.kw.astype(float) + lw.kb.astype(float)
        v = xw @ lw.vw.astype(float) + lw.vb.astype(float)
        ctx = np.zeros((seq, h))
        for head in range(heads):
            sl = slice(head * d, (head + 1) * d)
            for i in range(seq):
                scores = [
                    sum(q[i, sl][t] * k[j, sl][t] for t in range(d)) / math.sqrt(d)
                    for j in range(seq)
                ]
                mx = max(scores)
                w = [math.exp(s - mx) for s in scores]
                z = sum(w)
                for j in range(seq):
                    for t in range(d):
                        ctx[i, head * d + t] += w[j] / z * v[j, sl][t]
        pre = ctx @ lw.ow.astype(float) + lw.ob.astype(float) + xw
        mean = pre.mean(axis=1, keepdims=True)
        var = ((pre - mean) ** 2).mean(axis=1, keepdims=True)
        expected = (pre - mean) / np.sqrt(var + 1e-12) * lw.attn_ln_g.astype(float) + lw.attn_ln_b.astype(float)
        np.testing.assert_allclose(out, expected, atol=1e-5)

    def test_mask_ignores_padding(self, rng):
        h, seq = 4, 4
        lw = make_layer(h, 8, rng)
        x = rng.standard_normal((seq, h)).astype(F32)
        x_padded = x.copy()
        x_padded[2:] = 99.0  # garbage beyond attention_length
        out_a = mha_fp(lw, x, attention_length=2, num_heads=2, eps=1e-12)
        out_b = mha_fp(lw, x_padded, attention_length=2, num_heads=2, eps=1e-12)
        np.testing.assert_array_equal(out_a[:2], out_b[:2])


class TestFfnFp:
    def test_zero_weights(self, rng):
        h = 4
        lw = make_layer(h, 8, rng)
        lw.w1[:] = 0.0
        lw.w2[:] = 0.0
        x = rng.standard_normal((3, h)).astype(F32)
        expected = layernorm(
            add_bias_residual(np.zeros_like(x), lw.b2, x), lw.ffn_ln_g, lw.ffn_ln_b, 1e-12
        )
        np.testing.assert_array_equal(ffn_fp(lw, x, 1e-12), expected)

    def test_matches_unfused_composition_bitwise(self, rng):
        h, inter = 4, 8
        lw = make_layer(h, inter, rng)
        x = rng.standard_normal((3, h)).astype(F32)
        mid = gemm_f32(x, lw.w1) + lw.b1
        act = gelu(mid.astype(F32))
        y = gemm_f32(act, lw.w2)
        expected = layernorm(add_bias_residual(y, lw.b2, x), lw.ffn_ln_g, lw.ffn_ln_b, 1e-12)
        np.testing.assert_array_equal(ffn_fp(lw, x, 1e-12), expected)

    def test_scalar_trace_hidden_one(self, rng):
        lw = make_layer(1, 1, rng)
        lw.w1[:] = 2.0
        lw.b1[:] = 1.0
        lw.w2[:] = 0.5
        lw.b2[:] = 0.0
        lw.ffn_ln_g[:] = 2.0
        lw.ffn_ln_b[:] = 0.3
        out = ffn_fp(lw, np.array([[1.5]], dtype=F32), 1e-12)
        # single hidden unit: layernorm centers to zero, leaving beta
        np.testing.assert_allclose(out, [[0.3]], atol=1e-7)


class TestPrecisionPlan:
    def test_mode_consistency(self):
        with pytest.raises(ConfigurationError):
            PrecisionPlan(FULLY_QUANT, (LAYER_FFN_INT8, LAYER_FP))
        with pytest.raises(ConfigurationError):
            PrecisionPlan(FFN_ONLY, (LAYER_FULL_INT8,))
        with pytest.raises(ConfigurationError):
            PrecisionPlan(FP, (LAYER_FULL_INT8,))
        with pytest.raises(ConfigurationError):
            PrecisionPlan("INT4", (LAYER_FP,))

    def test_prefix_counts(self):
        plan = PrecisionPlan.prefix(FULLY_QUANT, 4, 2)
        assert plan.layer_precisions == (
            LAYER_FULL_INT8, LAYER_FULL_INT8, LAYER_FP, LAYER_FP,
        )
        assert plan.quantized_layer_count == 2
        with pytest.raises(ConfigurationError):
            PrecisionPlan.prefix(FFN_ONLY, 2, 3)
        with pytest.raises(ConfigurationError):
            PrecisionPlan.prefix(FP, 2, 1)

    def test_required_sites(self):
        plan = PrecisionPlan.prefix(FULLY_QUANT, 2, 1)
        sites = plan.required_sites()
        assert EMBED_OUT_SITE in sites
        assert "L0.attn.softmax" in sites
        assert "L0.ffn.mid" in sites
        assert attn_in_site(1) not in sites
        ffn_plan = PrecisionPlan.prefix(FFN_ONLY, 2, 2)
        assert ffn_plan.required_sites() == {
            "L0.ffn.in", "L0.ffn.mid", "L1.ffn.in", "L1.ffn.mid",
        }
        assert PrecisionPlan.prefix(FFN_ONLY, 2, 0).required_sites() == set()

    def test_non_prefix_full_plan_uses_layer_input_site(self):
        plan = PrecisionPlan(FULLY_QUANT, (LAYER_FP, LAYER_FULL_INT8))
        sites = plan.required_sites()
        assert attn_in_site(1) in sites
        assert EMBED_OUT_SITE not in sites


class TestEncodeStack:
    def test_all_fp_plan_matches_manual_pipeline_bitwise(self, tiny_engine):
        enc = tiny_engine.encode_text("the quick brown fox")
        out = tiny_engine.run(enc, PrecisionPlan.prefix(FP, 2, 0))
        m = tiny_engine.manifest
        hidden = embed_fused(tiny_engine.archive, enc)
        for i in range(m.num_layers):
            hidden = mha_fp(tiny_engine.layers[i], hidden, enc.attention_length,
                            m.num_heads, m.layernorm_eps)
            hidden = ffn_fp(tiny_engine.layers[i], hidden, m.layernorm_eps)
        np.testing.assert_array_equal(out.hidden_states, hidden)

    def test_zero_quantized_ffn_only_equals_fp_bitwise(self, tiny_engine):
        enc = tiny_engine.encode_text("a lazy cat walks")
        fp = tiny_engine.run(enc, PrecisionPlan.prefix(FP, 2, 0))
        ffn0 = tiny_engine.run(enc, PrecisionPlan.prefix(FFN_ONLY, 2, 0))
        np.testing.assert_array_equal(fp.hidden_states, ffn0.hidden_states)

    def test_fully_quant_dataflow(self, tiny_engine):
        enc = tiny_engine.encode_text("quant the model layer by layer")
        plan = PrecisionPlan.prefix(FULLY_QUANT, 2, 2)
        with trace_ops() as tr:
            tiny_engine.run(enc, plan)
        assert tr.quant_count("quantize", EMBED_OUT_SITE) == 1
        assert tr.sites("dequantize") == []  # INT8 all the way to the last kernel
        enter = {b.layer: b.dtype for b in tr.boundaries if b.edge == "enter"}
        assert enter[1] == "i8"  # no FP detour between quantized layers
        exits = {b.layer: b.dtype for b in tr.boundaries if b.edge == "exit"}
        assert exits[1] == "f32"  # final output always FP32

    def test_ffn_only_dataflow(self, tiny_engine):
        enc = tiny_engine.encode_text("good fast model")
        plan = PrecisionPlan.prefix(FFN_ONLY, 2, 2)
        with trace_ops() as tr:
            tiny_engine.run(enc, plan)
        quant_sites = tr.sites("quantize")
        assert set(quant_sites) == {"L0.ffn.in", "L0.ffn.mid", "L1.ffn.in", "L1.ffn.mid"}
        assert all(".attn." not in s and s != EMBED_OUT_SITE for s in quant_sites)
        assert tr.gemm_count("i8") == 4  # w1+w2 per layer
        assert tr.gemm_count("f32") == 8  # qkv, scores, context, out per layer

    def test_partial_prefix_transitions(self, tiny_engine):
        enc = tiny_engine.encode_text("the dog runs")
        plan = PrecisionPlan.prefix(FULLY_QUANT, 2, 1)
        with trace_ops() as tr:
            out = tiny_engine.run(enc, plan)
        assert tr.quant_count("quantize", EMBED_OUT_SITE) == 1
        assert out.hidden_states.dtype == np.float32
        enter = {b.layer: b.dtype for b in tr.boundaries if b.edge == "enter"}
        assert enter[0] == "f32" and enter[1] == "f32"

    def test_captured_softmax_rows_sum_to_one(self, tiny_engine):
        enc = tiny_engine.encode_text("unable to match the text")
        plan = PrecisionPlan.prefix(FULLY_QUANT, 2, 2)
        out = tiny_engine.run(enc, plan, capture_taps=True)
        for i in range(2):
            probs = out.taps[f"L{i}.attn.softmax"]
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_missing_scales_error_names_sites(self, tiny_archive):
        from samp.archive import ModelArchive

        bare = ModelArchive(tiny_archive.manifest, dict(tiny_archive.tensors), tiny_archive.vocab)
        engine = Engine(bare)
        enc = engine.encode_text("the dog")
        with pytest.raises(CalibrationError, match="embed.out"):
            engine.run(enc, PrecisionPlan.prefix(FULLY_QUANT, 2, 2))

    def test_plan_length_mismatch(self, tiny_engine):
        with pytest.raises(ConfigurationError):
            tiny_engine.run(
                tiny_engine.encode_text("a"), PrecisionPlan.prefix(FP, 3, 0)
            )

    def test_deterministic_across_threads(self, tiny_engine):
        enc = tiny_engine.encode_text("the quick brown fox")
        plan = PrecisionPlan.prefix(FULLY_QUANT, 2, 2)
        expected = tiny_engine.run(enc, plan).hidden_states

        def job(_):
            return tiny_engine.run(enc, plan).hidden_states

        with ThreadPoolExecutor(max_workers=4) as pool:
            for result in pool.map(job, range(8)):
                np.testing.assert_array_equal(result, expected)

    def test_fp16_storage_rounding(self, tiny_archive):
        engine16 = Engine(tiny_archive, fp16_storage=True)
        enc = engine16.encode_text("the quick brown fox")
        out = engine16.run(enc, PrecisionPlan.prefix(FP, 2, 0)).hidden_states
        np.testing.assert_array_equal(out, f16_round(out))
        engine32 = Engine(tiny_archive)
        out32 = engine32.run(enc, PrecisionPlan.prefix(FP, 2, 0)).hidden_states
        assert not np.array_equal(out, out32)
