"""Transformer encoder with per-layer mixed precision.

Three layer flavors share one stack driver:

* FP: floating-point MHA and FFN.
* FULL_INT8: INT8 GEMMs in both MHA and FFN; the hidden state travels
  between consecutive quantized layers as INT8 codes.
* FFN_ONLY_INT8: MHA stays floating point; the post-MHA layernorm output is
  quantized and only the two FFN GEMMs run in INT8.

Quantization sites are named ``embed.out``, ``L{i}.attn.{in,q,k,v,softmax,
out_in}`` and ``L{i}.ffn.{in,mid}``; weight scales mirror the archive tensor
keys and are derived from the stored FP32 weights, not from calibration.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .archive import ModelArchive, layer_keys
from .errors import CalibrationError, ConfigurationError, InputError
from .kernels import (
    F32,
    add_bias_residual,
    batched_gemm_f32,
    batched_gemm_i8_i32,
    f16_round,
    gelu,
    gemm_f32,
    gemm_i8_i32,
    layernorm,
    merge_heads,
    softmax_rows,
    split_heads,
)
from .quantization import CalibrationTable, QuantScale, dequantize, quantize
from .tokenization import EncodedInput, encode as encode_text
from .trace import emit_boundary

# plan modes
FP = "FP"
FULLY_QUANT = "FULLY_QUANT"
FFN_ONLY = "FFN_ONLY"

# per-layer precisions
LAYER_FP = "FP"
LAYER_FFN_INT8 = "FFN_ONLY_INT8"
LAYER_FULL_INT8 = "FULL_INT8"

_ALLOWED = {
    FP: {LAYER_FP},
    FULLY_QUANT: {LAYER_FP, LAYER_FULL_INT8},
    FFN_ONLY: {LAYER_FP, LAYER_FFN_INT8},
}

EMBED_OUT_SITE = "embed.out"
ATTENTION_MASK_VALUE = np.float32(-10000.0)


def attn_in_site(i: int) -> str:
    return f"L{i}.attn.in"


def attn_site(i: int, name: str) -> str:
    return f"L{i}.attn.{name}"


def ffn_site(i: int, name: str) -> str:
    return f"L{i}.ffn.{name}"


def activation_sites(num_layers: int) -> list[str]:
    """Every activation quantization site the calibrator must cover."""
    sites = [EMBED_OUT_SITE]
    for i in range(num_layers):
        sites.append(attn_in_site(i))
        sites.extend(attn_site(i, n) for n in ("q", "k", "v", "softmax", "out_in"))
        sites.extend(ffn_site(i, n) for n in ("in", "mid"))
    return sites


@dataclass(frozen=True)
class PrecisionPlan:
    """Per-layer precision assignment; one of the 2L mixed combinations."""

    mode: str
    layer_precisions: tuple[str, ...]

    def __post_init__(self):
        if self.mode not in _ALLOWED:
            raise ConfigurationError(f"unknown plan mode {self.mode!r}")
        bad = set(self.layer_precisions) - _ALLOWED[self.mode]
        if bad:
            raise ConfigurationError(
                f"layer precisions {sorted(bad)} are not allowed in mode {self.mode}"
            )

    @classmethod
    def prefix(cls, mode: str, num_layers: int, quantized: int) -> "PrecisionPlan":
        """Quantize the first ``quantized`` layers, the standard sweep shape."""
        if not 0 <= quantized <= num_layers:
            raise ConfigurationError(
                f"quantized layer count {quantized} outside [0, {num_layers}]"
            )
        if mode == FP and quantized > 0:
            raise ConfigurationError("FP mode cannot quantize layers")
        kind = {FP: LAYER_FP, FULLY_QUANT: LAYER_FULL_INT8, FFN_ONLY: LAYER_FFN_INT8}[mode]
        layers = tuple(kind if i < quantized else LAYER_FP for i in range(num_layers))
        return cls(mode, layers)

    @property
    def num_layers(self) -> int:
        return len(self.layer_precisions)

    @property
    def quantized_layer_count(self) -> int:
        return sum(1 for p in self.layer_precisions if p != LAYER_FP)

    def input_site(self, i: int) -> str:
        return EMBED_OUT_SITE if i == 0 else attn_in_site(i)

    def required_sites(self) -> set[str]:
        """Activation sites that must be calibrated before running this plan."""
        sites: set[str] = set()
        for i, prec in enumerate(self.layer_precisions):
            if prec == LAYER_FULL_INT8:
                sites.add(self.input_site(i))
                sites.update(attn_site(i, n) for n in ("q", "k", "v", "softmax", "out_in"))
                sites.update((ffn_site(i, "in"), ffn_site(i, "mid")))
            elif prec == LAYER_FFN_INT8:
                sites.update((ffn_site(i, "in"), ffn_site(i, "mid")))
        return sites


@dataclass
class EncoderOutput:
    hidden_states: np.ndarray  # (seq, hidden) float32
    taps: dict[str, np.ndarray] | None = None


@dataclass
class LayerWeights:
    """FP32 parameter views for one transformer layer."""

    qw: np.ndarray
    qb: np.ndarray
    kw: np.ndarray
    kb: np.ndarray
    vw: np.ndarray
    vb: np.ndarray
    ow: np.ndarray
    ob: np.ndarray
    attn_ln_g: np.ndarray
    attn_ln_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ffn_ln_g: np.ndarray
    ffn_ln_b: np.ndarray
    layer_index: int = 0
    qkv_w: np.ndarray = field(init=False)
    qkv_b: np.ndarray = field(init=False)

    def __post_init__(self):
        # QKV tensor fusion: one GEMM against the concatenated projection.
        self.qkv_w = np.ascontiguousarray(np.concatenate([self.qw, self.kw, self.vw], axis=1))
        self.qkv_b = np.concatenate([self.qb, self.kb, self.vb])

    @classmethod
    def from_archive(cls, archive: ModelArchive, i: int) -> "LayerWeights":
        keys = layer_keys(i)
        t = archive.tensors
        return cls(
            qw=t[keys["qw"]], qb=t[keys["qb"]],
            kw=t[keys["kw"]], kb=t[keys["kb"]],
            vw=t[keys["vw"]], vb=t[keys["vb"]],
            ow=t[keys["ow"]], ob=t[keys["ob"]],
            attn_ln_g=t[keys["attn_ln_g"]], attn_ln_b=t[keys["attn_ln_b"]],
            w1=t[keys["w1"]], b1=t[keys["b1"]],
            w2=t[keys["w2"]], b2=t[keys["b2"]],
            ffn_ln_g=t[keys["ffn_ln_g"]], ffn_ln_b=t[keys["ffn_ln_b"]],
            layer_index=i,
        )


def quantize_weight(w: np.ndarray, site: str) -> tuple[np.ndarray, QuantScale]:
    """Per-tensor symmetric INT8 weights with scale derived from max|w|."""
    qs = QuantScale(site, float(np.max(np.abs(w))))
    return quantize(w, qs.scale, site=site), qs


@dataclass
class QuantizedLayerWeights:
    """INT8 weights plus their derived scales for one layer."""

    qkv_w_q: np.ndarray  # (hidden, 3*hidden) int8, blocks scaled independently
    qkv_scales: tuple[QuantScale, QuantScale, QuantScale]
    ow_q: np.ndarray
    ow_scale: QuantScale
    w1_q: np.ndarray
    w1_scale: QuantScale
    w2_q: np.ndarray
    w2_scale: QuantScale

    @classmethod
    def from_f32(cls, lw: LayerWeights) -> "QuantizedLayerWeights":
        keys = layer_keys(lw.layer_index)
        qwq, s_q = quantize_weight(lw.qw, keys["qw"])
        kwq, s_k = quantize_weight(lw.kw, keys["kw"])
        vwq, s_v = quantize_weight(lw.vw, keys["vw"])
        owq, s_o = quantize_weight(lw.ow, keys["ow"])
        w1q, s_1 = quantize_weight(lw.w1, keys["w1"])
        w2q, s_2 = quantize_weight(lw.w2, keys["w2"])
        return cls(
            qkv_w_q=np.ascontiguousarray(np.concatenate([qwq, kwq, vwq], axis=1)),
            qkv_scales=(s_q, s_k, s_v),
            ow_q=owq, ow_scale=s_o,
            w1_q=w1q, w1_scale=s_1,
            w2_q=w2q, w2_scale=s_2,
        )


def _deq_acc(acc: np.ndarray, scale_a: float, scale_b: float) -> np.ndarray:
    # Fused INT32-accumulator dequantization: one multiplier, no trace event
    # (this happens inside a fused kernel, not on a dataflow edge).
    return (acc.astype(F32) * F32(float(scale_a) * float(scale_b))).astype(F32)


def _deq_codes(q: np.ndarray, scale: float) -> np.ndarray:
    return (q.astype(F32) * F32(scale)).astype(F32)


def _tap(taps: dict | None, site: str, value: np.ndarray) -> None:
    if taps is not None:
        taps[site] = np.array(value, dtype=F32, copy=True)


def _attention_mask(seq: int, attention_length: int) -> np.ndarray:
    mask = np.zeros(seq, dtype=F32)
    mask[attention_length:] = ATTENTION_MASK_VALUE
    return mask


def embed_fused(archive: ModelArchive, enc: EncodedInput, round_fn=None) -> np.ndarray:
    """Fused embedding: word + position + token-type lookups, then layernorm."""
    m = archive.manifest
    ids = np.asarray(enc.token_ids)
    segs = np.asarray(enc.segment_ids)
    if ids.size == 0:
        raise InputError("empty token id sequence")
    if ids.min() < 0 or ids.max() >= m.vocab_size:
        raise InputError(f"token id out of range [0, {m.vocab_size})")
    if segs.min() < 0 or segs.max() >= m.type_vocab_size:
        raise InputError(f"segment id out of range [0, {m.type_vocab_size})")
    if len(ids) > m.max_position:
        raise InputError(f"sequence length {len(ids)} exceeds max_position {m.max_position}")
    t = archive.tensors
    summed = (
        t["embeddings.word.weight"][ids]
        + t["embeddings.position.weight"][: len(ids)]
    ) + t["embeddings.token_type.weight"][segs]
    out = layernorm(
        summed.astype(F32),
        t["embeddings.layernorm.gamma"],
        t["embeddings.layernorm.beta"],
        m.layernorm_eps,
    )
    return round_fn(out) if round_fn is not None else out


def mha_fp(
    lw: LayerWeights,
    x: np.ndarray,
    attention_length: int,
    num_heads: int,
    eps: float,
    taps: dict | None = None,
    round_fn=None,
) -> np.ndarray:
    """Floating-point multi-head attention block ending in add+layernorm."""
    i = lw.layer_index
    post = round_fn if round_fn is not None else (lambda v: v)
    seq, hidden = x.shape
    head_dim = hidden // num_heads

    qkv = gemm_f32(x, lw.qkv_w, tag=attn_site(i, "qkv")) + lw.qkv_b
    qkv = post(qkv.astype(F32))
    q, k, v = qkv[:, :hidden], qkv[:, hidden : 2 * hidden], qkv[:, 2 * hidden :]
    _tap(taps, attn_site(i, "q"), q)
    _tap(taps, attn_site(i, "k"), k)
    _tap(taps, attn_site(i, "v"), v)

    qh, kh, vh = split_heads(q, num_heads), split_heads(k, num_heads), split_heads(v, num_heads)
    scores = batched_gemm_f32(qh, kh.transpose(0, 2, 1), tag=attn_site(i, "scores"))
    scores = scores * F32(1.0 / math.sqrt(head_dim)) + _attention_mask(seq, attention_length)
    probs = post(softmax_rows(scores.astype(F32)))
    _tap(taps, attn_site(i, "softmax"), probs)

    ctx = merge_heads(batched_gemm_f32(probs, vh, tag=attn_site(i, "context")))
    ctx = post(ctx)
    _tap(taps, attn_site(i, "out_in"), ctx)

    proj = gemm_f32(ctx, lw.ow, tag=attn_site(i, "out"))
    out = layernorm(add_bias_residual(proj, lw.ob, x), lw.attn_ln_g, lw.attn_ln_b, eps)
    out = post(out)
    _tap(taps, ffn_site(i, "in"), out)
    return out


def ffn_fp(
    lw: LayerWeights,
    x: np.ndarray,
    eps: float,
    taps: dict | None = None,
    round_fn=None,
) -> np.ndarray:
    """Floating-point feed-forward block ending in add+layernorm."""
    i = lw.layer_index
    post = round_fn if round_fn is not None else (lambda v: v)
    mid = gemm_f32(x, lw.w1, tag=ffn_site(i, "w1")) + lw.b1
    act = post(gelu(mid.astype(F32)))
    _tap(taps, ffn_site(i, "mid"), act)
    y = gemm_f32(act, lw.w2, tag=ffn_site(i, "w2"))
    out = layernorm(add_bias_residual(y, lw.b2, x), lw.ffn_ln_g, lw.ffn_ln_b, eps)
    return post(out)


def mha_int8(
    qlw: QuantizedLayerWeights,
    lw: LayerWeights,
    x_q: np.ndarray,
    in_scale: float,
    table: CalibrationTable,
    attention_length: int,
    num_heads: int,
    eps: float,
    taps: dict | None = None,
) -> np.ndarray:
    """Fully quantized MHA; returns INT8 codes at the L{i}.ffn.in site."""
    i = lw.layer_index
    seq, hidden = x_q.shape
    head_dim = hidden // num_heads
    s_q, s_k, s_v = table.scale(attn_site(i, "q")), table.scale(attn_site(i, "k")), table.scale(attn_site(i, "v"))
    s_sm = table.scale(attn_site(i, "softmax"))
    s_ctx = table.scale(attn_site(i, "out_in"))
    s_out = table.scale(ffn_site(i, "in"))

    residual = _deq_codes(x_q, in_scale)

    acc = gemm_i8_i32(x_q, qlw.qkv_w_q, tag=attn_site(i, "qkv"))
    sq_w, sk_w, sv_w = (s.scale for s in qlw.qkv_scales)
    q = _deq_acc(acc[:, :hidden], in_scale, sq_w) + lw.qb
    k = _deq_acc(acc[:, hidden : 2 * hidden], in_scale, sk_w) + lw.kb
    v = _deq_acc(acc[:, 2 * hidden :], in_scale, sv_w) + lw.vb
    _tap(taps, attn_site(i, "q"), q)
    _tap(taps, attn_site(i, "k"), k)
    _tap(taps, attn_site(i, "v"), v)

    qh = quantize(split_heads(q.astype(F32), num_heads), s_q, site=attn_site(i, "q"))
    kh = quantize(split_heads(k.astype(F32), num_heads), s_k, site=attn_site(i, "k"))
    vh = quantize(split_heads(v.astype(F32), num_heads), s_v, site=attn_site(i, "v"))

    score_acc = batched_gemm_i8_i32(qh, kh.transpose(0, 2, 1), tag=attn_site(i, "scores"))
    # 1/sqrt(head_dim) is folded into the dequantization multiplier.
    scores = score_acc.astype(F32) * F32(s_q * s_k / math.sqrt(head_dim))
    scores = scores + _attention_mask(seq, attention_length)
    probs = softmax_rows(scores.astype(F32))
    _tap(taps, attn_site(i, "softmax"), probs)
    probs_q = quantize(probs, s_sm, site=attn_site(i, "softmax"))

    ctx_acc = batched_gemm_i8_i32(probs_q, vh, tag=attn_site(i, "context"))
    ctx = merge_heads(_deq_acc(ctx_acc, s_sm, s_v))
    _tap(taps, attn_site(i, "out_in"), ctx)
    ctx_q = quantize(ctx, s_ctx, site=attn_site(i, "out_in"))

    proj_acc = gemm_i8_i32(ctx_q, qlw.ow_q, tag=attn_site(i, "out"))
    proj = _deq_acc(proj_acc, s_ctx, qlw.ow_scale.scale)
    out = layernorm(add_bias_residual(proj, lw.ob, residual), lw.attn_ln_g, lw.attn_ln_b, eps)
    _tap(taps, ffn_site(i, "in"), out)
    return quantize(out, s_out, site=ffn_site(i, "in"))


def ffn_int8(
    qlw: QuantizedLayerWeights,
    lw: LayerWeights,
    x_q: np.ndarray,
    table: CalibrationTable,
    eps: float,
    emit_int8: bool = False,
    out_site: str | None = None,
    taps: dict | None = None,
) -> np.ndarray:
    """Quantized FFN; emits INT8 at ``out_site`` or FP32 when emit_int8 is off."""
    i = lw.layer_index
    s_in = table.scale(ffn_site(i, "in"))
    s_mid = table.scale(ffn_site(i, "mid"))
    if emit_int8 and out_site is None:
        raise ConfigurationError("emit_int8 requires an output site name")

    residual = _deq_codes(x_q, s_in)
    mid_acc = gemm_i8_i32(x_q, qlw.w1_q, tag=ffn_site(i, "w1"))
    mid = _deq_acc(mid_acc, s_in, qlw.w1_scale.scale) + lw.b1
    act = gelu(mid.astype(F32))
    _tap(taps, ffn_site(i, "mid"), act)
    act_q = quantize(act, s_mid, site=ffn_site(i, "mid"))

    y_acc = gemm_i8_i32(act_q, qlw.w2_q, tag=ffn_site(i, "w2"))
    y = _deq_acc(y_acc, s_mid, qlw.w2_scale.scale)
    out = layernorm(add_bias_residual(y, lw.b2, residual), lw.ffn_ln_g, lw.ffn_ln_b, eps)
    if not emit_int8:
        return out
    _tap(taps, out_site, out)
    return quantize(out, table.scale(out_site), site=out_site)


class Engine:
    """Loaded model plus cached INT8 weights; safe to share across threads."""

    def __init__(self, archive: ModelArchive, fp16_storage: bool = False):
        self.archive = archive
        self.manifest = archive.manifest
        self.vocab = archive.vocab
        self.round_fn = f16_round if fp16_storage else None
        self.layers = [LayerWeights.from_archive(archive, i) for i in range(self.manifest.num_layers)]
        self._quantized: dict[int, QuantizedLayerWeights] = {}
        self._lock = threading.Lock()

    @property
    def calibration(self) -> CalibrationTable | None:
        return self.archive.calibration

    def quantized_layer(self, i: int) -> QuantizedLayerWeights:
        with self._lock:
            if i not in self._quantized:
                self._quantized[i] = QuantizedLayerWeights.from_f32(self.layers[i])
            return self._quantized[i]

    def encode_text(self, text_a: str, text_b: str | None = None) -> EncodedInput:
        return encode_text(self.vocab, text_a, text_b)

    def calibrate(self, encoded_inputs) -> CalibrationTable:
        """Min-max observe every quantization site over FP forward passes."""
        plan = PrecisionPlan.prefix(FP, self.manifest.num_layers, 0)
        table = CalibrationTable(model_fingerprint=self.archive.fingerprint)
        for enc in encoded_inputs:
            out = self.run(enc, plan, capture_taps=True)
            for site, value in out.taps.items():
                table.observe(site, value)
        return table

    def check_plan(self, plan: PrecisionPlan) -> CalibrationTable | None:
        if plan.num_layers != self.manifest.num_layers:
            raise ConfigurationError(
                f"plan covers {plan.num_layers} layers, model has {self.manifest.num_layers}"
            )
        required = plan.required_sites()
        if not required:
            return self.calibration
        if self.calibration is None:
            raise CalibrationError(
                "plan quantizes layers but the archive has no calibration table; "
                f"missing sites: {', '.join(sorted(required))}"
            )
        self.calibration.require_all(required)
        return self.calibration

    def run(self, enc: EncodedInput, plan: PrecisionPlan, capture_taps: bool = False) -> EncoderOutput:
        """Run the full encoder stack under the given precision plan."""
        table = self.check_plan(plan)
        m = self.manifest
        taps: dict[str, np.ndarray] | None = {} if capture_taps else None

        hidden = embed_fused(self.archive, enc, round_fn=self.round_fn)
        _tap(taps, EMBED_OUT_SITE, hidden)

        state_q: np.ndarray | None = None  # int8 hidden state when not None
        state_site = ""
        for i, prec in enumerate(plan.layer_precisions):
            emit_boundary(i, "enter", "i8" if state_q is not None else "f32")
            if prec == LAYER_FP:
                if state_q is not None:
                    hidden = dequantize(state_q, table.scale(state_site), site=state_site)
                    state_q = None
                _tap(taps, attn_in_site(i), hidden)
                hidden = mha_fp(self.layers[i], hidden, enc.attention_length,
                                m.num_heads, m.layernorm_eps, taps, self.round_fn)
                hidden = ffn_fp(self.layers[i], hidden, m.layernorm_eps, taps, self.round_fn)
            elif prec == LAYER_FFN_INT8:
                if state_q is not None:  # cannot happen with a valid plan
                    hidden = dequantize(state_q, table.scale(state_site), site=state_site)
                    state_q = None
                _tap(taps, attn_in_site(i), hidden)
                mha_out = mha_fp(self.layers[i], hidden, enc.attention_length,
                                 m.num_heads, m.layernorm_eps, taps, None)
                # the only quantize on the MHA path: right after its layernorm
                x_q = quantize(mha_out, table.scale(ffn_site(i, "in")), site=ffn_site(i, "in"))
                hidden = ffn_int8(self.quantized_layer(i), self.layers[i], x_q,
                                  table, m.layernorm_eps, emit_int8=False, taps=taps)
            else:  # LAYER_FULL_INT8
                if state_q is None:
                    site = plan.input_site(i)
                    if site != EMBED_OUT_SITE:
                        _tap(taps, site, hidden)
                    state_q = quantize(hidden, table.scale(site), site=site)
                    state_site = site
                x_q = mha_int8(self.quantized_layer(i), self.layers[i], state_q,
                               table.scale(state_site), table, enc.attention_length,
                               m.num_heads, m.layernorm_eps, taps)
                next_int8 = (
                    i + 1 < plan.num_layers
                    and plan.layer_precisions[i + 1] == LAYER_FULL_INT8
                )
                out_site = attn_in_site(i + 1) if next_int8 else None
                result = ffn_int8(self.quantized_layer(i), self.layers[i], x_q, table,
                                  m.layernorm_eps, emit_int8=next_int8,
                                  out_site=out_site, taps=taps)
                if next_int8:
                    state_q, state_site = result, out_site
                else:
                    hidden, state_q = result, None
            emit_boundary(i, "exit", "i8" if state_q is not None else "f32")

        if state_q is not None:  # defensive: plans above always end in FP32
            hidden = dequantize(state_q, table.scale(state_site), site=state_site)
        return EncoderOutput(hidden_states=hidden.astype(F32), taps=taps)
