"""Dense numeric kernels: GEMMs, softmax, layernorm, GELU, head reshaping.

Tensors are plain numpy arrays; the element kind is the dtype (float32,
int8, int32) and the shape is the numpy shape.  All kernels are pure and
deterministic: FP32 GEMM accumulates in a fixed k-innermost order for every
output element, so results are bitwise reproducible and bitwise equal to
the scalar reference implementations selected by ``SAMP_NAIVE_KERNELS=1``.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .errors import ConfigurationError, DimensionError
from .trace import emit_gemm

F32 = np.float32
I8 = np.int8
I32 = np.int32

# INT8 GEMM accumulates exactly in float64 (products <= 2^14, so partial sums
# stay below 2^53 for any k up to this bound; beyond it int32 could overflow
# anyway).
_MAX_I8_GEMM_K = 131072

_SQRT_2_OVER_PI = np.float32(math.sqrt(2.0 / math.pi))
_GELU_CUBIC = np.float32(0.044715)


def naive_kernels_forced() -> bool:
    """True when the environment pins every GEMM to the scalar oracle path."""
    return os.environ.get("SAMP_NAIVE_KERNELS", "") == "1"


def _require_2d(name: str, x: np.ndarray) -> None:
    if x.ndim != 2 or min(x.shape) < 1:
        raise DimensionError(f"{name} must be a 2-D tensor with positive dims, got shape {x.shape}")


def _require_dtype(name: str, x: np.ndarray, dtype) -> None:
    if x.dtype != dtype:
        raise DimensionError(f"{name} must have dtype {np.dtype(dtype).name}, got {x.dtype.name}")


def gemm_f32_naive(a: np.ndarray, b: np.ndarray, accumulate_into: np.ndarray | None = None) -> np.ndarray:
    """Scalar triple-loop FP32 GEMM, k innermost.  The reference oracle."""
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=F32) if accumulate_into is None else accumulate_into.astype(F32).copy()
    for i in range(m):
        for j in range(n):
            acc = F32(out[i, j])
            for t in range(k):
                acc = F32(acc + F32(a[i, t] * b[t, j]))
            out[i, j] = acc
    return out


def _gemm_f32_fast(a: np.ndarray, b: np.ndarray, accumulate_into: np.ndarray | None) -> np.ndarray:
    # Rank-1 update per k step: every output element sees the same FP32
    # multiply/add sequence as the scalar triple loop, so the result is
    # bitwise identical while staying vectorized over (m, n).
    m, _ = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=F32) if accumulate_into is None else accumulate_into.astype(F32).copy()
    for t in range(a.shape[1]):
        out += a[:, t : t + 1] * b[t : t + 1, :]
    return out


def gemm_f32(
    a: np.ndarray,
    b: np.ndarray,
    accumulate_into: np.ndarray | None = None,
    tag: str = "",
) -> np.ndarray:
    """FP32 matrix product with FP32 accumulation in fixed k order."""
    _require_2d("a", a)
    _require_2d("b", b)
    _require_dtype("a", a, F32)
    _require_dtype("b", b, F32)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    if accumulate_into is not None and accumulate_into.shape != (a.shape[0], b.shape[1]):
        raise DimensionError(
            f"accumulator shape {accumulate_into.shape} does not match output "
            f"({a.shape[0]}, {b.shape[1]})"
        )
    emit_gemm("f32", a.shape[0], a.shape[1], b.shape[1], tag=tag)
    if naive_kernels_forced():
        return gemm_f32_naive(a, b, accumulate_into)
    return _gemm_f32_fast(a, b, accumulate_into)


def gemm_i8_i32_naive(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Widening scalar triple-loop INT8 GEMM with exact int accumulation."""
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=I32)
    for i in range(m):
        for j in range(n):
            acc = 0
            for t in range(k):
                acc += int(a[i, t]) * int(b[t, j])
            out[i, j] = acc
    return out


def gemm_i8_i32(a: np.ndarray, b: np.ndarray, tag: str = "") -> np.ndarray:
    """INT8 x INT8 -> INT32 GEMM, exact integer accumulation."""
    _require_2d("a", a)
    _require_2d("b", b)
    _require_dtype("a", a, I8)
    _require_dtype("b", b, I8)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    if a.shape[1] > _MAX_I8_GEMM_K:
        raise DimensionError(f"k={a.shape[1]} exceeds overflow-free bound {_MAX_I8_GEMM_K}")
    emit_gemm("i8", a.shape[0], a.shape[1], b.shape[1], tag=tag)
    if naive_kernels_forced():
        return gemm_i8_i32_naive(a, b)
    # float64 accumulation is exact for these magnitudes; summation order is
    # irrelevant because every partial sum is an integer below 2^53.
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(I32)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.  NaN rows stay NaN."""
    _require_dtype("x", x, F32)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / np.sum(e, axis=-1, keepdims=True)).astype(F32)


def layernorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-12,
) -> np.ndarray:
    """Per-row mean/variance normalization followed by the affine transform."""
    _require_dtype("x", x, F32)
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise DimensionError(
            f"hidden size mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    mean = np.mean(x, axis=-1, keepdims=True, dtype=F32)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True, dtype=F32)
    inv = np.float32(1.0) / np.sqrt(var + F32(eps))
    return (centered * inv * gamma + beta).astype(F32)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    _require_dtype("x", x, F32)
    inner = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x * x * x)
    return (np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))).astype(F32)


def add_bias_residual(x: np.ndarray, bias: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """x + broadcast(bias) + residual, elementwise."""
    _require_dtype("x", x, F32)
    if x.shape != residual.shape or x.shape[-1] != bias.shape[-1]:
        raise DimensionError(
            f"shape mismatch: x {x.shape}, bias {bias.shape}, residual {residual.shape}"
        )
    return ((x + bias) + residual).astype(F32)


def split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    """(seq, hidden) -> (num_heads, seq, hidden // num_heads)."""
    seq, hidden = x.shape
    if num_heads < 1 or hidden % num_heads != 0:
        raise ConfigurationError(f"hidden size {hidden} not divisible by {num_heads} heads")
    return np.ascontiguousarray(x.reshape(seq, num_heads, hidden // num_heads).transpose(1, 0, 2))


def merge_heads(x: np.ndarray) -> np.ndarray:
    """Inverse of split_heads: (heads, seq, dim) -> (seq, heads * dim)."""
    heads, seq, dim = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(seq, heads * dim))


def batched_gemm_f32(a: np.ndarray, b: np.ndarray, tag: str = "") -> np.ndarray:
    """Per-head FP32 GEMM over a (batch, m, k) x (batch, k, n) stack.

    Counts as a single batched GEMM invocation in the operation trace.
    """
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"batched shapes disagree: {a.shape} x {b.shape}")
    emit_gemm("f32", a.shape[1], a.shape[2], b.shape[2], batch=a.shape[0], tag=tag)
    fn = gemm_f32_naive if naive_kernels_forced() else _gemm_f32_fast
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=F32)
    for h in range(a.shape[0]):
        out[h] = fn(a[h], b[h], None)
    return out


def batched_gemm_i8_i32(a: np.ndarray, b: np.ndarray, tag: str = "") -> np.ndarray:
    """Per-head INT8 GEMM stack; one batched invocation in the trace."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"batched shapes disagree: {a.shape} x {b.shape}")
    if a.shape[2] > _MAX_I8_GEMM_K:
        raise DimensionError(f"k={a.shape[2]} exceeds overflow-free bound {_MAX_I8_GEMM_K}")
    emit_gemm("i8", a.shape[1], a.shape[2], b.shape[2], batch=a.shape[0], tag=tag)
    if naive_kernels_forced():
        out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=I32)
        for h in range(a.shape[0]):
            out[h] = gemm_i8_i32_naive(a[h], b[h])
        return out
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(I32)


def f16_round(x: np.ndarray) -> np.ndarray:
    """Round FP32 values to the nearest half-precision-representable value.

    Models FP16 storage at kernel boundaries while keeping FP32 arithmetic.
    """
    return x.astype(np.float16).astype(F32)
