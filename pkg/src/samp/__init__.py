"""Self-adaptive mixed-precision INT8 inference engine for transformer
encoders, with calibration, profiling and allocation tooling."""

from .allocator import (
    Profile,
    ProfilePoint,
    allocate_decay_aware,
    build_profile,
    rank_by_ratio,
    select_by_accuracy_threshold,
    select_by_latency_threshold,
)
from .archive import ModelArchive, ModelManifest, load_archive, write_archive
from .encoder import (
    FFN_ONLY,
    FP,
    FULLY_QUANT,
    Engine,
    EncoderOutput,
    PrecisionPlan,
)
from .quantization import (
    CalibrationTable,
    CodeUsageReport,
    QuantScale,
    code_usage,
    dequantize,
    minmax_observe,
    quantize,
    requantize_i32,
)
from .tasks import TaskResult, classify, match, tag
from .tokenization import EncodedInput, Vocab, encode, tokenize

__version__ = "0.1.0"

__all__ = [
    "CalibrationTable", "CodeUsageReport", "EncodedInput", "EncoderOutput",
    "Engine", "FFN_ONLY", "FP", "FULLY_QUANT", "ModelArchive", "ModelManifest",
    "PrecisionPlan", "Profile", "ProfilePoint", "QuantScale", "TaskResult",
    "Vocab", "allocate_decay_aware", "build_profile", "classify", "code_usage",
    "dequantize", "encode", "load_archive", "match", "minmax_observe",
    "quantize", "rank_by_ratio", "requantize_i32",
    "select_by_accuracy_threshold", "select_by_latency_threshold", "tag",
    "tokenize", "write_archive",
]
