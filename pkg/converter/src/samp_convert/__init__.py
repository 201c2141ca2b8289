"""Bridge from huggingface-style BERT checkpoints to the engine archive."""

from .convert import ConversionError, ConversionReport, convert_checkpoint
from .fixture import emit_parity_fixture
from .keymap import MapEntry, build_key_map

__all__ = [
    "ConversionError",
    "ConversionReport",
    "MapEntry",
    "build_key_map",
    "convert_checkpoint",
    "emit_parity_fixture",
]
