"""Deterministic synthetic archives for tests, fixtures and demo scripts."""

from __future__ import annotations

import numpy as np

from .archive import (
    ModelArchive,
    ModelManifest,
    compute_fingerprint,
    expected_shapes,
)
from .encoder import Engine
from .tokenization import SPECIAL_TOKENS, Vocab

DEFAULT_WORDS = [
    "the", "a", "quick", "brown", "fox", "jump", "##s", "##ing", "##ed",
    "over", "lazy", "dog", "cat", "run", "walk", "un", "##able", "match",
    "text", "good", "bad", "fast", "slow", "model", "layer", "quant",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ",", ".", "!", "?",
]

SAMPLE_TEXTS = [
    "the quick brown fox jumps over the lazy dog",
    "a lazy cat walks over the slow dog",
    "quant the model layer by layer",
    "good fast model , bad slow model !",
    "unable to match the text ?",
    "the dog runs . the fox walks !",
]


def tiny_vocab(max_seq_len: int = 16, extra_tokens: list[str] | None = None, **kwargs) -> Vocab:
    tokens = list(SPECIAL_TOKENS) + DEFAULT_WORDS + (extra_tokens or [])
    return Vocab.from_tokens(tokens, max_seq_len=max_seq_len, **kwargs)


def build_archive(
    num_layers: int = 2,
    hidden: int = 8,
    num_heads: int = 2,
    intermediate: int = 16,
    task: str = "classification",
    num_labels: int = 2,
    max_position: int = 16,
    seed: int = 0,
    weight_scale: float = 0.35,
    vocab: Vocab | None = None,
) -> ModelArchive:
    """Random but reproducible archive small enough for exhaustive tests."""
    vocab = vocab or tiny_vocab(max_seq_len=max_position)
    manifest = ModelManifest(
        num_layers=num_layers,
        hidden=hidden,
        num_heads=num_heads,
        intermediate=intermediate,
        vocab_size=len(vocab),
        max_position=max_position,
        type_vocab_size=2,
        layernorm_eps=1e-12,
        task=task,
        num_labels=num_labels,
    )
    rng = np.random.default_rng(seed)
    tensors = {}
    for key, shape in expected_shapes(manifest).items():
        if key.endswith("layernorm.gamma"):
            value = 1.0 + 0.1 * rng.standard_normal(shape)
        elif key.endswith("layernorm.beta"):
            value = 0.05 * rng.standard_normal(shape)
        elif key.endswith(".bias") or key.endswith((".b1", ".b2")):
            value = 0.1 * rng.standard_normal(shape)
        else:
            value = weight_scale * rng.standard_normal(shape)
        tensors[key] = value.astype(np.float32)
    archive = ModelArchive(manifest, tensors, vocab)
    archive.validate()
    archive.fingerprint = compute_fingerprint(manifest, tensors)
    return archive


def calibrated_archive(texts: list[str] | None = None, **kwargs) -> ModelArchive:
    """Archive plus a calibration table observed over the sample texts."""
    archive = build_archive(**kwargs)
    engine = Engine(archive)
    pairs = []
    for line in texts or SAMPLE_TEXTS:
        a, _, b = line.partition("\t")
        pairs.append(engine.encode_text(a, b or None))
    archive.calibration = engine.calibrate(pairs)
    return archive
