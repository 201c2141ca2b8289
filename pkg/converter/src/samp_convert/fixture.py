"""Parity fixtures: fixed-seed inputs plus source-framework logits.

The emitted JSON lets any engine implementation check its end-to-end logits
against the source framework without depending on torch at test time.
"""

from __future__ import annotations

import json
import random

from .convert import ConversionError, load_checkpoint


def _plain_words(vocab_path) -> list[str]:
    with open(vocab_path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    return [
        t for t in tokens
        if t and not t.startswith(("[", "##")) and t.isascii() and t.isalpha() and t.islower()
    ]


def generate_inputs(vocab_path, count: int, seed: int) -> list[str]:
    words = _plain_words(vocab_path)
    if not words:
        raise ConversionError(f"vocab at {vocab_path} has no plain lowercase words")
    rng = random.Random(seed)
    return [
        " ".join(rng.choice(words) for _ in range(rng.randint(3, 8)))
        for _ in range(count)
    ]


def source_logits(src_path, texts: list[str]) -> list[list[float]]:
    import torch
    from transformers import AutoModelForSequenceClassification, BertTokenizer

    model = AutoModelForSequenceClassification.from_pretrained(src_path).eval()
    tokenizer = BertTokenizer.from_pretrained(src_path)
    out = []
    with torch.no_grad():
        for text in texts:
            batch = tokenizer(text, return_tensors="pt")
            logits = model(**batch).logits[0]
            out.append([float(v) for v in logits])
    return out


def emit_parity_fixture(src_path, out_file, count: int = 5, seed: int = 1234) -> dict:
    """Write {inputs, logits, seed} for ``count`` deterministic inputs."""
    if count < 1:
        raise ConversionError("fixture needs at least one input")
    src = load_checkpoint(src_path)
    if src.vocab_path is None:
        raise ConversionError(f"no vocab.txt under {src_path}")
    texts = generate_inputs(src.vocab_path, count, seed)
    doc = {"inputs": texts, "logits": source_logits(src_path, texts), "seed": seed}
    with open(out_file, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc
