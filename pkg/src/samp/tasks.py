"""Downstream heads: classification, sequence labeling, text matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .archive import ModelArchive
from .encoder import Engine, EncoderOutput, PrecisionPlan
from .errors import ConfigurationError
from .kernels import F32, softmax_rows


@dataclass
class TaskResult:
    label_ids: list[int]
    scores: list  # one probability distribution, or one per token
    logits: list
    per_token: bool = False
    extras: dict = field(default_factory=dict)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return (1.0 / (1.0 + np.exp(-x.astype(np.float64)))).astype(F32)


def classify(archive: ModelArchive, out: EncoderOutput, multi_label: bool = False) -> TaskResult:
    """Pooled [CLS] classification head with lowest-index argmax tie-break."""
    m = archive.manifest
    if m.task not in ("classification", "text_matching"):
        raise ConfigurationError(f"classify() needs a classification head, manifest task is {m.task}")
    h_cls = out.hidden_states[0:1]
    pooled = np.tanh(h_cls @ archive.tensors["pooler.weight"] + archive.tensors["pooler.bias"])
    logits = (pooled @ archive.tensors["head.weight"] + archive.tensors["head.bias"])[0].astype(F32)
    if multi_label:
        probs = _sigmoid(logits)
        labels = [i for i, p in enumerate(probs) if p >= 0.5]
        return TaskResult(labels, probs.tolist(), logits.tolist(), extras={"multi_label": True})
    probs = softmax_rows(logits[None, :])[0]
    return TaskResult([int(np.argmax(probs))], probs.tolist(), logits.tolist())


def tag(archive: ModelArchive, out: EncoderOutput, attention_length: int) -> TaskResult:
    """Per-token argmax labels over the non-pad prefix."""
    m = archive.manifest
    if m.task != "sequence_labeling":
        raise ConfigurationError(f"tag() needs a sequence_labeling head, manifest task is {m.task}")
    h = out.hidden_states[:attention_length]
    if h.shape[0] == 0:
        return TaskResult([], [], [], per_token=True)
    logits = (h @ archive.tensors["head.weight"] + archive.tensors["head.bias"]).astype(F32)
    probs = softmax_rows(logits)
    labels = [int(np.argmax(row)) for row in probs]
    return TaskResult(labels, probs.tolist(), logits.tolist(), per_token=True)


def match(engine: Engine, plan: PrecisionPlan, text_a: str, text_b: str) -> TaskResult:
    """Encode a sentence pair with segment ids and classify the pair."""
    if engine.manifest.task != "text_matching":
        raise ConfigurationError(
            f"match() needs a text_matching head, manifest task is {engine.manifest.task}"
        )
    enc = engine.encode_text(text_a, text_b)
    out = engine.run(enc, plan)
    return classify(engine.archive, out)
