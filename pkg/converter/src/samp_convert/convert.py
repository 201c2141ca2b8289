"""Checkpoint conversion to the engine's archive directory layout.

Writes manifest.json, tensors.bin (+ index), vocab.txt and a conversion
report. This package deliberately reimplements the documented on-disk
format instead of importing the engine, so the two sides only meet at the
file boundary.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from .keymap import build_key_map, expected_shape

TASKS = ("classification", "sequence_labeling", "text_matching")


class ConversionError(Exception):
    pass


@dataclass
class SourceCheckpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    vocab_path: str | None


@dataclass
class ConversionReport:
    mapped: dict[str, str] = field(default_factory=dict)
    transposed: list[str] = field(default_factory=list)
    unmapped_source_keys: list[str] = field(default_factory=list)
    missing_required: list[str] = field(default_factory=list)
    shape_checks: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "mapped": self.mapped,
                "missing_required": sorted(self.missing_required),
                "shape_checks": self.shape_checks,
                "transposed": sorted(self.transposed),
                "unmapped_source_keys": sorted(self.unmapped_source_keys),
            },
            indent=2,
            sort_keys=True,
        )


def _strip_prefix(state: dict) -> dict:
    """Accept checkpoints saved without the leading task-model wrapper."""
    if any(k.startswith("bert.") for k in state):
        return state
    renamed = {}
    for key, value in state.items():
        if key.startswith(("embeddings.", "encoder.", "pooler.")):
            renamed["bert." + key] = value
        else:
            renamed[key] = value
    return renamed


def load_checkpoint(src_path) -> SourceCheckpoint:
    config_path = os.path.join(src_path, "config.json")
    if not os.path.exists(config_path):
        raise ConversionError(f"no config.json under {src_path}")
    with open(config_path, encoding="utf-8") as fh:
        config = json.load(fh)

    safetensors_path = os.path.join(src_path, "model.safetensors")
    bin_path = os.path.join(src_path, "pytorch_model.bin")
    if os.path.exists(safetensors_path):
        from safetensors.torch import load_file

        state = load_file(safetensors_path)
    elif os.path.exists(bin_path):
        import torch

        state = torch.load(bin_path, map_location="cpu", weights_only=True)
    else:
        raise ConversionError(
            f"no model.safetensors or pytorch_model.bin under {src_path}"
        )
    tensors = {k: v.to("cpu").float().numpy() for k, v in _strip_prefix(state).items()}
    vocab = os.path.join(src_path, "vocab.txt")
    return SourceCheckpoint(config, tensors, vocab if os.path.exists(vocab) else None)


def manifest_from_config(config: dict, task: str, num_labels: int) -> dict:
    try:
        manifest = {
            "num_layers": int(config["num_hidden_layers"]),
            "hidden": int(config["hidden_size"]),
            "num_heads": int(config["num_attention_heads"]),
            "intermediate": int(config["intermediate_size"]),
            "vocab_size": int(config["vocab_size"]),
            "max_position": int(config["max_position_embeddings"]),
            "type_vocab_size": int(config["type_vocab_size"]),
            "layernorm_eps": float(config.get("layer_norm_eps", 1e-12)),
            "task": task,
            "num_labels": int(num_labels),
        }
    except KeyError as exc:
        raise ConversionError(f"config.json is missing field {exc}") from exc
    if task not in TASKS:
        raise ConversionError(f"unknown task {task!r}; expected one of {TASKS}")
    act = config.get("hidden_act", "gelu")
    if act not in ("gelu_new", "gelu_pytorch_tanh", "gelu_python_tanh"):
        import logging

        logging.getLogger(__name__).warning(
            "checkpoint activation %r; the engine always uses the tanh "
            "approximation, expect small deviations for erf-based gelu", act
        )
    return manifest


def remap_tensors(
    src: SourceCheckpoint, manifest: dict
) -> tuple[dict[str, np.ndarray], ConversionReport]:
    report = ConversionReport()
    with_pooler = manifest["task"] in ("classification", "text_matching")
    key_map = build_key_map(manifest["num_layers"], with_pooler)
    out: dict[str, np.ndarray] = {}
    consumed = set()
    for entry in key_map:
        if entry.source_key not in src.tensors:
            report.missing_required.append(entry.canonical_key)
            continue
        value = src.tensors[entry.source_key]
        consumed.add(entry.source_key)
        if entry.transpose:
            value = np.ascontiguousarray(value.T)
            report.transposed.append(entry.canonical_key)
        want = expected_shape(
            entry.canonical_key,
            manifest["hidden"], manifest["intermediate"], manifest["vocab_size"],
            manifest["max_position"], manifest["type_vocab_size"], manifest["num_labels"],
        )
        if tuple(value.shape) != want:
            raise ConversionError(
                f"{entry.source_key} -> {entry.canonical_key}: shape "
                f"{tuple(value.shape)} does not match required {want}"
            )
        report.shape_checks += 1
        out[entry.canonical_key] = value.astype("<f4")
        report.mapped[entry.source_key] = entry.canonical_key
    report.unmapped_source_keys = sorted(set(src.tensors) - consumed)
    if report.missing_required:
        missing = ", ".join(sorted(report.missing_required))
        raise ConversionError(f"source checkpoint is missing tensors for: {missing}")
    return out, report


def write_archive_files(out_dir, manifest: dict, tensors: dict[str, np.ndarray],
                        vocab_src: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    index = {}
    offset = 0
    with open(os.path.join(out_dir, "tensors.bin"), "wb") as fh:
        for key in sorted(tensors):
            raw = np.ascontiguousarray(tensors[key], dtype="<f4").tobytes()
            index[key] = {"offset_bytes": offset, "shape": list(tensors[key].shape)}
            fh.write(raw)
            offset += len(raw)
    with open(os.path.join(out_dir, "tensors.idx.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    shutil.copyfile(vocab_src, os.path.join(out_dir, "vocab.txt"))


def convert_checkpoint(src_path, out_dir, task: str, num_labels: int) -> ConversionReport:
    """Convert a huggingface-style BERT checkpoint directory to an archive."""
    src = load_checkpoint(src_path)
    if src.vocab_path is None:
        raise ConversionError(f"no vocab.txt under {src_path}")
    manifest = manifest_from_config(src.config, task, num_labels)
    tensors, report = remap_tensors(src, manifest)
    write_archive_files(out_dir, manifest, tensors, src.vocab_path)
    with open(os.path.join(out_dir, "conversion_report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    return report
