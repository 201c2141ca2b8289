"""Portable model archive: manifest + raw tensor blobs + vocab + calibration.

On-disk layout (a directory):
  manifest.json     model hyperparameters, snake_case keys
  tensors.bin       concatenated raw little-endian FP32 blobs
  tensors.idx.json  canonical key -> {"offset_bytes": int, "shape": [..]}
  vocab.txt         one token per line, line number == id
  calibration.json  optional amax table (see quantization module)

Weight matrices are stored as (in_features, out_features) so inference
multiplies activation @ weight without transposition.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import FormatError, LoadError
from .quantization import CalibrationTable
from .tokenization import Vocab

log = logging.getLogger(__name__)

TASKS = ("classification", "sequence_labeling", "text_matching")

MANIFEST_FILE = "manifest.json"
TENSORS_FILE = "tensors.bin"
INDEX_FILE = "tensors.idx.json"
VOCAB_FILE = "vocab.txt"
CALIBRATION_FILE = "calibration.json"

_F32_LE = np.dtype("<f4")


@dataclass(frozen=True)
class ModelManifest:
    num_layers: int
    hidden: int
    num_heads: int
    intermediate: int
    vocab_size: int
    max_position: int
    type_vocab_size: int
    layernorm_eps: float
    task: str
    num_labels: int

    def __post_init__(self):
        sizes = {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "num_heads": self.num_heads,
            "intermediate": self.intermediate,
            "vocab_size": self.vocab_size,
            "max_position": self.max_position,
            "type_vocab_size": self.type_vocab_size,
            "num_labels": self.num_labels,
        }
        for name, value in sizes.items():
            if int(value) < 1:
                raise LoadError(f"manifest field {name} must be >= 1, got {value}")
        if self.hidden % self.num_heads != 0:
            raise LoadError(
                f"hidden={self.hidden} is not divisible by num_heads={self.num_heads}"
            )
        if self.task not in TASKS:
            raise LoadError(f"unknown task {self.task!r}; expected one of {TASKS}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    @property
    def uses_pooler(self) -> bool:
        return self.task in ("classification", "text_matching")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelManifest":
        doc = json.loads(text)
        try:
            return cls(**doc)
        except TypeError as exc:
            raise LoadError(f"bad manifest: {exc}") from exc


def layer_keys(i: int) -> dict[str, str]:
    p = f"encoder.layer.{i}"
    return {
        "qw": f"{p}.attn.q.weight", "qb": f"{p}.attn.q.bias",
        "kw": f"{p}.attn.k.weight", "kb": f"{p}.attn.k.bias",
        "vw": f"{p}.attn.v.weight", "vb": f"{p}.attn.v.bias",
        "ow": f"{p}.attn.out.weight", "ob": f"{p}.attn.out.bias",
        "attn_ln_g": f"{p}.attn.layernorm.gamma", "attn_ln_b": f"{p}.attn.layernorm.beta",
        "w1": f"{p}.ffn.w1", "b1": f"{p}.ffn.b1",
        "w2": f"{p}.ffn.w2", "b2": f"{p}.ffn.b2",
        "ffn_ln_g": f"{p}.ffn.layernorm.gamma", "ffn_ln_b": f"{p}.ffn.layernorm.beta",
    }


def expected_shapes(m: ModelManifest) -> dict[str, tuple[int, ...]]:
    """Canonical key -> required shape, derived entirely from the manifest."""
    h, inter = m.hidden, m.intermediate
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.word.weight": (m.vocab_size, h),
        "embeddings.position.weight": (m.max_position, h),
        "embeddings.token_type.weight": (m.type_vocab_size, h),
        "embeddings.layernorm.gamma": (h,),
        "embeddings.layernorm.beta": (h,),
        "head.weight": (h, m.num_labels),
        "head.bias": (m.num_labels,),
    }
    for i in range(m.num_layers):
        keys = layer_keys(i)
        for name in ("qw", "kw", "vw", "ow"):
            shapes[keys[name]] = (h, h)
        for name in ("qb", "kb", "vb", "ob", "attn_ln_g", "attn_ln_b",
                     "ffn_ln_g", "ffn_ln_b", "b2"):
            shapes[keys[name]] = (h,)
        shapes[keys["w1"]] = (h, inter)
        shapes[keys["b1"]] = (inter,)
        shapes[keys["w2"]] = (inter, h)
    if m.uses_pooler:
        shapes["pooler.weight"] = (h, h)
        shapes["pooler.bias"] = (h,)
    return shapes


def optional_shapes(m: ModelManifest) -> dict[str, tuple[int, ...]]:
    """Recognized-but-not-required keys (pooler for sequence labeling)."""
    if m.uses_pooler:
        return {}
    return {"pooler.weight": (m.hidden, m.hidden), "pooler.bias": (m.hidden,)}


@dataclass
class ModelArchive:
    manifest: ModelManifest
    tensors: dict[str, np.ndarray]
    vocab: Vocab
    calibration: CalibrationTable | None = None
    fingerprint: str = ""

    def validate(self, permissive: bool = False) -> None:
        required = expected_shapes(self.manifest)
        recognized = dict(required)
        recognized.update(optional_shapes(self.manifest))
        for key, shape in required.items():
            if key not in self.tensors:
                raise LoadError(f"archive is missing required tensor {key!r}")
            actual = tuple(self.tensors[key].shape)
            if actual != shape:
                raise LoadError(
                    f"tensor {key!r} has shape {actual}, expected {shape}"
                )
        for key in self.tensors:
            if key not in recognized:
                if permissive:
                    log.warning("ignoring unrecognized tensor %s", key)
                else:
                    raise LoadError(f"archive contains unrecognized tensor {key!r}")
            elif key not in required:
                actual = tuple(self.tensors[key].shape)
                if actual != recognized[key]:
                    raise LoadError(f"tensor {key!r} has shape {actual}, expected {recognized[key]}")
        if len(self.vocab) != self.manifest.vocab_size:
            raise LoadError(
                f"vocab has {len(self.vocab)} tokens but manifest says "
                f"{self.manifest.vocab_size}"
            )

    def freeze(self) -> None:
        for arr in self.tensors.values():
            arr.flags.writeable = False


def _tensor_payload(tensors: dict[str, np.ndarray]) -> tuple[bytes, dict]:
    index = {}
    chunks = []
    offset = 0
    for key in sorted(tensors):
        arr = np.ascontiguousarray(tensors[key], dtype=_F32_LE)
        raw = arr.tobytes()
        index[key] = {"offset_bytes": offset, "shape": list(arr.shape)}
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), index


def compute_fingerprint(manifest: ModelManifest, tensors: dict[str, np.ndarray]) -> str:
    blob, _ = _tensor_payload(tensors)
    digest = hashlib.sha256()
    digest.update(manifest.to_json().encode("utf-8"))
    digest.update(blob)
    return digest.hexdigest()


def write_archive(archive: ModelArchive, path) -> None:
    """Serialize an archive directory; byte-deterministic for equal inputs."""
    if not archive.tensors:
        raise FormatError("archive has no tensors to serialize")
    archive.validate()
    os.makedirs(path, exist_ok=True)
    blob, index = _tensor_payload(archive.tensors)
    try:
        with open(os.path.join(path, MANIFEST_FILE), "w", encoding="utf-8") as fh:
            fh.write(archive.manifest.to_json() + "\n")
        with open(os.path.join(path, TENSORS_FILE), "wb") as fh:
            fh.write(blob)
        with open(os.path.join(path, INDEX_FILE), "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=2, sort_keys=True)
        archive.vocab.save(os.path.join(path, VOCAB_FILE))
        if archive.calibration is not None:
            with open(os.path.join(path, CALIBRATION_FILE), "w", encoding="utf-8") as fh:
                fh.write(archive.calibration.to_json() + "\n")
    except OSError as exc:
        raise FormatError(f"failed writing archive at {path}: {exc}") from exc


def load_archive(path, permissive: bool = False) -> ModelArchive:
    """Load and fully validate an archive; the result is immutable."""
    def read(name: str, mode="r"):
        full = os.path.join(path, name)
        try:
            with open(full, mode, encoding=None if "b" in mode else "utf-8") as fh:
                return fh.read()
        except OSError as exc:
            raise LoadError(f"cannot read {full}: {exc}") from exc

    manifest = ModelManifest.from_json(read(MANIFEST_FILE))
    try:
        index = json.loads(read(INDEX_FILE))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt tensor index: {exc}") from exc
    blob = read(TENSORS_FILE, "rb")

    tensors: dict[str, np.ndarray] = {}
    for key, meta in index.items():
        shape = tuple(int(d) for d in meta["shape"])
        offset = int(meta["offset_bytes"])
        nbytes = int(np.prod(shape)) * 4
        if offset < 0 or offset + nbytes > len(blob):
            raise FormatError(
                f"tensor {key!r} at offset {offset} (+{nbytes} bytes) overruns "
                f"tensors.bin of {len(blob)} bytes"
            )
        flat = np.frombuffer(blob, dtype=_F32_LE, count=int(np.prod(shape)), offset=offset)
        tensors[key] = flat.reshape(shape).astype(np.float32)
    total = sum(int(np.prod(m["shape"])) * 4 for m in index.values())
    if total != len(blob):
        raise FormatError(
            f"tensors.bin holds {len(blob)} bytes but the index describes {total}"
        )

    vocab = Vocab.load(os.path.join(path, VOCAB_FILE), max_seq_len=manifest.max_position)

    calibration = None
    calib_path = os.path.join(path, CALIBRATION_FILE)
    if os.path.exists(calib_path):
        calibration = CalibrationTable.from_json(read(CALIBRATION_FILE))

    arch = ModelArchive(manifest, tensors, vocab, calibration)
    arch.validate(permissive=permissive)
    arch.fingerprint = compute_fingerprint(manifest, tensors)
    if calibration is not None and calibration.model_fingerprint:
        if calibration.model_fingerprint != arch.fingerprint:
            log.warning(
                "calibration fingerprint %s does not match archive %s",
                calibration.model_fingerprint[:12], arch.fingerprint[:12],
            )
    arch.freeze()
    return arch
