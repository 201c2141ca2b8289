"""Source-key to canonical-key mapping for BERT-style checkpoints.

Canonical archive weights are stored (in_features, out_features); torch
Linear weights are (out, in), so every dense weight transposes.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class MapEntry:
    source_key: str
    canonical_key: str
    transpose: bool = False


def build_key_map(num_layers: int, with_pooler: bool) -> list[MapEntry]:
    """Ordered map covering every canonical key the archive requires."""
    entries = [
        MapEntry("bert.embeddings.word_embeddings.weight", "embeddings.word.weight"),
        MapEntry("bert.embeddings.position_embeddings.weight", "embeddings.position.weight"),
        MapEntry("bert.embeddings.token_type_embeddings.weight", "embeddings.token_type.weight"),
        MapEntry("bert.embeddings.LayerNorm.weight", "embeddings.layernorm.gamma"),
        MapEntry("bert.embeddings.LayerNorm.bias", "embeddings.layernorm.beta"),
    ]
    for i in range(num_layers):
        src = f"bert.encoder.layer.{i}"
        dst = f"encoder.layer.{i}"
        for hf_name, our_name in (("query", "q"), ("key", "k"), ("value", "v")):
            entries.append(MapEntry(f"{src}.attention.self.{hf_name}.weight",
                                    f"{dst}.attn.{our_name}.weight", transpose=True))
            entries.append(MapEntry(f"{src}.attention.self.{hf_name}.bias",
                                    f"{dst}.attn.{our_name}.bias"))
        entries += [
            MapEntry(f"{src}.attention.output.dense.weight", f"{dst}.attn.out.weight", True),
            MapEntry(f"{src}.attention.output.dense.bias", f"{dst}.attn.out.bias"),
            MapEntry(f"{src}.attention.output.LayerNorm.weight", f"{dst}.attn.layernorm.gamma"),
            MapEntry(f"{src}.attention.output.LayerNorm.bias", f"{dst}.attn.layernorm.beta"),
            MapEntry(f"{src}.intermediate.dense.weight", f"{dst}.ffn.w1", True),
            MapEntry(f"{src}.intermediate.dense.bias", f"{dst}.ffn.b1"),
            MapEntry(f"{src}.output.dense.weight", f"{dst}.ffn.w2", True),
            MapEntry(f"{src}.output.dense.bias", f"{dst}.ffn.b2"),
            MapEntry(f"{src}.output.LayerNorm.weight", f"{dst}.ffn.layernorm.gamma"),
            MapEntry(f"{src}.output.LayerNorm.bias", f"{dst}.ffn.layernorm.beta"),
        ]
    if with_pooler:
        entries += [
            MapEntry("bert.pooler.dense.weight", "pooler.weight", True),
            MapEntry("bert.pooler.dense.bias", "pooler.bias"),
        ]
    entries += [
        MapEntry("classifier.weight", "head.weight", True),
        MapEntry("classifier.bias", "head.bias"),
    ]
    return entries


def expected_shape(key: str, hidden: int, intermediate: int, vocab_size: int,
                   max_position: int, type_vocab_size: int, num_labels: int):
    """Required archive shape for a canonical key."""
    fixed = {
        "embeddings.word.weight": (vocab_size, hidden),
        "embeddings.position.weight": (max_position, hidden),
        "embeddings.token_type.weight": (type_vocab_size, hidden),
        "embeddings.layernorm.gamma": (hidden,),
        "embeddings.layernorm.beta": (hidden,),
        "pooler.weight": (hidden, hidden),
        "pooler.bias": (hidden,),
        "head.weight": (hidden, num_labels),
        "head.bias": (num_labels,),
    }
    if key in fixed:
        return fixed[key]
    leaf = key.split(".", 3)[-1]
    return {
        "attn.q.weight": (hidden, hidden), "attn.k.weight": (hidden, hidden),
        "attn.v.weight": (hidden, hidden), "attn.out.weight": (hidden, hidden),
        "attn.q.bias": (hidden,), "attn.k.bias": (hidden,),
        "attn.v.bias": (hidden,), "attn.out.bias": (hidden,),
        "attn.layernorm.gamma": (hidden,), "attn.layernorm.beta": (hidden,),
        "ffn.w1": (hidden, intermediate), "ffn.b1": (intermediate,),
        "ffn.w2": (intermediate, hidden), "ffn.b2": (hidden,),
        "ffn.layernorm.gamma": (hidden,), "ffn.layernorm.beta": (hidden,),
    }[leaf]
