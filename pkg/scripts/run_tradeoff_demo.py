#!/usr/bin/env python3
"""End-to-end demo on the checked-in synthetic model: calibrate, profile the
quantized-layer sweep, then print every recommendation rule."""

import tempfile
from pathlib import Path

from samp.allocator import (
    allocate_decay_aware,
    build_profile,
    load_eval_file,
    rank_by_ratio,
)
from samp.archive import load_archive
from samp.cli import render_profile_table
from samp.encoder import FFN_ONLY, FULLY_QUANT, Engine

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "tests" / "data"


def main() -> None:
    archive = load_archive(DATA / "tiny_cls")
    engine = Engine(archive)
    examples = load_eval_file(DATA / "eval.tsv")

    for mode in (FFN_ONLY, FULLY_QUANT):
        profile = build_profile(engine, mode, examples, layer_step=1, repeats=5, warmup=1)
        profile.env["num_layers"] = archive.manifest.num_layers
        print(render_profile_table(profile))
        picks = rank_by_ratio(profile)
        print(f"ratio ranking (best first): {[profile.points[i].quantized_layers for i in picks]}")
        best = allocate_decay_aware(profile)
        print(f"decay-aware pick: {profile.points[best].quantized_layers} quantized layers\n")

    out = tempfile.mkstemp(suffix=".json")[1]
    print(f"profiles can be written with: samp profile --model {DATA / 'tiny_cls'} "
          f"--mode ffn-only --eval {DATA / 'eval.tsv'} --step 1 --out {out}")


if __name__ == "__main__":
    main()
