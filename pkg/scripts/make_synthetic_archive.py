#!/usr/bin/env python3
"""Regenerate the checked-in synthetic model archive and golden outputs.

Goldens are tied to this interpreter/numpy build; rerun this script after
any numerics change and commit the result.
"""

import contextlib
import io
from pathlib import Path

from samp.archive import write_archive
from samp.cli import main as cli_main
from samp.synthetic import SAMPLE_TEXTS, calibrated_archive

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "tests" / "data"

CALIB_TEXTS = SAMPLE_TEXTS
INFER_INPUTS = [
    "the quick brown fox jumps over the lazy dog",
    "a bad slow model",
    "unable to match the text",
]
EVAL_ROWS = [
    ("the quick brown fox", "0"),
    ("a lazy dog walks", "1"),
    ("good fast model", "0"),
    ("bad slow model !", "1"),
    ("quant the model layer", "0"),
    ("the dog runs over the fox", "1"),
]


def run_cli(argv) -> str:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        rc = cli_main(argv)
    if rc != 0:
        raise SystemExit(f"cli {argv} failed with {rc}")
    return buf.getvalue()


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    model_dir = DATA / "tiny_cls"
    archive = calibrated_archive(seed=0, texts=CALIB_TEXTS)
    write_archive(archive, model_dir)
    print(f"wrote archive -> {model_dir} (fingerprint {archive.fingerprint[:12]})")

    (DATA / "calib.txt").write_text("\n".join(CALIB_TEXTS) + "\n", encoding="utf-8")
    (DATA / "infer_inputs.txt").write_text("\n".join(INFER_INPUTS) + "\n", encoding="utf-8")
    (DATA / "eval.tsv").write_text(
        "\n".join(f"{text}\t{label}" for text, label in EVAL_ROWS) + "\n", encoding="utf-8"
    )

    golden = run_cli([
        "infer", "--model", str(model_dir), "--mode", "fp32",
        "--format", "json", "--data", str(DATA / "infer_inputs.txt"),
    ])
    (DATA / "golden_infer_fp32.json").write_text(golden, encoding="utf-8")
    print("wrote golden_infer_fp32.json")

    golden_text = run_cli([
        "infer", "--model", str(model_dir), "--mode", "fp32",
        "--data", str(DATA / "infer_inputs.txt"),
    ])
    (DATA / "golden_infer_fp32.txt").write_text(golden_text, encoding="utf-8")
    print("wrote golden_infer_fp32.txt")

    golden_analyze = run_cli([
        "analyze-quant", "--model", str(model_dir), "--mode", "fully-quant",
        "--format", "csv", "--data", str(DATA / "infer_inputs.txt"),
        "--sites", "L*.attn.softmax",
    ])
    (DATA / "golden_analyze_softmax.csv").write_text(golden_analyze, encoding="utf-8")
    print("wrote golden_analyze_softmax.csv")


if __name__ == "__main__":
    main()
