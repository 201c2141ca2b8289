"""Command-line surface: calibrate, infer, profile, recommend, analyze-quant,
bench.

Exit codes: 0 success, 1 runtime or infeasibility errors, 2 usage errors.
``SAMP_NAIVE_KERNELS=1`` forces the scalar oracle GEMM paths everywhere.
"""

from __future__ import annotations

import argparse
import csv
import fnmatch
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import allocator as alloc
from .archive import load_archive
from .encoder import FFN_ONLY, FP, FULLY_QUANT, Engine, PrecisionPlan
from .errors import (
    ConfigurationError,
    DataFormatError,
    EngineError,
    InputError,
)
from .quantization import CodeUsageReport, code_usage, quantize
from .tasks import classify, tag
from .tokenization import EncodedInput
from .trace import trace_ops

MODES = ("fp32", "fp16", "fully-quant", "ffn-only")
FORMATS = ("text", "json", "csv")

_MODE_TO_PLAN = {"fp32": FP, "fp16": FP, "fully-quant": FULLY_QUANT, "ffn-only": FFN_ONLY}


def _jsonify(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def read_data_lines(path) -> list[str]:
    """Read a one-example-per-line UTF-8 file, reporting bad lines by number."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read data file {path}: {exc}") from exc
    lines = []
    for no, chunk in enumerate(raw.split(b"\n"), start=1):
        try:
            text = chunk.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"{path}: line {no}: not valid UTF-8 ({exc})") from exc
        if text.strip():
            lines.append(text)
    if not lines:
        raise InputError(f"data file {path} is empty")
    return lines


def _parse_quant_layers(value: str, num_layers: int) -> int:
    if value == "all":
        return num_layers
    try:
        k = int(value)
    except ValueError:
        raise ConfigurationError(f"--quant-layers must be an integer or 'all', got {value!r}")
    if not 0 <= k <= num_layers:
        raise ConfigurationError(
            f"--quant-layers {k} outside [0, {num_layers}] for this model"
        )
    return k


def _build_plan(mode: str, quant_layers: str, num_layers: int) -> PrecisionPlan:
    plan_mode = _MODE_TO_PLAN[mode]
    if plan_mode == FP:
        return PrecisionPlan.prefix(FP, num_layers, 0)
    return PrecisionPlan.prefix(plan_mode, num_layers, _parse_quant_layers(quant_layers, num_layers))


def _load_engine(args) -> Engine:
    archive = load_archive(args.model)
    return Engine(archive, fp16_storage=(args.mode == "fp16") if hasattr(args, "mode") else False)


def _split_pair(line: str) -> tuple[str, str | None]:
    if "\t" in line:
        a, b = line.split("\t", 1)
        return a, b
    return line, None


# ---------------------------------------------------------------- calibrate


def cmd_calibrate(args) -> int:
    engine = _load_engine(args)
    lines = read_data_lines(args.data)
    encoded = [engine.encode_text(*_split_pair(line)) for line in lines]
    table = engine.calibrate(encoded)
    table.warn_floored()
    out_path = args.out
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(table.to_json() + "\n")
    print(f"calibrated {len(table.entries)} sites from {len(lines)} inputs -> {out_path}")
    return 0


# -------------------------------------------------------------------- infer


def _infer_one(engine: Engine, plan: PrecisionPlan, line: str):
    text_a, text_b = _split_pair(line)
    task = engine.manifest.task
    if task == "text_matching" and text_b is None:
        raise InputError(f"text_matching needs tab-separated pairs, got {line!r}")
    enc = engine.encode_text(text_a, text_b)
    out = engine.run(enc, plan)
    if task == "sequence_labeling":
        return tag(engine.archive, out, enc.attention_length)
    return classify(engine.archive, out)


def _format_infer_results(inputs, results, fmt: str) -> str:
    if fmt == "json":
        docs = []
        for line, res in zip(inputs, results):
            docs.append(
                {
                    "input": line,
                    "label_ids": res.label_ids,
                    "logits": res.logits,
                    "per_token": res.per_token,
                    "scores": res.scores,
                }
            )
        return _jsonify(docs)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["input", "label_ids", "scores"])
        for line, res in zip(inputs, results):
            writer.writerow([line, " ".join(map(str, res.label_ids)),
                             " ".join(f"{_max_score(res, j):.6f}" for j in range(len(res.label_ids)))])
        return buf.getvalue().rstrip("\n")
    rows = []
    for line, res in zip(inputs, results):
        if res.per_token:
            tags_s = " ".join(map(str, res.label_ids))
            rows.append(f"input={line!r} tags=[{tags_s}]")
        else:
            label = res.label_ids[0] if res.label_ids else -1
            score = res.scores[label] if res.label_ids else float("nan")
            rows.append(f"input={line!r} label={label} score={score:.6f}")
    return "\n".join(rows)


def _max_score(res, j: int) -> float:
    if res.per_token:
        return max(res.scores[j])
    return res.scores[res.label_ids[j]]


def cmd_infer(args) -> int:
    engine = _load_engine(args)
    plan = _build_plan(args.mode, args.quant_layers, engine.manifest.num_layers)
    engine.check_plan(plan)
    inputs = list(args.text)
    if args.data:
        inputs.extend(read_data_lines(args.data))
    if not inputs:
        raise InputError("no inputs: pass TEXT arguments or --data FILE")
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(lambda ln: _infer_one(engine, plan, ln), inputs))
    else:
        results = [_infer_one(engine, plan, ln) for ln in inputs]
    print(_format_infer_results(inputs, results, args.format))
    return 0


# ------------------------------------------------------------------ profile


def render_profile_table(profile: alloc.Profile) -> str:
    num_layers = int(profile.env.get("num_layers", profile.points[-1].quantized_layers))
    header = "quantized_layers\tmha_quant\tffn_quant\taccuracy\tlatency_s\tspeedup"
    rows = [f"mode={profile.mode}\tbaseline_latency_s={profile.baseline.latency:.6f}", header]
    for p in profile.points:
        mha = p.quantized_layers if profile.mode == FULLY_QUANT else 0
        rows.append(
            f"{p.quantized_layers}\t{mha}/{num_layers}\t{p.quantized_layers}/{num_layers}"
            f"\t{p.accuracy:.4f}\t{p.latency:.6f}\t{p.speedup:.4f}"
        )
    return "\n".join(rows)


def cmd_profile(args) -> int:
    engine = _load_engine(args)
    if args.mode not in ("fully-quant", "ffn-only"):
        raise ConfigurationError("profiling sweeps a quantized mode: use fully-quant or ffn-only")
    examples = alloc.load_eval_file(args.eval)
    profile = alloc.build_profile(
        engine,
        _MODE_TO_PLAN[args.mode],
        examples,
        layer_step=args.step,
        repeats=args.repeats,
        warmup=args.warmup,
        threads=args.threads,
    )
    profile.env["num_layers"] = engine.manifest.num_layers
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(profile.to_json() + "\n")
    if args.format == "json":
        print(profile.to_json())
    else:
        print(render_profile_table(profile))
    return 0


# ---------------------------------------------------------------- recommend


def cmd_recommend(args) -> int:
    with open(args.profile, encoding="utf-8") as fh:
        profile = alloc.Profile.from_json(fh.read())

    def describe(i: int, rule: str) -> dict:
        p = profile.points[i]
        return {
            "accuracy": p.accuracy,
            "latency_s": p.latency,
            "quantized_layers": p.quantized_layers,
            "rule": rule,
            "speedup": p.speedup,
        }

    if args.max_latency is not None:
        picks = [describe(select_idx, "latency-threshold")
                 for select_idx in [alloc.select_by_latency_threshold(profile, args.max_latency)]]
    elif args.min_accuracy is not None:
        picks = [describe(select_idx, "accuracy-threshold")
                 for select_idx in [alloc.select_by_accuracy_threshold(profile, args.min_accuracy)]]
    else:
        picks = [describe(i, f"ratio-top-{args.top}") for i in alloc.rank_by_ratio(profile, args.top)]
        picks.append(describe(alloc.allocate_decay_aware(profile, args.latency_semantics),
                              f"decay-aware({args.latency_semantics})"))
    if args.format == "json":
        print(_jsonify({"mode": profile.mode, "recommendations": picks}))
    else:
        print(f"mode={profile.mode}")
        for pick in picks:
            print(
                f"rule={pick['rule']}\tquantized_layers={pick['quantized_layers']}"
                f"\taccuracy={pick['accuracy']:.4f}\tspeedup={pick['speedup']:.4f}"
            )
    return 0


# ------------------------------------------------------------- analyze-quant


def cmd_analyze_quant(args) -> int:
    engine = _load_engine(args)
    if args.mode not in ("fully-quant", "ffn-only"):
        raise ConfigurationError("analyze-quant needs a quantized mode (fully-quant or ffn-only)")
    plan = _build_plan(args.mode, args.quant_layers, engine.manifest.num_layers)
    if plan.quantized_layer_count == 0:
        raise ConfigurationError("analyze-quant needs at least one quantized layer")
    table = engine.check_plan(plan)
    sites = sorted(plan.required_sites())
    selected = [s for s in sites if fnmatch.fnmatch(s, args.sites)]
    if not selected:
        raise InputError(
            f"site filter {args.sites!r} matches nothing; valid sites: {', '.join(sites)}"
        )
    lines = read_data_lines(args.data)
    reports: dict[str, CodeUsageReport] = {}
    for line in lines:
        text_a, text_b = _split_pair(line)
        enc = engine.encode_text(text_a, text_b)
        out = engine.run(enc, plan, capture_taps=True)
        for site in selected:
            codes = quantize(out.taps[site], table.scale(site), site=site)
            report = code_usage(codes, site=site)
            reports[site] = reports[site].merged(report) if site in reports else report

    if args.format == "json":
        doc = {
            site: {
                "histogram": r.histogram,
                "unused_count": r.unused_count,
                "unused_percent": r.unused_percent,
                "used_count": r.used_count,
            }
            for site, r in reports.items()
        }
        text = _jsonify(doc)
    elif args.format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["site", "used_count", "unused_count", "unused_percent"]
                        + [f"code_{c}" for c in range(-128, 128)])
        for site in selected:
            r = reports[site]
            writer.writerow([site, r.used_count, r.unused_count, f"{r.unused_percent:.2f}"]
                            + r.histogram)
        text = buf.getvalue().rstrip("\n")
    else:
        rows = ["site\tused_count\tunused_count\tunused_percent"]
        rows += [
            f"{site}\t{reports[site].used_count}\t{reports[site].unused_count}"
            f"\t{reports[site].unused_percent:.2f}"
            for site in selected
        ]
        text = "\n".join(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


# -------------------------------------------------------------------- bench


def _random_inputs(engine: Engine, batch: int, seq: int, rng) -> list[EncodedInput]:
    m = engine.manifest
    if seq > m.max_position:
        raise ConfigurationError(f"seq len {seq} exceeds max_position {m.max_position}")
    out = []
    for _ in range(batch):
        ids = rng.integers(0, m.vocab_size, size=seq).tolist()
        out.append(EncodedInput(ids, [0] * seq, seq))
    return out


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"{flag} expects a comma-separated int list, got {text!r}")
    if not values:
        raise ConfigurationError(f"{flag} is empty")
    return values


def cmd_bench(args) -> int:
    engine = _load_engine(args)
    num_layers = engine.manifest.num_layers
    batch_sizes = _parse_int_list(args.batch_sizes, "--batch-sizes")
    seq_lens = _parse_int_list(args.seq_lens, "--seq-lens")
    modes = list(args.modes)
    rng = np.random.default_rng(0)

    rows = []
    for mode in modes:
        plan = _build_plan(mode, args.quant_layers, num_layers)
        bench_engine = Engine(engine.archive, fp16_storage=(mode == "fp16"))
        try:
            bench_engine.check_plan(plan)
        except EngineError as exc:
            print(f"skipping mode {mode}: {exc}", file=sys.stderr)
            continue
        for batch in batch_sizes:
            for seq in seq_lens:
                inputs = _random_inputs(bench_engine, batch, seq, rng)

                def forward():
                    for enc in inputs:
                        bench_engine.run(enc, plan)

                latency = alloc.measure_median_latency(
                    forward, args.repeats, args.warmup, args.threads
                )
                with trace_ops() as tr:
                    bench_engine.run(inputs[0], plan)
                rows.append(
                    {
                        "batch": batch,
                        "f32_gemm_bytes": tr.gemm_bytes("f32"),
                        "int8_gemm_bytes": tr.gemm_bytes("i8"),
                        "latency_s": latency,
                        "mode": mode,
                        "seq": seq,
                    }
                )

    fp32_latency = {
        (r["batch"], r["seq"]): r["latency_s"] for r in rows if r["mode"] == "fp32"
    }
    for r in rows:
        base = fp32_latency.get((r["batch"], r["seq"]))
        r["speedup_vs_fp32"] = (base / r["latency_s"]) if base else float("nan")

    if engine.manifest.hidden >= 256:
        for r in rows:
            if r["mode"] in ("fully-quant", "ffn-only") and r["seq"] >= 128:
                base = fp32_latency.get((r["batch"], r["seq"]))
                if base and r["latency_s"] > base:
                    print(
                        f"warning: {r['mode']} batch={r['batch']} seq={r['seq']} is slower "
                        f"than fp32 ({r['latency_s']:.6f}s vs {base:.6f}s)",
                        file=sys.stderr,
                    )

    if args.format == "json":
        print(_jsonify(rows))
    elif args.format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["mode", "batch", "seq", "latency_s", "speedup_vs_fp32",
                         "f32_gemm_bytes", "int8_gemm_bytes"])
        for r in rows:
            writer.writerow([r["mode"], r["batch"], r["seq"], f"{r['latency_s']:.6f}",
                             f"{r['speedup_vs_fp32']:.4f}", r["f32_gemm_bytes"], r["int8_gemm_bytes"]])
        print(buf.getvalue().rstrip("\n"))
    else:
        print("mode\tbatch\tseq\tlatency_s\tspeedup_vs_fp32")
        for r in rows:
            print(f"{r['mode']}\t{r['batch']}\t{r['seq']}\t{r['latency_s']:.6f}"
                  f"\t{r['speedup_vs_fp32']:.4f}")
    return 0


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samp",
        description="Mixed-precision INT8 inference engine for transformer encoders.",
        epilog="Set SAMP_NAIVE_KERNELS=1 to force the scalar oracle GEMM paths.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, help="model archive directory")
    common.add_argument("--mode", choices=MODES, default="fp32")
    common.add_argument("--quant-layers", default="all",
                        help="layers to quantize in quantized modes (int or 'all')")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--format", choices=FORMATS, default="text")

    p = sub.add_parser("calibrate", parents=[common], help="min-max calibrate over a text file")
    p.add_argument("--data", required=True, help="one text per line (TAB pair for matching)")
    p.add_argument("--out", required=True, help="output calibration.json path")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("infer", parents=[common], help="run end-to-end inference")
    p.add_argument("text", nargs="*", help="input texts (TAB-separated pairs for matching)")
    p.add_argument("--data", help="file of inputs, one per line")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("profile", parents=[common],
                       help="sweep quantized layer counts, measuring accuracy and latency")
    p.add_argument("--eval", required=True, help="TSV eval file: text[TAB text][TAB label]")
    p.add_argument("--step", type=int, default=2)
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out", help="write the JSON profile here")
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("recommend", help="pick a configuration from a profile file")
    p.add_argument("--profile", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--max-latency", type=float)
    group.add_argument("--min-accuracy", type=float)
    p.add_argument("--latency-semantics", choices=alloc.LATENCY_SEMANTICS, default="latency")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--format", choices=FORMATS, default="text")
    p.set_defaults(fn=cmd_recommend)

    p = sub.add_parser("analyze-quant", parents=[common],
                       help="INT8 code-usage histograms per quantization site")
    p.add_argument("--data", required=True)
    p.add_argument("--sites", default="*", help="fnmatch site filter, e.g. 'L*.attn.softmax'")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_analyze_quant)

    p = sub.add_parser("bench", parents=[common],
                       help="encoder-only latency across a batch x sequence grid")
    p.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    p.add_argument("--batch-sizes", default="1", help="comma-separated batch sizes")
    p.add_argument("--seq-lens", default="32", help="comma-separated sequence lengths")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
