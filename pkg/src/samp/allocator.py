"""Mixed-precision recommendation: decay-aware allocation, threshold
selection, speedup/accuracy-loss ranking, and profile construction.

A profile is a sweep over quantized-layer counts; index 0 is always the
unquantized baseline.  The decay-aware allocator walks the sweep keeping a
record point and selects the last index whose accuracy decay rate
dr = dAccuracy/dLatency was negative or a new minimum.
"""

from __future__ import annotations

import contextlib
import json
import logging
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .encoder import FFN_ONLY, FULLY_QUANT, Engine, PrecisionPlan
from .errors import ConfigurationError, DataFormatError, InfeasibleError
from .tasks import classify, tag
from .trace import trace_ops

log = logging.getLogger(__name__)

LATENCY_SEMANTICS = ("latency", "speedup")


@dataclass(frozen=True)
class ProfilePoint:
    quantized_layers: int
    accuracy: float
    latency: float  # seconds per pass over the eval batch, lower is better
    speedup: float  # reference latency / this latency

    def __post_init__(self):
        if not self.latency > 0:
            raise ConfigurationError(f"latency must be positive, got {self.latency}")
        if not self.speedup > 0:
            raise ConfigurationError(f"speedup must be positive, got {self.speedup}")


@dataclass
class Profile:
    mode: str
    points: list[ProfilePoint]
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (FULLY_QUANT, FFN_ONLY):
            raise ConfigurationError(f"profile mode must be {FULLY_QUANT} or {FFN_ONLY}")
        if not self.points:
            raise ConfigurationError("profile needs at least one point")
        ks = [p.quantized_layers for p in self.points]
        if ks != sorted(set(ks)):
            raise ConfigurationError("quantized_layers must be strictly increasing")

    @property
    def baseline(self) -> ProfilePoint:
        return self.points[0]

    def to_json(self) -> str:
        def point_doc(p: ProfilePoint) -> dict:
            return {
                "quantized_layers": p.quantized_layers,
                "accuracy": p.accuracy,
                "latency_s": p.latency,
                "speedup": p.speedup,
            }

        doc = {
            "mode": self.mode,
            "baseline": point_doc(self.baseline),
            "points": [point_doc(p) for p in self.points],
            "env": self.env,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Profile":
        try:
            doc = json.loads(text)
            points = [
                ProfilePoint(
                    quantized_layers=int(p["quantized_layers"]),
                    accuracy=float(p["accuracy"]),
                    latency=float(p["latency_s"]),
                    speedup=float(p["speedup"]),
                )
                for p in doc["points"]
            ]
            return cls(mode=doc["mode"], points=points, env=doc.get("env", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"bad profile document: {exc}") from exc


def _axis(p: ProfilePoint, semantics: str) -> float:
    if semantics not in LATENCY_SEMANTICS:
        raise ConfigurationError(f"latency semantics must be one of {LATENCY_SEMANTICS}")
    return p.latency if semantics == "latency" else p.speedup


def allocate_decay_aware(profile: Profile, latency_semantics: str = "latency") -> int:
    """Accuracy-decay-aware allocation over the sweep; returns a point index.

    With speedup semantics every normal tradeoff has dr < 0, so the walk
    degenerates to the last index; latency semantics is the default.
    """
    if latency_semantics not in LATENCY_SEMANTICS:
        raise ConfigurationError(f"latency semantics must be one of {LATENCY_SEMANTICS}")
    points = profile.points
    dr_min = float("inf")
    record = points[0]
    answer = 0
    for i in range(1, len(points)):
        cost_i = _axis(points[i], latency_semantics)
        cost_rec = _axis(record, latency_semantics)
        if cost_i == cost_rec:
            log.warning(
                "profile points %d and the record share %s=%g; skipping",
                i, latency_semantics, cost_i,
            )
            continue
        dr = (points[i].accuracy - record.accuracy) / (cost_i - cost_rec)
        if dr < 0 or dr < dr_min:
            dr_min = dr
            record = points[i]
            answer = i
    return answer


def select_by_latency_threshold(profile: Profile, max_latency: float) -> int:
    """Highest accuracy among points with latency < max_latency."""
    feasible = [i for i, p in enumerate(profile.points) if p.latency < max_latency]
    if not feasible:
        floor = min(p.latency for p in profile.points)
        raise InfeasibleError(
            f"no point runs under {max_latency:g}s; minimum achievable latency is {floor:g}s"
        )
    best = feasible[0]
    for i in feasible[1:]:
        if profile.points[i].accuracy > profile.points[best].accuracy:
            best = i
    return best


def select_by_accuracy_threshold(profile: Profile, min_accuracy: float) -> int:
    """Lowest latency among points with accuracy > min_accuracy."""
    feasible = [i for i, p in enumerate(profile.points) if p.accuracy > min_accuracy]
    if not feasible:
        ceiling = max(p.accuracy for p in profile.points)
        raise InfeasibleError(
            f"no point reaches accuracy {min_accuracy:g}; maximum achievable is {ceiling:g}"
        )
    best = feasible[0]
    for i in feasible[1:]:
        if profile.points[i].latency < profile.points[best].latency:
            best = i
    return best


def rank_by_ratio(profile: Profile, top_n: int = 5) -> list[int]:
    """Rank non-baseline points by speedup gained per accuracy lost.

    Points whose accuracy did not drop are free speedup and rank first,
    ordered by speedup; the rest order by (speedup - baseline) / loss.
    """
    base = profile.baseline
    free: list[int] = []
    paid: list[tuple[float, int]] = []
    for i, p in enumerate(profile.points[1:], start=1):
        loss = base.accuracy - p.accuracy
        if loss <= 0:
            free.append(i)
        else:
            paid.append(((p.speedup - base.speedup) / loss, i))
    free.sort(key=lambda i: (-profile.points[i].speedup, i))
    paid.sort(key=lambda pair: (-pair[0], pair[1]))
    ranked = free + [i for _, i in paid]
    return ranked[:top_n]


def parse_eval_line(line: str, lineno: int) -> tuple[str, str | None, str]:
    """TSV row: text[TAB text][TAB label]."""
    parts = line.rstrip("\n").split("\t")
    if len(parts) == 2:
        return parts[0], None, parts[1]
    if len(parts) == 3:
        return parts[0], parts[1], parts[2]
    raise DataFormatError(
        f"line {lineno}: expected 2 or 3 tab-separated fields, got {len(parts)}"
    )


def load_eval_file(path) -> list[tuple[str, str | None, str]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError(f"evaluation file {path} is empty")
    return [parse_eval_line(ln, n) for n, ln in enumerate(lines, start=1)]


def _predict_matches(engine: Engine, plan, enc, gold: str) -> tuple[int, int]:
    """(correct, total) label comparisons for one example."""
    out = engine.run(enc, plan)
    if engine.manifest.task == "sequence_labeling":
        gold_ids = [int(tok) for tok in gold.split()]
        pred = tag(engine.archive, out, enc.attention_length).label_ids
        n = min(len(gold_ids), len(pred))
        return sum(1 for a, b in zip(gold_ids[:n], pred[:n]) if a == b), max(n, 1)
    pred = classify(engine.archive, out).label_ids[0]
    return int(pred == int(gold)), 1


def evaluate_accuracy(engine: Engine, plan: PrecisionPlan, examples, encoded=None) -> float:
    """Fraction of correct predictions (token-level for sequence labeling)."""
    encs = encoded or [engine.encode_text(a, b) for a, b, _ in examples]
    correct = total = 0
    for enc, (_, _, gold) in zip(encs, examples):
        c, t = _predict_matches(engine, plan, enc, gold)
        correct += c
        total += t
    return correct / total if total else 0.0


def measure_median_latency(fn, repeats: int, warmup: int, threads: int = 1) -> float:
    """Median wall time of fn(); BLAS pools pinned to one thread by default."""
    limits = threadpool_limits(limits=threads) if threads else contextlib.nullcontext()
    with limits:
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            times.append(time.perf_counter() - start)
    return statistics.median(times)


def environment_metadata(repeats: int, warmup: int, threads: int) -> dict:
    return {
        "machine": platform.machine(),
        "numpy": np.__version__,
        "python": platform.python_version(),
        "repeats": repeats,
        "system": platform.system(),
        "threads": threads,
        "warmup": warmup,
    }


def sweep_layer_counts(num_layers: int, step: int) -> list[int]:
    if step < 1:
        raise ConfigurationError(f"layer step must be >= 1, got {step}")
    ks = list(range(0, num_layers + 1, step))
    if ks[-1] != num_layers:
        ks.append(num_layers)
    return ks


def build_profile(
    engine: Engine,
    mode: str,
    examples,
    layer_step: int = 2,
    repeats: int = 30,
    warmup: int = 5,
    threads: int = 1,
) -> Profile:
    """Sweep prefix plans, measuring accuracy and median pass latency."""
    if mode not in (FULLY_QUANT, FFN_ONLY):
        raise ConfigurationError(f"profile mode must be {FULLY_QUANT} or {FFN_ONLY}")
    num_layers = engine.manifest.num_layers
    # tokenize once; timing covers the encoder+head passes only
    encoded = [engine.encode_text(a, b) for a, b, _ in examples]
    points: list[ProfilePoint] = []
    gemm_stats: dict[str, dict] = {}
    baseline_latency = None
    for k in sweep_layer_counts(num_layers, layer_step):
        plan = PrecisionPlan.prefix(mode, num_layers, k)
        engine.check_plan(plan)
        accuracy = evaluate_accuracy(engine, plan, examples, encoded)

        def one_pass():
            for enc in encoded:
                engine.run(enc, plan)

        latency = measure_median_latency(one_pass, repeats, warmup, threads)
        with trace_ops() as tr:
            engine.run(encoded[0], plan)
        gemm_stats[str(k)] = {
            "f32_gemms": tr.gemm_count("f32"),
            "f32_gemm_bytes": tr.gemm_bytes("f32"),
            "int8_gemms": tr.gemm_count("i8"),
            "int8_gemm_bytes": tr.gemm_bytes("i8"),
        }
        if baseline_latency is None:
            baseline_latency = latency
        points.append(ProfilePoint(k, accuracy, latency, baseline_latency / latency))
    env = environment_metadata(repeats, warmup, threads)
    env["gemm_stats"] = gemm_stats
    return Profile(mode=mode, points=points, env=env)
