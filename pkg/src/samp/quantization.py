"""Symmetric INT8 quantization: scales, min-max calibration, code usage.

Signed symmetric quantization only (no zero points).  Rounding is
half-away-from-zero.  Scales are always derived from amax and never stored,
so a calibration table serializes as a plain amax map.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError
from .trace import emit_quant

log = logging.getLogger(__name__)

F32 = np.float32
I8 = np.int8

# amax below this floors the scale at 1e-8 instead of dividing by ~zero.
AMAX_FLOOR = 127 * 1e-8


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero."""
    return np.trunc(x + np.copysign(x.dtype.type(0.5), x))


def quantize(x: np.ndarray, scale: float, site: str = "") -> np.ndarray:
    """q = clamp(round_half_away(x / scale), -128, 127) as int8."""
    if not scale > 0:
        raise CalibrationError(f"non-positive scale {scale!r} at site {site!r}")
    emit_quant("quantize", site)
    q = round_half_away(np.asarray(x, dtype=F32) / F32(scale))
    return np.clip(q, -128, 127).astype(I8)


def dequantize(q: np.ndarray, scale: float, site: str = "") -> np.ndarray:
    """x = q * scale as float32."""
    if not scale > 0:
        raise CalibrationError(f"non-positive scale {scale!r} at site {site!r}")
    emit_quant("dequantize", site)
    return (q.astype(F32) * F32(scale)).astype(F32)


def requantize_i32(
    c: np.ndarray,
    scale_a: float,
    scale_b: float,
    scale_out: float,
    site: str = "",
) -> np.ndarray:
    """Rescale an INT32 GEMM accumulator directly to INT8 codes.

    Uses one fused multiplier c * (scale_a*scale_b/scale_out); stays within
    one code of the two-step dequantize-then-quantize path.
    """
    for name, s in (("scale_a", scale_a), ("scale_b", scale_b), ("scale_out", scale_out)):
        if not s > 0:
            raise CalibrationError(f"non-positive {name} {s!r} at site {site!r}")
    emit_quant("requantize", site)
    mult = (float(scale_a) * float(scale_b)) / float(scale_out)
    q = round_half_away(c.astype(np.float64) * mult)
    return np.clip(q, -128, 127).astype(I8)


@dataclass
class QuantScale:
    """amax and derived scale for one named quantization site."""

    site: str
    amax: float = 0.0

    @property
    def scale(self) -> float:
        return float(max(self.amax, AMAX_FLOOR) / 127.0)

    @property
    def floored(self) -> bool:
        return self.amax < AMAX_FLOOR


@dataclass
class CalibrationTable:
    """Mutable map of quantization sites to observed amax values."""

    entries: dict[str, QuantScale] = field(default_factory=dict)
    model_fingerprint: str = ""

    def observe(self, site: str, x: np.ndarray) -> "CalibrationTable":
        """Min-max update: amax(site) = max(previous, max|x|)."""
        seen = float(np.max(np.abs(x))) if x.size else 0.0
        entry = self.entries.setdefault(site, QuantScale(site))
        entry.amax = max(entry.amax, seen)
        return self

    def set_amax(self, site: str, amax: float) -> "CalibrationTable":
        self.entries[site] = QuantScale(site, float(amax))
        return self

    def scale(self, site: str) -> float:
        return self.require(site).scale

    def amax(self, site: str) -> float:
        return self.require(site).amax

    def require(self, site: str) -> QuantScale:
        try:
            return self.entries[site]
        except KeyError:
            raise CalibrationError(f"calibration table is missing site {site!r}") from None

    def require_all(self, sites) -> None:
        missing = sorted(s for s in sites if s not in self.entries)
        if missing:
            raise CalibrationError(f"calibration table is missing sites: {', '.join(missing)}")

    def merge(self, other: "CalibrationTable") -> "CalibrationTable":
        """Elementwise-max merge of independently observed tables."""
        for site, entry in other.entries.items():
            mine = self.entries.setdefault(site, QuantScale(site))
            mine.amax = max(mine.amax, entry.amax)
        return self

    def warn_floored(self) -> list[str]:
        """Log and return the sites whose scale sits on the 1e-8 floor."""
        floored = sorted(s for s, e in self.entries.items() if e.floored)
        for site in floored:
            log.warning("site %s has amax %.3g; scale floored at 1e-8", site, self.entries[site].amax)
        return floored

    def to_json(self) -> str:
        doc = {
            "fingerprint": self.model_fingerprint,
            "sites": {name: {"amax": entry.amax} for name, entry in self.entries.items()},
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationTable":
        doc = json.loads(text)
        table = cls(model_fingerprint=doc.get("fingerprint", ""))
        for name, payload in doc.get("sites", {}).items():
            table.set_amax(name, payload["amax"])
        return table


def minmax_observe(table: CalibrationTable, site: str, x: np.ndarray) -> CalibrationTable:
    """Functional alias for CalibrationTable.observe."""
    return table.observe(site, x)


def round2_away(x: float) -> float:
    """Round a nonnegative percentage to 2 decimals, halves away from zero."""
    return float(np.floor(x * 100.0 + 0.5) / 100.0)


@dataclass
class CodeUsageReport:
    """Occupancy of the 256 INT8 codes at one site."""

    site: str
    histogram: list[int]  # index 0 is code -128, index 255 is code 127

    @property
    def used_count(self) -> int:
        return int(sum(1 for c in self.histogram if c > 0))

    @property
    def unused_count(self) -> int:
        return 256 - self.used_count

    @property
    def unused_percent(self) -> float:
        return round2_away(100.0 * self.unused_count / 256.0)

    def negative_code_count(self) -> int:
        return int(sum(self.histogram[:128]))

    def merged(self, other: "CodeUsageReport") -> "CodeUsageReport":
        return CodeUsageReport(
            self.site, [a + b for a, b in zip(self.histogram, other.histogram)]
        )


def code_usage(q: np.ndarray, site: str = "") -> CodeUsageReport:
    """Histogram the INT8 codes of q over the full -128..127 range."""
    counts = np.bincount(q.ravel().astype(np.int32) + 128, minlength=256)
    return CodeUsageReport(site, counts.astype(int).tolist())
