"""Fixed-width weighted histograms with under/overflow and sum of squared weights."""

import base64
import math
from dataclasses import dataclass

import numpy as np

from ..errors import BadRequest


@dataclass(frozen=True)
class HistogramSpec:
    variable: str
    n_bins: int
    lo: float
    hi: float

    def __post_init__(self):
        if type(self.n_bins) is not int or self.n_bins < 1:
            raise BadRequest(f"n_bins must be a positive integer, got {self.n_bins!r}")
        try:
            lo, hi = float(self.lo), float(self.hi)
        except (TypeError, ValueError):
            raise BadRequest("histogram range must be numeric") from None
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
            raise BadRequest(f"histogram range needs finite lo < hi, got [{self.lo}, {self.hi})")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if not math.isfinite(self.bin_width):
            raise BadRequest("histogram bin width overflows")

    @property
    def bin_width(self):
        return (self.hi - self.lo) / self.n_bins

    def edges(self):
        return [self.lo + i * self.bin_width for i in range(self.n_bins + 1)]

    def to_doc(self):
        return {"variable": self.variable, "n_bins": self.n_bins, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_doc(cls, doc):
        if not isinstance(doc, dict):
            raise BadRequest("histogram spec must be an object")
        try:
            return cls(doc["variable"], doc["n_bins"], doc["lo"], doc["hi"])
        except KeyError as exc:
            raise BadRequest(f"histogram spec missing {exc.args[0]!r}") from None


def slot_indices(spec, values):
    """Slot per value: 0..n_bins-1 for bins, n_bins underflow, n_bins+1 overflow (NaN included)."""
    values = np.asarray(values, dtype=np.float64)
    n = spec.n_bins
    with np.errstate(invalid="ignore"):
        raw = np.floor((values - spec.lo) / spec.bin_width)
        inside = (values >= spec.lo) & (values < spec.hi)
        slots = np.full(values.shape, n + 1, dtype=np.int64)
        slots[values < spec.lo] = n
        slots[inside] = np.minimum(raw[inside], n - 1).astype(np.int64)
    return slots


class Histogram:
    def __init__(self, spec, sumw=None, sumw2=None, n_filled=0):
        self.spec = spec
        size = spec.n_bins + 2
        self.sumw = np.zeros(size) if sumw is None else np.asarray(sumw, dtype=np.float64).copy()
        self.sumw2 = np.zeros(size) if sumw2 is None else np.asarray(sumw2, dtype=np.float64).copy()
        if self.sumw.shape != (size,) or self.sumw2.shape != (size,):
            raise BadRequest(f"histogram arrays must have {size} slots")
        self.n_filled = int(n_filled)

    @property
    def counts(self):
        return self.sumw[: self.spec.n_bins]

    @property
    def underflow(self):
        return float(self.sumw[self.spec.n_bins])

    @property
    def overflow(self):
        return float(self.sumw[self.spec.n_bins + 1])

    def fill(self, values, weights=None):
        values = np.asarray(values, dtype=np.float64)
        weights = np.ones(len(values)) if weights is None else np.asarray(weights, dtype=np.float64)
        if values.shape != weights.shape:
            raise BadRequest(f"{len(values)} values but {len(weights)} weights")
        if len(values):
            slots = slot_indices(self.spec, values)
            size = self.spec.n_bins + 2
            # bincount accumulates in input order, so partial sums match a sequential loop.
            fresh_w = np.bincount(slots, weights=weights, minlength=size)
            fresh_w2 = np.bincount(slots, weights=weights * weights, minlength=size)
            self.sumw = self.sumw + fresh_w
            self.sumw2 = self.sumw2 + fresh_w2
        self.n_filled += len(values)
        return self

    def merge(self, other):
        if self.spec != other.spec:
            raise BadRequest(f"cannot merge histograms with specs {self.spec} and {other.spec}")
        return Histogram(self.spec, self.sumw + other.sumw, self.sumw2 + other.sumw2,
                         self.n_filled + other.n_filled)

    __add__ = merge

    def identical(self, other):
        """Bit-for-bit equality, NaN payloads included."""
        return (
            self.spec == other.spec and self.n_filled == other.n_filled
            and self.sumw.tobytes() == other.sumw.tobytes()
            and self.sumw2.tobytes() == other.sumw2.tobytes()
        )

    def to_bytes(self):
        return self.sumw.astype("<f8").tobytes() + self.sumw2.astype("<f8").tobytes()

    def to_doc(self):
        return {
            "spec": self.spec.to_doc(),
            "sumw": base64.b64encode(self.sumw.astype("<f8").tobytes()).decode("ascii"),
            "sumw2": base64.b64encode(self.sumw2.astype("<f8").tobytes()).decode("ascii"),
            "n_filled": self.n_filled,
        }

    @classmethod
    def from_doc(cls, doc):
        if not isinstance(doc, dict):
            raise BadRequest("histogram must be an object")
        try:
            spec = HistogramSpec.from_doc(doc["spec"])
            sumw = np.frombuffer(base64.b64decode(doc["sumw"], validate=True), dtype="<f8")
            sumw2 = np.frombuffer(base64.b64decode(doc["sumw2"], validate=True), dtype="<f8")
            return cls(spec, sumw, sumw2, doc["n_filled"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BadRequest(f"malformed histogram: {exc}") from None

    def summary(self):
        return {
            **self.spec.to_doc(),
            "counts": self.counts.tolist(),
            "sumw2": self.sumw2[: self.spec.n_bins].tolist(),
            "underflow": self.underflow,
            "overflow": self.overflow,
            "n_filled": self.n_filled,
        }

    def __repr__(self):
        return f"Histogram({self.spec.variable!r}, counts={self.counts.tolist()}, n_filled={self.n_filled})"


def fill_histogram(spec, values, weights):
    if len(values) != len(weights):
        raise BadRequest(f"{len(values)} values but {len(weights)} weights")
    return Histogram(spec).fill(values, weights)


def merge_histograms(a, b):
    return a.merge(b)


def fold(histograms):
    """Merge in the given order; the facility always passes ascending partition order."""
    it = iter(histograms)
    try:
        acc = next(it)
    except StopIteration:
        raise BadRequest("nothing to merge") from None
    acc = Histogram(acc.spec, acc.sumw, acc.sumw2, acc.n_filled)
    for h in it:
        acc = acc.merge(h)
    return acc
