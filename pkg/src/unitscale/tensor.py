"""Reference-precision tensor helpers.

Tensors are plain float64 numpy arrays. This module adds seeded initialisation,
scale statistics and the per-octave exponent histograms used to check where
values sit relative to a format's range.

RNG: numpy's PCG64 bit generator (``np.random.default_rng(seed)``) with its
ziggurat ``standard_normal`` sampler.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

Tensor = np.ndarray

SUBNORMAL_LO = -24  # FP16 smallest subnormal 2^-24
SUBNORMAL_HI = -14  # FP16 smallest normal 2^-14
OCTAVE_HI = 16  # octave bins [2^k, 2^(k+1)) for k in [-14, 15]


def randn(shape: Sequence[int] | int, sigma: float = 1.0, seed: int | np.random.Generator = 0) -> Tensor:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sigma * rng.standard_normal(shape)


@dataclass(frozen=True)
class ScaleStats:
    mean: float
    std: float
    n: int


def stats(t) -> ScaleStats:
    """Population mean and standard deviation of all elements."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise ValueError("stats of an empty tensor")
    return ScaleStats(float(t.mean()), float(t.std()), int(t.size))


def pooled_stats(parts: Sequence[ScaleStats]) -> ScaleStats:
    """Combine stats of disjoint pieces as if computed over their concatenation."""
    n = sum(p.n for p in parts)
    mean = sum(p.mean * p.n for p in parts) / n
    second = sum((p.std**2 + p.mean**2) * p.n for p in parts) / n
    return ScaleStats(mean, math.sqrt(max(second - mean**2, 0.0)), n)


@dataclass
class ExponentHistogram:
    """Counts of |x| per power-of-two bin, FP16-style.

    ``octaves[k]`` counts [2^k, 2^(k+1)) for k = -14..15. Values in
    [2^-24, 2^-14) share one subnormal bin; nonzero values below 2^-24 are
    ``underflow``, finite values >= 2^16 are ``overflow``. Zeros and
    non-finite values are counted on their own.
    """

    octaves: dict[int, int] = field(default_factory=dict)
    subnormal: int = 0
    underflow: int = 0
    overflow: int = 0
    zero: int = 0
    nonfinite: int = 0

    @property
    def total(self) -> int:
        return (
            sum(self.octaves.values())
            + self.subnormal
            + self.underflow
            + self.overflow
            + self.zero
            + self.nonfinite
        )

    def fraction_in(self, lo_exp: int, hi_exp: int) -> float:
        """Fraction of nonzero finite elements in octaves lo_exp..hi_exp inclusive."""
        nonzero = self.total - self.zero - self.nonfinite
        if nonzero == 0:
            return 0.0
        return sum(c for k, c in self.octaves.items() if lo_exp <= k <= hi_exp) / nonzero

    def rows(self) -> list[tuple[float, float, int]]:
        rows = [(0.0, 0.0, self.zero), (0.0, 2.0**SUBNORMAL_LO, self.underflow)]
        rows.append((2.0**SUBNORMAL_LO, 2.0**SUBNORMAL_HI, self.subnormal))
        for k in range(SUBNORMAL_HI, OCTAVE_HI):
            rows.append((2.0**k, 2.0 ** (k + 1), self.octaves.get(k, 0)))
        rows.append((2.0**OCTAVE_HI, math.inf, self.overflow))
        rows.append((math.inf, math.inf, self.nonfinite))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in self.rows():
            w.writerow([repr(lo), repr(hi), c])
        return buf.getvalue()

    def __add__(self, other: "ExponentHistogram") -> "ExponentHistogram":
        octs = dict(self.octaves)
        for k, c in other.octaves.items():
            octs[k] = octs.get(k, 0) + c
        return ExponentHistogram(
            octs,
            self.subnormal + other.subnormal,
            self.underflow + other.underflow,
            self.overflow + other.overflow,
            self.zero + other.zero,
            self.nonfinite + other.nonfinite,
        )


def exponent_histogram(t) -> ExponentHistogram:
    a = np.abs(np.asarray(t, dtype=np.float64)).ravel()
    finite = np.isfinite(a)
    h = ExponentHistogram(nonfinite=int(np.count_nonzero(~finite)))
    a = a[finite]
    h.zero = int(np.count_nonzero(a == 0))
    a = a[a > 0]
    _, e = np.frexp(a)
    k = e - 1
    h.underflow = int(np.count_nonzero(k < SUBNORMAL_LO))
    h.subnormal = int(np.count_nonzero((k >= SUBNORMAL_LO) & (k < SUBNORMAL_HI)))
    h.overflow = int(np.count_nonzero(k >= OCTAVE_HI))
    mid = k[(k >= SUBNORMAL_HI) & (k < OCTAVE_HI)]
    ks, counts = np.unique(mid, return_counts=True)
    h.octaves = {int(a): int(b) for a, b in zip(ks, counts)}
    return h


def _check_matmul(a: Tensor, w: Tensor) -> None:
    if a.ndim != 2 or w.ndim != 2 or a.shape[1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {w.shape}")


def matmul(a: Tensor, w: Tensor) -> Tensor:
    _check_matmul(a, w)
    return a @ w


def add(*xs: Tensor) -> Tensor:
    shape = np.shape(xs[0])
    for x in xs[1:]:
        if np.shape(x) != shape:
            raise ValueError(f"add shape mismatch: {shape} vs {np.shape(x)}")
    return sum(xs[1:], start=np.asarray(xs[0], dtype=np.float64))


def scale(x: Tensor, c: float) -> Tensor:
    return c * x


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def gelu(x: Tensor) -> Tensor:
    return x * special.ndtr(x)


def tanh(x: Tensor) -> Tensor:
    return np.tanh(x)


def sigmoid(x: Tensor) -> Tensor:
    return special.expit(x)


def softmax(x: Tensor) -> Tensor:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: Tensor) -> Tensor:
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def total(x: Tensor) -> float:
    return float(np.sum(x))
