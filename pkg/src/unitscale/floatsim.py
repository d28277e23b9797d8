"""Low-precision floating-point simulation.

Values are held in float64 and snapped onto the grid of a smaller format.
Rounding is round-to-nearest, ties-to-even. The FP8 variants are described by
range and precision only; NaN/Inf encodings are modelled just far enough to
reproduce each format's largest finite value.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import special

SATURATE = "saturate_to_max"
TO_INFINITY = "to_infinity"


@dataclass(frozen=True)
class FloatFormat:
    name: str
    exponent_bits: int
    mantissa_bits: int
    bias_offset: int
    max_exponent: int
    min_exponent: int
    overflow_policy: str = SATURATE
    supports_subnormals: bool = True
    # codes counted down from the largest magnitude that are not finite numbers;
    # up to one whole binade (2**M codes) may be reserved
    reserved_top_codes: int = 0

    def __post_init__(self):
        if self.exponent_bits < 2 or self.mantissa_bits < 0:
            raise ValueError(f"{self.name}: need E >= 2 and M >= 0")
        if self.max_exponent < self.min_exponent:
            raise ValueError(f"{self.name}: max_exponent < min_exponent")
        if self.overflow_policy not in (SATURATE, TO_INFINITY):
            raise ValueError(f"unknown overflow policy {self.overflow_policy!r}")
        if not 0 <= self.reserved_top_codes <= 2**self.mantissa_bits:
            raise ValueError(f"{self.name}: bad reserved_top_codes")
        if self.reserved_top_codes == 2**self.mantissa_bits and self.max_exponent == self.min_exponent:
            raise ValueError(f"{self.name}: reserving the only binade leaves no normals")

    @property
    def bias(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1 + self.bias_offset

    @property
    def bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    def with_overflow(self, policy: str) -> "FloatFormat":
        return replace(self, overflow_policy=policy)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bias"] = self.bias
        d["max_normal"] = max_normal(self)
        d["min_normal"] = min_normal(self)
        d["min_subnormal"] = min_subnormal(self) if self.supports_subnormals else None
        return d


FP32 = FloatFormat("FP32", 8, 23, 0, 127, -126)
TF32 = FloatFormat("TF32", 8, 10, 0, 127, -126)
BFLOAT16 = FloatFormat("BFLOAT16", 8, 7, 0, 127, -126)
FP16 = FloatFormat("FP16", 5, 10, 0, 15, -14)
FP8_E5_A = FloatFormat("FP8 E5 (a)", 5, 2, 1, 15, -15)
FP8_E5_B = FloatFormat("FP8 E5 (b)", 5, 2, 0, 15, -14)
FP8_E4_A = FloatFormat("FP8 E4 (a)", 4, 3, 1, 7, -7)
# the top binade (256..480) is reserved so that the E4 maximum is 240
FP8_E4_B = FloatFormat("FP8 E4 (b)", 4, 3, 0, 8, -6, reserved_top_codes=8)

_CATALOG = (FP32, TF32, BFLOAT16, FP16, FP8_E5_A, FP8_E5_B, FP8_E4_A, FP8_E4_B)

_ALIASES = {
    "fp32": FP32,
    "tf32": TF32,
    "bf16": BFLOAT16,
    "bfloat16": BFLOAT16,
    "fp16": FP16,
    "e5a": FP8_E5_A,
    "fp8-e5a": FP8_E5_A,
    "e5b": FP8_E5_B,
    "fp8-e5b": FP8_E5_B,
    "e4a": FP8_E4_A,
    "fp8-e4a": FP8_E4_A,
    "e4b": FP8_E4_B,
    "fp8-e4b": FP8_E4_B,
}


def format_catalog() -> list[FloatFormat]:
    """The eight formats commonly used for deep learning, widest first."""
    return list(_CATALOG)


def get_format(name: str | FloatFormat) -> FloatFormat:
    """Look up a catalog format by display name ("FP8 E4 (a)") or short alias ("e4a")."""
    if isinstance(name, FloatFormat):
        return name
    for fmt in _CATALOG:
        if fmt.name == name:
            return fmt
    key = name.lower().replace("_", "-").replace(" ", "")
    if key in _ALIASES:
        return _ALIASES[key]
    valid = [f.name for f in _CATALOG] + sorted(_ALIASES)
    raise KeyError(f"unknown format {name!r}; valid names: {', '.join(valid)}")


def max_normal(fmt: FloatFormat) -> float:
    n = 2**fmt.mantissa_bits
    if fmt.reserved_top_codes == n:
        return math.ldexp(2.0 - 1.0 / n, fmt.max_exponent - 1)
    return math.ldexp(1.0 + (n - 1 - fmt.reserved_top_codes) / n, fmt.max_exponent)


def min_normal(fmt: FloatFormat) -> float:
    return math.ldexp(1.0, fmt.min_exponent)


def min_subnormal(fmt: FloatFormat) -> float:
    if not fmt.supports_subnormals:
        raise ValueError(f"{fmt.name} has no subnormals")
    return math.ldexp(1.0, fmt.min_exponent - fmt.mantissa_bits)


def quantize(x, fmt: FloatFormat, overflow: str | None = None):
    """Round ``x`` to the nearest value representable in ``fmt``.

    Works elementwise on scalars or arrays; returns the same kind it was given.
    Overflow follows ``overflow`` if given, otherwise the format's own policy.
    """
    policy = overflow or fmt.overflow_policy
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=np.float64)
    native = _NATIVE.get(_shape_key(fmt))
    if native is not None:
        out = _quantize_native(x, native, fmt, policy)
    else:
        out = quantize_grid(x, fmt, policy)
    return float(out) if scalar else out


def quantize_grid(x: np.ndarray, fmt: FloatFormat, policy: str | None = None) -> np.ndarray:
    """Array-only rounding onto the format grid built from its fields (no native casts)."""
    policy = policy or fmt.overflow_policy
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    M = fmt.mantissa_bits

    with np.errstate(invalid="ignore", over="ignore"):
        _, e = np.frexp(a)
        # frexp puts a in [0.5, 1) * 2**e, so the binade exponent is e - 1
        exp = np.maximum(e - 1, fmt.min_exponent)
        ulp = np.ldexp(1.0, exp - M)
        q = np.round(a / ulp) * ulp

        if not fmt.supports_subnormals:
            tiny = min_normal(fmt)
            q = np.where(a < tiny, np.where(a > tiny / 2, tiny, 0.0), q)

        top = max_normal(fmt)
        over = q > top
        if policy == SATURATE:
            q = np.where(over, top, q)
        else:
            q = np.where(over, np.inf, q)
        q = np.where(np.isnan(a), np.nan, q)
        return np.copysign(q, x)


def _shape_key(fmt: FloatFormat) -> tuple:
    return (fmt.mantissa_bits, fmt.max_exponent, fmt.min_exponent, fmt.supports_subnormals, fmt.reserved_top_codes)


# formats numpy can cast to directly; its float64 casts round to nearest even
# with subnormals and overflow to inf, exactly the generic path below
_NATIVE = {_shape_key(FP16): np.float16, _shape_key(FP32): np.float32}


def _quantize_native(x, dtype, fmt, policy):
    # numpy's cast is slow for subnormal results; that range is a uniform grid
    step = min_subnormal(fmt)
    tiny = np.abs(x) < min_normal(fmt)
    with np.errstate(over="ignore"):
        out = np.where(tiny, 0.0, x).astype(dtype).astype(np.float64)
    if tiny.any():
        out = np.where(tiny, np.round(x / step) * step, out)
    if policy == SATURATE:
        clipped = np.isinf(out) & np.isfinite(x)
        out = np.where(clipped, np.copysign(max_normal(fmt), x), out)
    return out


def representable_values(fmt: FloatFormat) -> np.ndarray:
    """All non-negative finite values of ``fmt`` in ascending order (small formats only)."""
    if fmt.exponent_bits + fmt.mantissa_bits > 16:
        raise ValueError(f"{fmt.name} is too wide to enumerate")
    M = fmt.mantissa_bits
    frac = np.arange(2**M) / 2**M
    vals = [np.zeros(1)]
    if fmt.supports_subnormals:
        vals.append(frac[1:] * 2.0**fmt.min_exponent)
    for k in range(fmt.min_exponent, fmt.max_exponent + 1):
        row = (1.0 + frac) * 2.0**k
        if k == fmt.max_exponent and fmt.reserved_top_codes:
            row = row[: -fmt.reserved_top_codes]
        vals.append(row)
    return np.concatenate(vals)


def decode(code: int, fmt: FloatFormat) -> float:
    """Decode a bit pattern (sign | exponent | mantissa) into its value.

    Codes that do not denote a finite number in ``fmt`` decode to NaN (the
    inf/NaN distinction is not modelled).
    """
    M, E = fmt.mantissa_bits, fmt.exponent_bits
    if not 0 <= code < 2**fmt.bits:
        raise ValueError(f"code {code} out of range for {fmt.name}")
    sign = -1.0 if code >> (E + M) else 1.0
    efield = (code >> M) & (2**E - 1)
    mfield = code & (2**M - 1)
    if efield == 0:
        if mfield == 0:
            # formats with a shifted bias spend negative zero on NaN
            return math.nan if sign < 0 and fmt.bias_offset else sign * 0.0
        if not fmt.supports_subnormals:
            return math.nan
        return sign * math.ldexp(mfield / 2**M, fmt.min_exponent)
    exp = efield - fmt.bias
    if exp > fmt.max_exponent:
        return math.nan
    if exp == fmt.max_exponent and mfield >= 2**M - fmt.reserved_top_codes:
        return math.nan
    return sign * math.ldexp(1.0 + mfield / 2**M, exp)


@dataclass(frozen=True)
class SnrPoint:
    sigma: float
    snr: float


def snr(sigma: float, fmt: FloatFormat, samples: int = 10**6, seed: int = 0) -> float:
    """Monte-Carlo SNR, E[X^2] / E[(q(X) - X)^2], for X ~ N(0, sigma^2).

    Out-of-range values saturate. Returns ``math.inf`` when no sample is perturbed.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if samples < 10**4:
        raise ValueError("need at least 10^4 samples")
    x = sigma * np.random.default_rng(seed).standard_normal(samples)
    return _snr(x, quantize(x, fmt, overflow=SATURATE))


def _snr(x: np.ndarray, q: np.ndarray) -> float:
    noise = np.mean((q - x) ** 2)
    if noise == 0:
        return math.inf
    return float(np.mean(x**2) / noise)


def snr_curve(
    fmt: FloatFormat, sigma_grid: Sequence[float], samples: int = 10**6, seed: int = 0
) -> list[SnrPoint]:
    if len(sigma_grid) == 0:
        raise ValueError("empty sigma grid")
    if any(b <= a for a, b in zip(sigma_grid, sigma_grid[1:])):
        raise ValueError("sigma grid must be strictly ascending")
    return [SnrPoint(float(s), snr(s, fmt, samples, seed)) for s in sigma_grid]


def log2_grid(lo: float, hi: float, points: int) -> list[float]:
    """``points`` sigmas spaced evenly in log2 between 2**lo and 2**hi."""
    if points == 1:
        return [2.0**lo]
    return [float(v) for v in np.exp2(np.linspace(lo, hi, points))]


def to_db(ratio: float) -> float:
    return 10 * math.log10(ratio)


def folded_normal_mass(lo: float, hi: float) -> float:
    """P(lo <= |X| <= hi) for a standard normal X."""
    if not 0 <= lo < hi:
        raise ValueError("need 0 <= lo < hi")
    return float(special.erf(hi / math.sqrt(2)) - special.erf(lo / math.sqrt(2)))


@dataclass(frozen=True)
class OutlierAnalysis:
    snr_int8_nonoutlier: float
    snr_fp8e4_nonoutlier: float
    snr_int8_median_scaled: float
    int8_bins_used: int
    fp8_bins_used: int
    int8_scale: float


def _bins_holding(mass: np.ndarray, fraction: float) -> int:
    """Fewest bins, most populated first, whose mass reaches ``fraction``."""
    cum = np.cumsum(np.sort(mass)[::-1])
    return int(np.searchsorted(cum, fraction * cum[-1]) + 1)


def int8_outlier_analysis(
    samples: int = 10**6,
    seed: int = 0,
    median_outlier: float = 60.0,
    max_over_median: float = 3.0,
    lower_mass: float = 0.95,
    fp8: FloatFormat = FP8_E4_A,
) -> OutlierAnalysis:
    """Compare INT8 and FP8 E4 on unit-normal non-outliers in an outlier-heavy tensor.

    Assumptions:
      * non-outliers are N(0, 1);
      * INT8 is scaled so the largest outlier (``max_over_median`` x median) maps
        to 127, and converts by truncation toward zero;
      * FP8 E4 is used unscaled (its 240 maximum already covers the outliers).

    Bin counts are exact: the fewest codes whose rounding intervals together
    hold ``lower_mass`` of the non-outlier probability, taking the most
    populated codes first.
    """
    scale = 127.0 / (max_over_median * median_outlier)
    x = np.random.default_rng(seed).standard_normal(samples)

    def int8(v, s):
        return np.clip(np.trunc(v * s), -127, 127) / s

    snr_int8 = _snr(x, int8(x, scale))
    snr_int8_median = _snr(x, int8(x, 127.0 / median_outlier))
    snr_fp8 = _snr(x, quantize(x, fp8, overflow=SATURATE))

    # truncation: code k > 0 holds x * scale in [k, k + 1), the top code everything above
    lo = np.arange(1, 128) / scale
    hi = np.append(lo[1:], np.inf)
    side = special.ndtr(hi) - special.ndtr(lo)
    int8_mass = np.concatenate([side[::-1], [special.ndtr(1 / scale) - special.ndtr(-1 / scale)], side])
    # nearest rounding: each FP8 code holds the interval between its neighbours' midpoints
    grid = representable_values(fp8)
    codes = np.concatenate([-grid[:0:-1], grid])
    edges = np.concatenate([[-np.inf], (codes[1:] + codes[:-1]) / 2, [np.inf]])
    int8_bins = _bins_holding(int8_mass, lower_mass)
    fp8_bins = _bins_holding(np.diff(special.ndtr(edges)), lower_mass)

    return OutlierAnalysis(
        snr_int8_nonoutlier=snr_int8,
        snr_fp8e4_nonoutlier=snr_fp8,
        snr_int8_median_scaled=snr_int8_median,
        int8_bins_used=int8_bins,
        fp8_bins_used=fp8_bins,
        int8_scale=scale,
    )


def clipped_fraction(x: np.ndarray, fmt: FloatFormat) -> tuple[float, float]:
    """Fractions of nonzero |x| below the smallest subnormal and above max_normal."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    a = a[a > 0]
    if a.size == 0:
        return 0.0, 0.0
    lo = min_subnormal(fmt) if fmt.supports_subnormals else min_normal(fmt)
    return float(np.mean(a < lo / 2)), float(np.mean(a > max_normal(fmt)))


def format_names(formats: Iterable[FloatFormat] | None = None) -> list[str]:
    return [f.name for f in (formats or _CATALOG)]
