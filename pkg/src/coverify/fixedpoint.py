"""Signed fixed-point emulation: truncating quantizer, saturation, wide MAC.

This is the numeric core the design and hardware stages run on.  A value is
stored as a signed integer ``raw`` scaled by ``2**-frac_bits``.  Quantization
truncates toward negative infinity (a floor, the cheap hardware rounding) and
out-of-range values saturate to the format's extremes rather than wrapping.

Multiply-accumulate chains keep the full product precision: the accumulator
holds products at the combined fraction scale ``frac_a + frac_b`` and is
modelled as a 128-bit signed register; a single rescale (arithmetic shift with
floor semantics, then saturation) converts the final accumulator back to an
output format.  All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# The accumulator is modelled as a 128-bit signed register.  Python integers
# are unbounded, so the bound is enforced explicitly to keep the hardware
# contract honest.
ACC_MIN = -(1 << 127)
ACC_MAX = (1 << 127) - 1

# Exact float64 round-trips (quantize(dequantize(q)) == q) hold up to this
# width; wider raws lose bits when widened to a double.
EXACT_TOTAL_BITS = 53


class AccumulatorOverflowError(OverflowError):
    """A MAC accumulation left the 128-bit accumulator range."""


@dataclass(frozen=True)
class FixedPointFormat:
    """A signed fixed-point type ``total_bits`` wide with ``frac_bits``
    fraction bits.

    Rounding is truncation toward negative infinity and overflow saturates;
    these are the only supported behaviors and they are named explicitly so a
    format is self-describing.
    """

    total_bits: int
    frac_bits: int
    rounding: str = "truncate"
    overflow: str = "saturate"

    def __post_init__(self):
        if not 2 <= self.total_bits <= 64:
            raise ValueError(f"total_bits must be in [2, 64], got {self.total_bits}")
        if not 0 <= self.frac_bits <= self.total_bits - 1:
            raise ValueError(
                f"frac_bits must be in [0, total_bits-1], got {self.frac_bits} "
                f"for total_bits {self.total_bits}"
            )
        if self.rounding != "truncate":
            raise ValueError(f"unsupported rounding mode {self.rounding!r}")
        if self.overflow != "saturate":
            raise ValueError(f"unsupported overflow mode {self.overflow!r}")

    @property
    def min_int(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def max_int(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def scale(self) -> int:
        """2**frac_bits, the integer units per 1.0."""
        return 1 << self.frac_bits

    @property
    def resolution(self) -> float:
        """The value of one raw step, 2**-frac_bits."""
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return self.min_int * self.resolution

    @property
    def max_value(self) -> float:
        return self.max_int * self.resolution

    def describe(self) -> str:
        return f"{self.total_bits}.{self.frac_bits}"


@dataclass(frozen=True)
class QuantizedValue:
    """A raw integer bound to its format."""

    raw: int
    fmt: FixedPointFormat

    def __post_init__(self):
        if not self.fmt.min_int <= self.raw <= self.fmt.max_int:
            raise ValueError(
                f"raw {self.raw} outside format {self.fmt.describe()} range "
                f"[{self.fmt.min_int}, {self.fmt.max_int}]"
            )

    @property
    def value(self) -> float:
        return dequantize(self)


def quantize(x: float, fmt: FixedPointFormat) -> QuantizedValue:
    """Quantize a real value: floor(x * 2**frac_bits), saturated to range.

    Multiplication by a power of two is exact in binary floating point, so the
    floor sees the true scaled value for any finite input.
    """
    if math.isnan(x):
        raise ValueError("cannot quantize NaN")
    scaled = x * fmt.scale
    if scaled >= fmt.max_int:
        raw = fmt.max_int
    elif scaled <= fmt.min_int:
        raw = fmt.min_int
    else:
        raw = math.floor(scaled)
    return QuantizedValue(raw, fmt)


def dequantize(q: QuantizedValue) -> float:
    """raw * 2**-frac_bits as a double (exact for total_bits <= 53)."""
    return q.raw * q.fmt.resolution


def quantize_real(x: float, fmt: FixedPointFormat) -> float:
    """The representable value nearest-below x: dequantize(quantize(x))."""
    return dequantize(quantize(x, fmt))


def quantize_array(values, fmt: FixedPointFormat) -> np.ndarray:
    """Vectorized quantize returning an int64 raw array.

    Bit-identical to elementwise :func:`quantize`.  Formats wider than 53 bits
    fall back to the scalar path so saturation bounds stay exact.
    """
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("cannot quantize non-finite values")
    if fmt.total_bits <= EXACT_TOTAL_BITS:
        scaled = arr * float(fmt.scale)
        raws = np.floor(scaled)
        np.clip(raws, float(fmt.min_int), float(fmt.max_int), out=raws)
        return raws.astype(np.int64)
    return np.array(
        [quantize(float(v), fmt).raw for v in arr.reshape(-1)], dtype=np.int64
    ).reshape(arr.shape)


def dequantize_array(raws, fmt: FixedPointFormat) -> np.ndarray:
    """Vectorized dequantize of an int64 raw array to float64."""
    return np.asarray(raws, dtype=np.int64).astype(np.float64) * fmt.resolution


def _mac_raw(acc: int, raw_a: int, raw_b: int) -> int:
    """Accumulate one raw product, enforcing the 128-bit register bound."""
    acc = acc + raw_a * raw_b
    if acc > ACC_MAX or acc < ACC_MIN:
        raise AccumulatorOverflowError("accumulator width exceeded")
    return acc


def fixed_mac(acc: int, a: QuantizedValue, b: QuantizedValue) -> int:
    """acc + raw(a) * raw(b); the result lives at fraction scale
    ``a.fmt.frac_bits + b.fmt.frac_bits``."""
    return _mac_raw(acc, a.raw, b.raw)


def rescale_accumulator(
    acc: int, acc_frac_bits: int, fmt: FixedPointFormat
) -> QuantizedValue:
    """Convert an accumulator at ``acc_frac_bits`` to ``fmt`` in one step:
    arithmetic shift (truncation toward negative infinity), then saturate."""
    shift = acc_frac_bits - fmt.frac_bits
    if shift >= 0:
        raw = acc >> shift
    else:
        raw = acc << (-shift)
    if raw > fmt.max_int:
        raw = fmt.max_int
    elif raw < fmt.min_int:
        raw = fmt.min_int
    return QuantizedValue(raw, fmt)


def check_mac_headroom(
    fan_in: int, weight_fmt: FixedPointFormat, act_fmt: FixedPointFormat
) -> None:
    """Reject layer shapes whose worst-case accumulation cannot fit the
    128-bit accumulator.  The bound is a priori: fan_in products of maximal
    magnitude plus a maximally shifted bias."""
    worst = fan_in * (1 << (weight_fmt.total_bits - 1)) * (1 << (act_fmt.total_bits - 1))
    worst += 1 << (weight_fmt.total_bits - 1 + act_fmt.frac_bits)
    if worst > ACC_MAX:
        raise AccumulatorOverflowError("accumulator width exceeded")


def int64_mac_safe(
    fan_in: int, weight_fmt: FixedPointFormat, act_fmt: FixedPointFormat
) -> bool:
    """True when the worst-case accumulation provably fits an int64, allowing
    the vectorized integer path; otherwise exact Python integers are used."""
    if weight_fmt.total_bits > EXACT_TOTAL_BITS or act_fmt.total_bits > EXACT_TOTAL_BITS:
        return False
    worst = fan_in * (1 << (weight_fmt.total_bits - 1)) * (1 << (act_fmt.total_bits - 1))
    worst += 1 << (weight_fmt.total_bits - 1 + act_fmt.frac_bits)
    return worst < (1 << 62)
