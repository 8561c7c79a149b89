"""16-bit fixed-point arithmetic with wide accumulation.

Scalars (`FxpValue`, `Accumulator`) carry their format explicitly.  Tensor
kernels elsewhere in the package work on raw integer numpy arrays and use the
array helpers at the bottom of this module (`round_shift`, `saturate`,
`requantize_array`) so that scalar and tensor paths share one rounding rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

TOTAL_BITS = 16
RAW_MIN = -(1 << (TOTAL_BITS - 1))
RAW_MAX = (1 << (TOTAL_BITS - 1)) - 1

# Width of the MAC accumulator.  See `check_accumulation_depth`.
ACC_BITS = 48
ACC_MIN = -(1 << (ACC_BITS - 1))
ACC_MAX = (1 << (ACC_BITS - 1)) - 1


class AccumulatorOverflow(ArithmeticError):
    """A MAC chain left the accumulator range; the planner should have prevented it."""


@dataclass(frozen=True)
class QFormat:
    frac_bits: int
    total_bits: int = TOTAL_BITS

    def __post_init__(self):
        if self.total_bits != TOTAL_BITS:
            raise ValueError(f"only {TOTAL_BITS}-bit formats are supported, got {self.total_bits}")
        if not 0 <= self.frac_bits <= 15:
            raise ValueError(f"frac_bits must be in [0, 15], got {self.frac_bits}")

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def lsb(self) -> float:
        return 1.0 / self.scale

    @property
    def min_real(self) -> float:
        return RAW_MIN / self.scale

    @property
    def max_real(self) -> float:
        return RAW_MAX / self.scale

    def __str__(self):
        return f"Q{self.total_bits - self.frac_bits}.{self.frac_bits}"

    @classmethod
    def parse(cls, text: str) -> "QFormat":
        """Parse ``"Q8.8"`` style names (integer bits include the sign bit)."""
        t = text.strip().upper()
        if not t.startswith("Q") or "." not in t:
            raise ValueError(f"bad Q-format {text!r}")
        ibits, fbits = t[1:].split(".", 1)
        fmt = cls(int(fbits))
        if int(ibits) + int(fbits) != TOTAL_BITS:
            raise ValueError(f"{text!r} is not a {TOTAL_BITS}-bit format")
        return fmt


Q8_8 = QFormat(8)
Q2_14 = QFormat(14)
Q1_15 = QFormat(15)


@dataclass(frozen=True)
class NearestEven:
    """Round half to even on the raw integer grid."""


@dataclass(frozen=True)
class StochasticSeeded:
    """Stochastic rounding driven by a counter-based hash of ``seed``.

    Draws are a pure function of (seed, key, element index), so results do not
    depend on evaluation order, tiling or worker count.
    """

    seed: int

    def uniform_bits(self, key: tuple, index: np.ndarray, nbits: int) -> np.ndarray:
        h = _mix(np.full(1, self.seed & _MASK64, dtype=np.uint64))
        for k in key:
            h = _mix(h ^ np.uint64(int(k) & _MASK64))
        u = _mix(h ^ (np.asarray(index, dtype=np.uint64) * np.uint64(0x9E3779B97F4A7C15)))
        return (u >> np.uint64(64 - nbits)).astype(np.int64)


RoundingMode = Union[NearestEven, StochasticSeeded]

_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


class SaturationCounter:
    """Counts narrowing events that clamped to the 16-bit range."""

    def __init__(self, count: int = 0):
        self._count = int(count)

    @property
    def count(self) -> int:
        return self._count

    def add(self, n: int):
        if n < 0:
            raise ValueError("saturation counts only grow")
        self._count += int(n)

    def __repr__(self):
        return f"SaturationCounter({self._count})"


@dataclass(frozen=True)
class FxpValue:
    raw: int
    fmt: QFormat = field(default=Q8_8)

    def __post_init__(self):
        if not RAW_MIN <= self.raw <= RAW_MAX:
            raise ValueError(f"raw value {self.raw} does not fit in 16 bits")

    @property
    def real(self) -> float:
        return self.raw / self.fmt.scale


@dataclass(frozen=True)
class Accumulator:
    raw: int = 0
    frac_bits: int = 0

    @property
    def real(self) -> float:
        return self.raw / (1 << self.frac_bits)


def fxp_mul(a: FxpValue, b: FxpValue) -> Accumulator:
    return Accumulator(a.raw * b.raw, a.fmt.frac_bits + b.fmt.frac_bits)


def fxp_mac(acc: Accumulator, a: FxpValue, b: FxpValue) -> Accumulator:
    frac = a.fmt.frac_bits + b.fmt.frac_bits
    if acc.frac_bits != frac:
        if acc.raw != 0:
            raise ValueError(f"accumulator frac_bits {acc.frac_bits} != operand sum {frac}")
    total = acc.raw + a.raw * b.raw
    if not ACC_MIN <= total <= ACC_MAX:
        raise AccumulatorOverflow(f"MAC result {total} exceeds {ACC_BITS}-bit accumulator")
    return Accumulator(total, frac)


def round_shift(raw, shift: int, mode: RoundingMode = NearestEven(), key: tuple = (), index=None):
    """Divide integer array `raw` by 2**shift with rounding; shift <= 0 is exact."""
    raw = np.asarray(raw, dtype=np.int64)
    if shift <= 0:
        return raw << np.int64(-shift)
    q = raw >> np.int64(shift)
    r = raw & np.int64((1 << shift) - 1)
    if isinstance(mode, StochasticSeeded):
        if index is None:
            index = np.arange(raw.size, dtype=np.int64).reshape(raw.shape)
        u = mode.uniform_bits(key, index, shift).reshape(raw.shape)
        return q + (u < r)
    half = np.int64(1 << (shift - 1))
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + up


def saturate(raw, counter: SaturationCounter | None = None) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.int64)
    if counter is not None:
        counter.add(int(np.count_nonzero((raw > RAW_MAX) | (raw < RAW_MIN))))
    return np.clip(raw, RAW_MIN, RAW_MAX)


def requantize_array(acc_raw, acc_frac: int, target: QFormat, mode: RoundingMode = NearestEven(),
                     counter: SaturationCounter | None = None, key: tuple = (), index=None) -> np.ndarray:
    """Round an accumulator array to `target` and saturate to 16 bits (int64 result)."""
    acc_raw = np.asarray(acc_raw, dtype=np.int64)
    rounded = round_shift(acc_raw, acc_frac - target.frac_bits, mode, key, index)
    return saturate(rounded, counter)


def requantize(acc: Accumulator, target: QFormat, mode: RoundingMode = NearestEven(),
               counter: SaturationCounter | None = None) -> FxpValue:
    raw = requantize_array(np.array([acc.raw]), acc.frac_bits, target, mode, counter)
    return FxpValue(int(raw[0]), target)


def fxp_from_real(x: float, fmt: QFormat, mode: RoundingMode = NearestEven(),
                  counter: SaturationCounter | None = None) -> FxpValue:
    return FxpValue(int(quantize_real(np.array([x]), fmt, mode, counter)[0]), fmt)


def quantize_real(x, fmt: QFormat, mode: RoundingMode = NearestEven(),
                  counter: SaturationCounter | None = None, key: tuple = ()) -> np.ndarray:
    """Quantize a real array to raw 16-bit values of `fmt` (int64 array)."""
    x = np.asarray(x, dtype=np.float64)
    scaled = x * fmt.scale
    if isinstance(mode, StochasticSeeded):
        lo = np.floor(scaled)
        frac = scaled - lo
        idx = np.arange(x.size, dtype=np.int64).reshape(x.shape)
        u = mode.uniform_bits(key, idx, 53).reshape(x.shape) / float(1 << 53)
        q = lo + (u < frac)
    else:
        q = np.rint(scaled)  # numpy rint rounds half to even
    q = np.clip(q, RAW_MIN - 1, RAW_MAX + 1)
    return saturate(q.astype(np.int64), counter)


def to_real(raw, fmt: QFormat) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / fmt.scale


def exact_dot_check(acc: np.ndarray):
    """Raise if an integer-valued float64 accumulation left the exact/accumulator range."""
    if acc.size and float(np.max(np.abs(acc))) > ACC_MAX:
        raise AccumulatorOverflow(f"accumulation exceeds {ACC_BITS}-bit accumulator")


def check_accumulation_depth(taps: int) -> bool:
    """True when `taps` full-scale 16x16 products cannot overflow the accumulator."""
    return math.log2(max(taps, 1)) + 30 <= ACC_BITS - 1
