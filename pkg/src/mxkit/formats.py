"""Microscaling element-format descriptors and scalar codecs.

An MX format pairs a low-precision element type with one power-of-two
scale per block of ``block_size`` elements.  This module defines the
element types (signed integers of 2..8 bits, and small IEEE-style floats
``fp_e{E}m{M}`` with 1 sign / E exponent / M mantissa bits), their
representable-value grids, and the bit-level codecs between canonical
codes and real values.

Conventions, pinned once here so everything downstream is deterministic:

* Integer elements use a symmetric range [-(2^(b-1)-1), 2^(b-1)-1]; the
  most-negative two's-complement pattern is non-canonical and never
  produced, which keeps quantization odd-symmetric.
* Float elements saturate: no Inf, and only 8-bit formats (man_bits >= 1)
  reserve the per-sign all-ones code as NaN, matching the OCP treatment
  of E4M3 (max finite 448) while FP6/FP5/FP4 grids use every code.
* Block scales are E8M0: one byte, bias 127, exponents in [-127, 127]
  (byte 255 is the E8M0 NaN and is never written).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache


class FormatError(ValueError):
    """Invalid format parameters, unknown format name, or bad element code."""


class ElementKind(Enum):
    INT = "int"
    FLOAT = "float"


class TieMode(Enum):
    """How round-to-nearest resolves exact halfway cases."""

    HALF_AWAY = "half-away"
    HALF_EVEN = "half-even"


SCALE_EXP_MIN = -127
SCALE_EXP_MAX = 127
SCALE_BIAS = 127

# Named sub-byte float aliases: total bits -> (exp_bits, man_bits).
_MXFP_ALIASES = {4: (2, 1), 5: (2, 2), 6: (3, 2), 7: (3, 3), 8: (4, 3)}

_FP_NAME_RE = re.compile(r"^fp_e(\d+)m(\d+)$")


@dataclass(frozen=True)
class ElementFormat:
    """Descriptor for one MX element type.

    ``kind=INT``: ``bits`` is the two's-complement width b (2..8) and the
    exponent/mantissa fields are 0.  ``kind=FLOAT``: ``bits`` equals
    ``1 + exp_bits + man_bits`` (<= 8) with ``exp_bits >= man_bits``.
    """

    kind: ElementKind
    bits: int
    exp_bits: int = 0
    man_bits: int = 0

    def __post_init__(self) -> None:
        if self.kind is ElementKind.INT:
            if not 2 <= self.bits <= 8:
                raise FormatError(f"int element bits must be in [2, 8], got {self.bits}")
            if self.exp_bits or self.man_bits:
                raise FormatError("int element format carries no exponent/mantissa fields")
        else:
            if self.exp_bits < 1:
                raise FormatError("float element format needs at least 1 exponent bit")
            if self.man_bits < 0:
                raise FormatError("man_bits must be >= 0")
            if self.exp_bits < self.man_bits:
                raise FormatError(
                    f"float element format requires exp_bits >= man_bits, "
                    f"got e{self.exp_bits}m{self.man_bits}"
                )
            if 1 + self.exp_bits + self.man_bits > 8:
                raise FormatError(
                    f"float element format exceeds 8 bits: e{self.exp_bits}m{self.man_bits}"
                )
            if self.bits != 1 + self.exp_bits + self.man_bits:
                raise FormatError("bits must equal 1 + exp_bits + man_bits")

    # -- constructors -------------------------------------------------

    @staticmethod
    def int_format(bits: int) -> "ElementFormat":
        return ElementFormat(ElementKind.INT, bits)

    @staticmethod
    def float_format(exp_bits: int, man_bits: int) -> "ElementFormat":
        return ElementFormat(ElementKind.FLOAT, 1 + exp_bits + man_bits, exp_bits, man_bits)

    # -- derived properties -------------------------------------------

    @property
    def is_int(self) -> bool:
        return self.kind is ElementKind.INT

    @property
    def bias(self) -> int:
        """Float exponent bias, 2^(exp_bits-1) - 1."""
        return (1 << (self.exp_bits - 1)) - 1

    @property
    def min_normal_exp(self) -> int:
        """Smallest normal binade exponent (also the subnormal binade)."""
        return 1 - self.bias

    @property
    def reserves_nan(self) -> bool:
        """8-bit float formats reserve the per-sign all-ones code as NaN."""
        return (not self.is_int) and self.bits == 8 and self.man_bits >= 1

    def __str__(self) -> str:
        return format_name(self)


def e_max(fmt: ElementFormat) -> int:
    """Exponent of the largest representable magnitude's binade.

    ``b - 2`` for b-bit signed integers (max magnitude 2^(b-1)-1 lies in
    [2^(b-2), 2^(b-1))), and ``2^(exp_bits-1)`` for floats.  For signed
    integers this makes e_max differences equal bit-width differences.
    """
    if fmt.is_int:
        return fmt.bits - 2
    return 1 << (fmt.exp_bits - 1)


def max_finite(fmt: ElementFormat) -> float:
    """Largest representable element magnitude."""
    if fmt.is_int:
        return float((1 << (fmt.bits - 1)) - 1)
    top_mant = (1 << fmt.man_bits) - 1
    if fmt.reserves_nan:
        top_mant -= 1  # all-ones mantissa in the top binade is NaN
    return ((1 << fmt.man_bits) + top_mant) * 2.0 ** (e_max(fmt) - fmt.man_bits)


def _check_code_width(code: int, fmt: ElementFormat) -> None:
    if not isinstance(code, int) or code < 0 or code >> fmt.bits:
        raise FormatError(f"code {code!r} does not fit in {fmt.bits} bits")


def decode_element(code: int, fmt: ElementFormat) -> float:
    """Decode a canonical b-bit code to its real value.

    Rejects codes wider than b bits, the most-negative integer pattern,
    and reserved float NaN codes.
    """
    _check_code_width(code, fmt)
    if fmt.is_int:
        half = 1 << (fmt.bits - 1)
        value = code - (1 << fmt.bits) if code >= half else code
        if value == -half:
            raise FormatError(
                f"code {code:#x} is the excluded most-negative {fmt.bits}-bit value"
            )
        return float(value)

    sign = code >> (fmt.bits - 1)
    field = (code >> fmt.man_bits) & ((1 << fmt.exp_bits) - 1)
    mant = code & ((1 << fmt.man_bits) - 1)
    if fmt.reserves_nan and field == (1 << fmt.exp_bits) - 1 and mant == (1 << fmt.man_bits) - 1:
        raise FormatError(f"code {code:#x} is the reserved NaN pattern of {fmt}")
    if field == 0:
        magnitude = mant * 2.0 ** (fmt.min_normal_exp - fmt.man_bits)
    else:
        magnitude = ((1 << fmt.man_bits) + mant) * 2.0 ** (field - fmt.bias - fmt.man_bits)
    return -magnitude if sign else magnitude


def encode_element(value: float, fmt: ElementFormat) -> int:
    """Encode an exact grid value to its canonical code (zero encodes as +0).

    Raises FormatError when ``value`` is not on the format's grid; use the
    quantizers in mxkit.quantize to round arbitrary reals first.
    """
    if fmt.is_int:
        intval = int(value)
        if intval != value or abs(intval) > max_finite(fmt):
            raise FormatError(f"{value!r} is not a representable {fmt} element")
        return intval & ((1 << fmt.bits) - 1)

    if value == 0.0:
        return 0
    sign = 1 if value < 0 else 0
    a = abs(value)
    if a > max_finite(fmt):
        raise FormatError(f"{value!r} exceeds max_finite({fmt}) = {max_finite(fmt)}")
    if a < 2.0 ** fmt.min_normal_exp:
        field = 0
        mant_real = a * 2.0 ** (fmt.man_bits - fmt.min_normal_exp)
    else:
        exp = _floor_log2(a)
        field = exp + fmt.bias
        mant_real = a * 2.0 ** (fmt.man_bits - exp) - (1 << fmt.man_bits)
    mant = int(mant_real)
    if mant != mant_real or mant >> fmt.man_bits:
        raise FormatError(f"{value!r} is not on the {fmt} grid")
    return (sign << (fmt.bits - 1)) | (field << fmt.man_bits) | mant


def _floor_log2(x: float) -> int:
    """Exact floor(log2(x)) for finite x > 0 via the binary exponent."""
    return math.frexp(x)[1] - 1


@lru_cache(maxsize=None)
def value_grid(fmt: ElementFormat) -> tuple[float, ...]:
    """All decodable values, ascending, with the +-0 pair collapsed."""
    values = set()
    for code in range(1 << fmt.bits):
        try:
            values.add(decode_element(code, fmt) + 0.0)  # +0.0 collapses -0.0
        except FormatError:
            continue
    return tuple(sorted(values))


@dataclass(frozen=True)
class MxFormatSpec:
    """A full MX format: element type, block size, scale type, tie rule.

    The scale type is always E8M0 (one biased-exponent byte per block);
    the tie rule travels with the spec so quantization is a deterministic
    function of (tensor, spec).
    """

    element: ElementFormat
    block_size: int = 32
    tie: TieMode = TieMode.HALF_AWAY

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise FormatError(f"block_size must be >= 1, got {self.block_size}")

    def with_element(self, element: ElementFormat) -> "MxFormatSpec":
        return MxFormatSpec(element, self.block_size, self.tie)

    def __str__(self) -> str:
        return f"{format_name(self.element)}[k={self.block_size},{self.tie.value}]"


def parse_format_name(name: str) -> ElementFormat:
    """Resolve a format name: mxint2..mxint8, mxfp4..mxfp8, or fp_e{E}m{M}."""
    lowered = name.strip().lower()
    if lowered.startswith("mxint"):
        try:
            bits = int(lowered[5:])
        except ValueError:
            raise FormatError(_unknown_format_msg(name)) from None
        if not 2 <= bits <= 8:
            raise FormatError(_unknown_format_msg(name))
        return ElementFormat.int_format(bits)
    if lowered.startswith("mxfp"):
        try:
            bits = int(lowered[4:])
        except ValueError:
            raise FormatError(_unknown_format_msg(name)) from None
        if bits not in _MXFP_ALIASES:
            raise FormatError(_unknown_format_msg(name))
        return ElementFormat.float_format(*_MXFP_ALIASES[bits])
    match = _FP_NAME_RE.match(lowered)
    if match:
        return ElementFormat.float_format(int(match.group(1)), int(match.group(2)))
    raise FormatError(_unknown_format_msg(name))


def format_name(fmt: ElementFormat) -> str:
    """Canonical name; named aliases win over the explicit fp_eXmY form."""
    if fmt.is_int:
        return f"mxint{fmt.bits}"
    if _MXFP_ALIASES.get(fmt.bits) == (fmt.exp_bits, fmt.man_bits):
        return f"mxfp{fmt.bits}"
    return f"fp_e{fmt.exp_bits}m{fmt.man_bits}"


def known_format_names() -> list[str]:
    """The named formats accepted by the CLI and container."""
    return [f"mxint{b}" for b in range(2, 9)] + [f"mxfp{b}" for b in sorted(_MXFP_ALIASES)]


def _unknown_format_msg(name: str) -> str:
    return (
        f"unknown format {name!r}; valid names: "
        + ", ".join(known_format_names())
        + ", or explicit fp_e{E}m{M}"
    )
