"""Direct block quantization of real tensors into MX format, and back.

A tensor is flattened row-major; blocks tile the last axis (the final
block of each row may be short when the last dimension is not a multiple
of the block size).  Each block gets one shared scale X = 2^shared_exp
with shared_exp = floor(log2 max|v|) - e_max(element), then elements are
rounded to the element grid of v/X and stored as canonical codes.

All arithmetic is double precision and every step is a pure function of
its inputs, so results are bit-identical regardless of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import (
    SCALE_EXP_MAX,
    SCALE_EXP_MIN,
    ElementFormat,
    MxFormatSpec,
    TieMode,
    e_max,
    max_finite,
)


class DataError(ValueError):
    """Non-finite or structurally invalid numeric input."""


@dataclass
class MxTensor:
    """A quantized tensor: shape, format spec, block scales, element codes.

    ``scales`` holds one shared exponent per block (int, in [-127, 127]),
    blocks in row-major order along the last axis.  ``codes`` holds one
    canonical b-bit code per element (uint8), in row-major element order.
    """

    shape: tuple[int, ...]
    spec: MxFormatSpec
    scales: np.ndarray
    codes: np.ndarray

    def __post_init__(self) -> None:
        self.shape = tuple(int(d) for d in self.shape)
        if not self.shape or any(d < 1 for d in self.shape):
            raise DataError(f"shape must be nonempty with positive dims, got {self.shape}")
        self.scales = np.asarray(self.scales, dtype=np.int32).reshape(-1)
        self.codes = np.asarray(self.codes, dtype=np.uint8).reshape(-1)
        if len(self.scales) != self.n_blocks:
            raise DataError(
                f"expected {self.n_blocks} block scales, got {len(self.scales)}"
            )
        if len(self.codes) != self.n_elements:
            raise DataError(
                f"expected {self.n_elements} element codes, got {len(self.codes)}"
            )

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape))

    @property
    def last_dim(self) -> int:
        return self.shape[-1]

    @property
    def n_rows(self) -> int:
        return self.n_elements // self.last_dim

    @property
    def blocks_per_row(self) -> int:
        return -(-self.last_dim // self.spec.block_size)

    @property
    def n_blocks(self) -> int:
        return self.n_rows * self.blocks_per_row

    def block_lengths(self) -> np.ndarray:
        """Element count of each block, row-major (final block may be short)."""
        k = self.spec.block_size
        per_row = np.full(self.blocks_per_row, k, dtype=np.int64)
        rem = self.last_dim % k
        if rem:
            per_row[-1] = rem
        return np.tile(per_row, self.n_rows)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MxTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.spec == other.spec
            and np.array_equal(self.scales, other.scales)
            and np.array_equal(self.codes, other.codes)
        )


def _floor_log2_array(a: np.ndarray) -> np.ndarray:
    """Exact floor(log2(a)) elementwise for a > 0 (frexp exponent - 1)."""
    return np.frexp(a)[1].astype(np.int32) - 1


def compute_shared_exp(block_values, element_format: ElementFormat) -> int:
    """Shared exponent of one block: floor(log2 max|v|) - e_max, clamped.

    An all-zero block maps to the scale floor -127 so it reconstructs to
    exact zeros.  Rejects NaN/Inf input.
    """
    arr = np.asarray(block_values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise DataError("block must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise DataError("non-finite value in block")
    peak = float(np.max(np.abs(arr)))
    if peak == 0.0:
        return SCALE_EXP_MIN
    exp = int(np.frexp(peak)[1]) - 1 - e_max(element_format)
    return max(SCALE_EXP_MIN, min(SCALE_EXP_MAX, exp))


def _round_ties(values: np.ndarray, tie: TieMode) -> np.ndarray:
    """Round-to-nearest with the given tie rule; inputs are exact doubles."""
    if tie is TieMode.HALF_EVEN:
        return np.rint(values)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def quantize_int_values(scaled: np.ndarray, bits: int, tie: TieMode) -> np.ndarray:
    """Round v/X to integers and clip to the symmetric range (vectorized)."""
    top = (1 << (bits - 1)) - 1
    return np.clip(_round_ties(scaled, tie), -top, top)


def quantize_fp_values(scaled: np.ndarray, fmt: ElementFormat, tie: TieMode) -> np.ndarray:
    """Snap v/X to the nearest float-element grid value (vectorized).

    Uses binade arithmetic: within the binade of |y| the grid is uniform
    with spacing 2^(e - man_bits), so nearest-grid reduces to one integer
    rounding of the exact quotient.  Tie-to-even on the quotient equals
    tie-to-even on the mantissa code (adjacent grid values alternate
    mantissa parity).  Saturates at +-max_finite.
    """
    a = np.abs(scaled)
    exps = np.zeros(a.shape, dtype=np.int32)
    nonzero = a > 0.0
    exps[nonzero] = _floor_log2_array(a[nonzero])
    exps = np.clip(exps, fmt.min_normal_exp, e_max(fmt))
    spacing = np.ldexp(1.0, exps - fmt.man_bits)
    quotient = _round_ties(a / spacing, tie)
    magnitude = np.minimum(quotient * spacing, max_finite(fmt))
    return np.copysign(magnitude, scaled)


def int_values_to_codes(values: np.ndarray, bits: int) -> np.ndarray:
    """Signed element values -> canonical two's-complement codes."""
    ints = values.astype(np.int64)
    return ((ints + (1 << bits)) & ((1 << bits) - 1)).astype(np.uint8)


def int_codes_to_values(codes: np.ndarray, bits: int) -> np.ndarray:
    """Canonical two's-complement codes -> signed element values (float64)."""
    ints = codes.astype(np.int64)
    half = 1 << (bits - 1)
    ints = np.where(ints >= half, ints - (1 << bits), ints)
    if np.any(ints == -half):
        raise DataError(f"non-canonical most-negative {bits}-bit code present")
    return ints.astype(np.float64)


def fp_values_to_codes(values: np.ndarray, fmt: ElementFormat) -> np.ndarray:
    """Exact grid values -> canonical codes (zero always encodes as +0)."""
    a = np.abs(values)
    sign = ((values < 0) & (a > 0)).astype(np.int64)
    exps = np.zeros(a.shape, dtype=np.int32)
    nonzero = a > 0.0
    exps[nonzero] = _floor_log2_array(a[nonzero])
    exps = np.clip(exps, fmt.min_normal_exp, e_max(fmt))
    subnormal = a < 2.0 ** fmt.min_normal_exp
    field = np.where(subnormal, 0, exps + fmt.bias).astype(np.int64)
    base = np.where(subnormal, 0, 1 << fmt.man_bits).astype(np.int64)
    scaled = a * np.ldexp(1.0, fmt.man_bits - exps)
    mant = np.rint(scaled).astype(np.int64) - base
    codes = (sign << (fmt.bits - 1)) | (field << fmt.man_bits) | mant
    return codes.astype(np.uint8)


def fp_codes_to_values(codes: np.ndarray, fmt: ElementFormat) -> np.ndarray:
    """Canonical codes -> real values (float64); rejects reserved NaN codes."""
    ints = codes.astype(np.int64)
    if np.any(ints >> fmt.bits):
        raise DataError(f"element code wider than {fmt.bits} bits present")
    sign = ints >> (fmt.bits - 1)
    field = (ints >> fmt.man_bits) & ((1 << fmt.exp_bits) - 1)
    mant = ints & ((1 << fmt.man_bits) - 1)
    if fmt.reserves_nan and np.any(
        (field == (1 << fmt.exp_bits) - 1) & (mant == (1 << fmt.man_bits) - 1)
    ):
        raise DataError(f"reserved NaN code present for {fmt}")
    subnormal = field == 0
    exps = np.where(subnormal, fmt.min_normal_exp, field - fmt.bias)
    base = np.where(subnormal, 0, 1 << fmt.man_bits)
    magnitude = (base + mant) * np.ldexp(1.0, (exps - fmt.man_bits).astype(np.int32))
    return np.where(sign == 1, -magnitude, magnitude)


def codes_to_values(codes: np.ndarray, fmt: ElementFormat) -> np.ndarray:
    if fmt.is_int:
        return int_codes_to_values(codes, fmt.bits)
    return fp_codes_to_values(codes, fmt)


def quantize_element_int(value: float, scale: float, bits: int, tie: TieMode) -> int:
    """Quantize one real to a signed b-bit element at block scale X."""
    result = quantize_int_values(np.asarray([value / scale], dtype=np.float64), bits, tie)
    return int(result[0])


def quantize_element_fp(
    value: float, scale: float, exp_bits: int, man_bits: int, tie: TieMode
) -> float:
    """Quantize one real to the nearest float-element grid value at scale X."""
    fmt = ElementFormat.float_format(exp_bits, man_bits)
    result = quantize_fp_values(np.asarray([value / scale], dtype=np.float64), fmt, tie)
    return float(result[0])


def _pad_rows_to_blocks(rows: np.ndarray, block_size: int) -> np.ndarray:
    """(n_rows, last) -> (n_rows, n_blocks, k), zero-padding the tail."""
    n_rows, last = rows.shape
    n_blocks = -(-last // block_size)
    padded = np.zeros((n_rows, n_blocks * block_size), dtype=rows.dtype)
    padded[:, :last] = rows
    return padded.reshape(n_rows, n_blocks, block_size)


def quantize_tensor(values, spec: MxFormatSpec) -> MxTensor:
    """Quantize a dense real tensor into MX block format.

    Deterministic in (values, spec); NaN/Inf raise a DataError naming the
    offending block index.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0 or arr.size == 0:
        raise DataError(f"tensor shape must be nonempty, got {arr.shape}")
    shape = arr.shape
    rows = arr.reshape(-1, shape[-1])
    bad = ~np.isfinite(rows)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        blocks_per_row = -(-shape[-1] // spec.block_size)
        block = int(row) * blocks_per_row + int(col) // spec.block_size
        raise DataError(f"non-finite value in block {block}")

    blocks = _pad_rows_to_blocks(rows, spec.block_size)  # zeros never raise the max
    peak = np.max(np.abs(blocks), axis=-1)
    shared = np.full(peak.shape, SCALE_EXP_MIN, dtype=np.int32)
    nonzero = peak > 0.0
    shared[nonzero] = np.clip(
        _floor_log2_array(peak[nonzero]) - e_max(spec.element),
        SCALE_EXP_MIN,
        SCALE_EXP_MAX,
    )
    scaled = blocks * np.ldexp(1.0, -shared)[..., None]

    if spec.element.is_int:
        elems = quantize_int_values(scaled, spec.element.bits, spec.tie)
        codes3 = int_values_to_codes(elems, spec.element.bits)
    else:
        elems = quantize_fp_values(scaled, spec.element, spec.tie)
        codes3 = fp_values_to_codes(elems, spec.element)

    codes = codes3.reshape(rows.shape[0], -1)[:, : shape[-1]].reshape(-1)
    return MxTensor(shape=shape, spec=spec, scales=shared.reshape(-1), codes=codes)


def dequantize_tensor(qt: MxTensor) -> np.ndarray:
    """Reconstruct 2^shared_exp * element for every code; exact in float64."""
    values = codes_to_values(qt.codes, qt.spec.element)
    rows = values.reshape(qt.n_rows, qt.last_dim)
    blocks = _pad_rows_to_blocks(rows, qt.spec.block_size)
    scales = qt.scales.reshape(qt.n_rows, qt.blocks_per_row)
    blocks = blocks * np.ldexp(1.0, scales)[..., None]
    out = blocks.reshape(qt.n_rows, -1)[:, : qt.last_dim]
    return out.reshape(qt.shape)
