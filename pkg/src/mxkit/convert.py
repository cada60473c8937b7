"""Down-conversion of an MX anchor tensor to a lower-precision sibling.

The high-precision tensor ("anchor", typically 8-bit) is converted
without ever touching full-precision source data: integer elements are
right-shifted and rounded by delta_e = e_max(source) - e_max(target)
bits, float elements are divided by 2^delta_e and requantized, and every
block scale is multiplied by 2^delta_e so the represented range is
preserved.  Because both the anchor scale and a direct-quantization
scale are functions of the same floor(log2 max|v|), the converted scale
equals the direct one whenever no E8M0 clamping occurred.

Up-conversion and Int<->Float conversion are rejected; these functions
accept only MxTensor inputs, which is what enforces that conversion
never reads full-precision data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .formats import (
    SCALE_EXP_MAX,
    ElementFormat,
    FormatError,
    MxFormatSpec,
    TieMode,
    e_max,
)
from .quantize import (
    MxTensor,
    codes_to_values,
    dequantize_tensor,
    fp_values_to_codes,
    int_codes_to_values,
    int_values_to_codes,
    quantize_fp_values,
    quantize_tensor,
)


class ScaleSaturationWarning(UserWarning):
    """Converted block scale clamped at the E8M0 ceiling (+127)."""


@dataclass(frozen=True)
class ConversionPlan:
    """A validated source->target element conversion and its exponent gap."""

    source: ElementFormat
    target: ElementFormat
    tie: TieMode
    delta_e: int

    @staticmethod
    def create(
        source: ElementFormat, target: ElementFormat, tie: TieMode = TieMode.HALF_AWAY
    ) -> "ConversionPlan":
        if source.kind is not target.kind:
            raise FormatError(
                f"cross-kind conversion {source} -> {target} is not supported"
            )
        if source.is_int:
            if target.bits > source.bits:
                raise FormatError(
                    f"up-conversion not supported: {source} -> {target}"
                )
        else:
            if target.exp_bits > source.exp_bits or (
                target.exp_bits == source.exp_bits and target.man_bits > source.man_bits
            ):
                raise FormatError(
                    f"up-conversion not supported: {source} -> {target}"
                )
        return ConversionPlan(source, target, tie, e_max(source) - e_max(target))


def shift_round_int(element: int, delta_e: int, target_bits: int, tie: TieMode) -> int:
    """clip(Round(element / 2^delta_e)) computed purely on integers.

    Works on the magnitude: drop delta_e low bits, round on the most
    significant dropped bit (half-even additionally consults the
    remaining dropped bits and the kept LSB), reapply the sign, clip to
    the symmetric target range.  Bit-exact vs. real-arithmetic rounding.
    """
    if delta_e < 0:
        raise FormatError(f"delta_e must be >= 0, got {delta_e}")
    magnitude = -element if element < 0 else element
    if delta_e:
        kept = magnitude >> delta_e
        dropped = magnitude & ((1 << delta_e) - 1)
        half = 1 << (delta_e - 1)
        if tie is TieMode.HALF_AWAY:
            kept += dropped >= half
        else:
            if dropped > half or (dropped == half and (kept & 1)):
                kept += 1
        magnitude = kept
    top = (1 << (target_bits - 1)) - 1
    if magnitude > top:
        magnitude = top
    return -magnitude if element < 0 else magnitude


def _shift_round_int_array(
    elements: np.ndarray, delta_e: int, target_bits: int, tie: TieMode
) -> np.ndarray:
    """Vectorized shift_round_int on an int64 array of signed elements."""
    magnitude = np.abs(elements)
    if delta_e:
        kept = magnitude >> delta_e
        dropped = magnitude & ((1 << delta_e) - 1)
        half = 1 << (delta_e - 1)
        if tie is TieMode.HALF_AWAY:
            kept += dropped >= half
        else:
            kept += (dropped > half) | ((dropped == half) & ((kept & 1) == 1))
        magnitude = kept
    top = (1 << (target_bits - 1)) - 1
    magnitude = np.minimum(magnitude, top)
    return np.where(elements < 0, -magnitude, magnitude)


def _bump_scales(scales: np.ndarray, delta_e: int) -> np.ndarray:
    bumped = scales.astype(np.int64) + delta_e
    saturated = bumped > SCALE_EXP_MAX
    count = int(np.count_nonzero(saturated))
    if count:
        warnings.warn(
            f"{count} block scale(s) clamped at E8M0 ceiling during conversion",
            ScaleSaturationWarning,
            stacklevel=3,
        )
    return np.minimum(bumped, SCALE_EXP_MAX).astype(np.int32)


def downconvert_int(
    anchor: MxTensor, target_bits: int, tie: TieMode | None = None
) -> MxTensor:
    """Convert an integer-element MX tensor to a narrower integer format."""
    if not anchor.spec.element.is_int:
        raise FormatError(f"integer conversion requires an integer anchor, got {anchor.spec.element}")
    tie = anchor.spec.tie if tie is None else tie
    target = ElementFormat.int_format(target_bits)
    plan = ConversionPlan.create(anchor.spec.element, target, tie)
    elements = int_codes_to_values(anchor.codes, anchor.spec.element.bits).astype(np.int64)
    converted = _shift_round_int_array(elements, plan.delta_e, target_bits, tie)
    return MxTensor(
        shape=anchor.shape,
        spec=MxFormatSpec(target, anchor.spec.block_size, tie),
        scales=_bump_scales(anchor.scales, plan.delta_e),
        codes=int_values_to_codes(converted.astype(np.float64), target_bits),
    )


def downconvert_fp(
    anchor: MxTensor, target: ElementFormat, tie: TieMode | None = None
) -> MxTensor:
    """Convert a float-element MX tensor to a narrower float format.

    Float elements cannot be bit-shifted; each anchor element is decoded,
    divided by 2^delta_e, and requantized on the target grid (through a
    double-precision intermediate).
    """
    if anchor.spec.element.is_int:
        raise FormatError(f"float conversion requires a float anchor, got {anchor.spec.element}")
    tie = anchor.spec.tie if tie is None else tie
    plan = ConversionPlan.create(anchor.spec.element, target, tie)
    values = codes_to_values(anchor.codes, anchor.spec.element)
    rescaled = values * 2.0 ** (-plan.delta_e)
    converted = quantize_fp_values(rescaled, target, tie)
    return MxTensor(
        shape=anchor.shape,
        spec=MxFormatSpec(target, anchor.spec.block_size, tie),
        scales=_bump_scales(anchor.scales, plan.delta_e),
        codes=fp_values_to_codes(converted, target),
    )


def downconvert(
    anchor: MxTensor, target: ElementFormat, tie: TieMode | None = None
) -> MxTensor:
    """Kind-dispatching down-conversion; rejects Int<->Float."""
    if anchor.spec.element.kind is not target.kind:
        raise FormatError(
            f"cross-kind conversion {anchor.spec.element} -> {target} is not supported"
        )
    if target.is_int:
        return downconvert_int(anchor, target.bits, tie)
    return downconvert_fp(anchor, target, tie)


@dataclass
class DirectVsSsReport:
    """Per-block comparison of direct quantization vs. anchored conversion."""

    source_spec: MxFormatSpec
    target_spec: MxFormatSpec
    scale_equal: np.ndarray  # bool per block
    code_disagreements: np.ndarray  # int per block
    mse_direct: float
    mse_ss: float
    n_elements: int

    @property
    def n_blocks(self) -> int:
        return len(self.scale_equal)

    @property
    def scale_equality_rate(self) -> float:
        return float(np.mean(self.scale_equal))

    @property
    def total_code_disagreements(self) -> int:
        return int(np.sum(self.code_disagreements))

    @property
    def code_disagreement_rate(self) -> float:
        return self.total_code_disagreements / self.n_elements


def direct_vs_ss_report(
    source_values, spec_high: MxFormatSpec, spec_low: MxFormatSpec
) -> DirectVsSsReport:
    """Quantize directly at the low spec and via a high-spec anchor; compare.

    Reports per-block scale equality, per-block element-code disagreement
    counts, and whole-tensor reconstruction MSE for both paths.
    """
    if spec_high.block_size != spec_low.block_size:
        raise FormatError("direct-vs-ss comparison requires equal block sizes")
    arr = np.asarray(source_values, dtype=np.float64)
    anchor = quantize_tensor(arr, spec_high)
    via_anchor = downconvert(anchor, spec_low.element, spec_low.tie)
    direct = quantize_tensor(arr, spec_low)

    diffs = (via_anchor.codes != direct.codes).astype(np.int64)
    per_block = np.zeros(direct.n_blocks, dtype=np.int64)
    np.add.at(per_block, _block_index_of_elements(direct), diffs)

    return DirectVsSsReport(
        source_spec=spec_high,
        target_spec=spec_low,
        scale_equal=via_anchor.scales == direct.scales,
        code_disagreements=per_block,
        mse_direct=float(np.mean((dequantize_tensor(direct) - arr) ** 2)),
        mse_ss=float(np.mean((dequantize_tensor(via_anchor) - arr) ** 2)),
        n_elements=direct.n_elements,
    )


def _block_index_of_elements(qt: MxTensor) -> np.ndarray:
    """Row-major block index of every element of an MxTensor."""
    k = qt.spec.block_size
    col_block = np.arange(qt.last_dim) // k
    rows = np.arange(qt.n_rows)[:, None] * qt.blocks_per_row
    return (rows + col_block[None, :]).reshape(-1)
