"""Bit-exact on-disk container for MX tensors, plus raw tensor I/O.

The ``.mxt`` layout (all multi-byte integers little-endian):

    magic "MXT1"            4 bytes
    version                 u16 (= 1)
    element kind            u8  (0 = Int, 1 = Float)
    element params          u8, u8  (Int: bits, 0; Float: exp_bits, man_bits)
    tie mode                u8  (0 = half-away, 1 = half-even)
    block_size              u32
    ndim                    u8
    dims                    u64 each
    scales                  one byte per block, shared_exp + 127, block order
    codes                   per block: elements packed LSB-first, b bits per
                            code, zero-padded to the next byte boundary

Per-block byte alignment costs at most 7 bits per block and buys O(1)
random block access; there is no compression, so the byte layout stays
auditable.  Raw real tensors use a minimal text/binary dual: a text file
starting with a "dims d1 d2 ..." line followed by whitespace-separated
decimals, or a binary stream "RAW1" + ndim u8 + dims u64 + float64 data.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .formats import (
    SCALE_BIAS,
    ElementFormat,
    ElementKind,
    FormatError,
    MxFormatSpec,
    TieMode,
)
from .quantize import MxTensor, codes_to_values

MXT_MAGIC = b"MXT1"
MXT_VERSION = 1
RAW_MAGIC = b"RAW1"

_KIND_TO_BYTE = {ElementKind.INT: 0, ElementKind.FLOAT: 1}
_TIE_TO_BYTE = {TieMode.HALF_AWAY: 0, TieMode.HALF_EVEN: 1}
_BYTE_TO_TIE = {v: k for k, v in _TIE_TO_BYTE.items()}


class ContainerError(ValueError):
    """Malformed or inconsistent container stream."""


def mxt_header_size(ndim: int) -> int:
    return 15 + 8 * ndim


def mxt_file_size(qt: MxTensor) -> int:
    """Closed-form byte size of the container for a given tensor."""
    b = qt.spec.element.bits
    code_bytes = int(np.sum((qt.block_lengths() * b + 7) // 8))
    return mxt_header_size(len(qt.shape)) + qt.n_blocks + code_bytes


def _pack_block(codes: np.ndarray, bits: int) -> bytes:
    """LSB-first bit packing of one block's codes, padded to whole bytes."""
    bit_matrix = (codes[:, None] >> np.arange(bits)) & 1
    return np.packbits(
        bit_matrix.astype(np.uint8).reshape(-1), bitorder="little"
    ).tobytes()


def _unpack_block(payload: bytes, count: int, bits: int) -> np.ndarray:
    bit_stream = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    bit_matrix = bit_stream[: count * bits].reshape(count, bits)
    weights = (1 << np.arange(bits)).astype(np.uint16)
    return (bit_matrix.astype(np.uint16) @ weights).astype(np.uint8)


def write_mxt(qt: MxTensor, sink: BinaryIO) -> int:
    """Serialize an MxTensor; returns the number of bytes written."""
    elem = qt.spec.element
    params = (elem.bits, 0) if elem.is_int else (elem.exp_bits, elem.man_bits)
    header = struct.pack(
        "<4sHBBBBIB",
        MXT_MAGIC,
        MXT_VERSION,
        _KIND_TO_BYTE[elem.kind],
        params[0],
        params[1],
        _TIE_TO_BYTE[qt.spec.tie],
        qt.spec.block_size,
        len(qt.shape),
    )
    header += struct.pack(f"<{len(qt.shape)}Q", *qt.shape)

    scales = (qt.scales.astype(np.int64) + SCALE_BIAS).astype(np.uint8).tobytes()

    chunks = []
    lengths = qt.block_lengths()
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    for i in range(qt.n_blocks):
        chunks.append(_pack_block(qt.codes[offsets[i] : offsets[i + 1]], elem.bits))
    payload = header + scales + b"".join(chunks)
    sink.write(payload)
    return len(payload)


def read_mxt(source: BinaryIO) -> MxTensor:
    """Inverse of write_mxt; validates structure and rejects trailing bytes."""
    data = source.read()
    if len(data) < 15:
        raise ContainerError(f"truncated header: expected >= 15 bytes, got {len(data)}")
    magic, version, kind_byte, p0, p1, tie_byte, block_size, ndim = struct.unpack_from(
        "<4sHBBBBIB", data, 0
    )
    if magic != MXT_MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != MXT_VERSION:
        raise ContainerError(f"unsupported version {version}")
    try:
        if kind_byte == 0:
            element = ElementFormat.int_format(p0)
            if p1 != 0:
                raise ContainerError(f"nonzero second param byte {p1} for int element")
        elif kind_byte == 1:
            element = ElementFormat.float_format(p0, p1)
        else:
            raise ContainerError(f"unknown element kind byte {kind_byte}")
    except FormatError as exc:
        raise ContainerError(f"invalid element format in header: {exc}") from None
    if tie_byte not in _BYTE_TO_TIE:
        raise ContainerError(f"unknown tie byte {tie_byte}")

    offset = 15
    if len(data) < offset + 8 * ndim:
        raise ContainerError(
            f"truncated dims: expected {8 * ndim} bytes, got {len(data) - offset}"
        )
    shape = struct.unpack_from(f"<{ndim}Q", data, offset)
    offset += 8 * ndim
    if ndim == 0 or any(d == 0 for d in shape):
        raise ContainerError(f"empty tensor shape {shape}")

    try:
        spec = MxFormatSpec(element, block_size, _BYTE_TO_TIE[tie_byte])
    except FormatError as exc:
        raise ContainerError(f"invalid header: {exc}") from None
    n_elements = int(np.prod(shape))
    last = shape[-1]
    blocks_per_row = -(-last // block_size)
    n_blocks = (n_elements // last) * blocks_per_row

    if len(data) < offset + n_blocks:
        raise ContainerError(
            f"truncated scales: expected {n_blocks} bytes, got {len(data) - offset}"
        )
    scale_bytes = np.frombuffer(data, dtype=np.uint8, count=n_blocks, offset=offset)
    if np.any(scale_bytes == 255):
        raise ContainerError("invalid scale byte 255 (E8M0 NaN)")
    scales = scale_bytes.astype(np.int32) - SCALE_BIAS
    offset += n_blocks

    rem = last % block_size
    lengths = np.full(blocks_per_row, block_size, dtype=np.int64)
    if rem:
        lengths[-1] = rem
    lengths = np.tile(lengths, n_elements // last)
    byte_counts = (lengths * element.bits + 7) // 8
    expected = int(np.sum(byte_counts))
    if len(data) - offset < expected:
        raise ContainerError(
            f"truncated codes: expected {expected} bytes, got {len(data) - offset}"
        )
    if len(data) - offset > expected:
        raise ContainerError(
            f"trailing garbage: {len(data) - offset - expected} extra bytes"
        )

    codes = np.empty(n_elements, dtype=np.uint8)
    pos = offset
    out = 0
    for count, nbytes in zip(lengths, byte_counts):
        codes[out : out + count] = _unpack_block(
            data[pos : pos + int(nbytes)], int(count), element.bits
        )
        pos += int(nbytes)
        out += int(count)

    qt = MxTensor(shape=shape, spec=spec, scales=scales, codes=codes)
    try:
        codes_to_values(qt.codes, element)  # reject non-canonical codes early
    except ValueError as exc:
        raise ContainerError(f"invalid element code: {exc}") from None
    return qt


def write_mxt_file(qt: MxTensor, path) -> int:
    with open(path, "wb") as sink:
        return write_mxt(qt, sink)


def read_mxt_file(path) -> MxTensor:
    with open(path, "rb") as source:
        return read_mxt(source)


def write_raw_tensor(values, sink: BinaryIO, binary: bool = True) -> int:
    """Write a dense real tensor in the raw dual format (binary or text)."""
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    if binary:
        payload = RAW_MAGIC + struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload += arr.astype("<f8").tobytes()
    else:
        lines = ["dims " + " ".join(str(d) for d in arr.shape)]
        lines.append(" ".join(repr(v) for v in arr.reshape(-1)))
        payload = ("\n".join(lines) + "\n").encode("ascii")
    sink.write(payload)
    return len(payload)


def read_raw_tensor(source: BinaryIO) -> np.ndarray:
    """Read a raw tensor, auto-detecting binary ("RAW1") vs. text ("dims ...")."""
    data = source.read()
    if data[:4] == RAW_MAGIC:
        return _read_raw_binary(data)
    return _read_raw_text(data)


def _read_raw_binary(data: bytes) -> np.ndarray:
    if len(data) < 5:
        raise ContainerError("truncated raw header")
    ndim = data[4]
    offset = 5
    if len(data) < offset + 8 * ndim:
        raise ContainerError("truncated raw dims")
    shape = struct.unpack_from(f"<{ndim}Q", data, offset)
    offset += 8 * ndim
    count = int(np.prod(shape)) if ndim else 0
    if ndim == 0 or count == 0:
        raise ContainerError("empty tensor")
    expected = count * 8
    if len(data) - offset != expected:
        raise ContainerError(
            f"raw payload size mismatch: expected {expected} bytes, got {len(data) - offset}"
        )
    values = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
    return values.reshape(shape).astype(np.float64)


def _read_raw_text(data: bytes) -> np.ndarray:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ContainerError(f"raw text is not valid UTF-8: {exc}") from None
    head, _, tail = text.partition("\n")
    fields = head.split()
    if not fields or fields[0] != "dims":
        raise ContainerError('raw text must start with a "dims d1 d2 ..." line')
    try:
        shape = tuple(int(f) for f in fields[1:])
    except ValueError:
        raise ContainerError(f"malformed dims line {head!r}") from None
    count = int(np.prod(shape)) if shape else 0
    if not shape or count == 0:
        raise ContainerError("empty tensor")
    try:
        values = np.array([float(tok) for tok in tail.split()], dtype=np.float64)
    except ValueError as exc:
        raise ContainerError(f"malformed value: {exc}") from None
    if len(values) != count:
        raise ContainerError(f"expected {count} values, got {len(values)}")
    return values.reshape(shape)


def read_raw_file(path) -> np.ndarray:
    with open(path, "rb") as source:
        return read_raw_tensor(source)


def write_raw_file(values, path, binary: bool | None = None) -> int:
    """Write a raw tensor file; text when the path ends in .txt, else binary."""
    if binary is None:
        binary = not str(path).endswith(".txt")
    with open(path, "wb") as sink:
        return write_raw_tensor(values, sink, binary=binary)


def load_tensor(path) -> np.ndarray:
    """Convenience loader used by the CLI; raw dual format only."""
    return read_raw_file(path)
