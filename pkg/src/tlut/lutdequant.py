"""Fused two-level LUT dequantization for the prefill path.

Level one turns a plane-i nibble (bit i of four weights) into its bit-parallel
position with a 16-entry repacking table; OR-ing the b lookups rebuilds four
codes. Level two maps each code through a per-group conversion table whose
float16 entries already include scale and zero-point.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .bitlayout import GROUP, LayoutError, OpCounters, PackedModel, tile_nibble_order
from .quantkit import Granularity, QuantGroup

__all__ = [
    "ConvLUT", "OpCounters", "OutPrecision", "RepackLUT", "build_conv_lut",
    "build_conv_luts", "build_repack_lut", "dequant_op_counts", "dequantize_model_fused",
    "dequantize_tile_fused", "repack_nibbles", "repack_tile",
]


class OutPrecision(str, Enum):
    FP16 = "fp16"
    INT8 = "int8"


@dataclass(frozen=True)
class RepackLUT:
    shift: int
    field_bits: int
    entries: np.ndarray

    def __getitem__(self, idx):
        return self.entries[idx]


@dataclass(frozen=True)
class ConvLUT:
    group: QuantGroup
    bits: int
    entries: np.ndarray

    def __getitem__(self, code):
        return self.entries[code]


def build_repack_lut(shift: int, field_bits: int = 4) -> RepackLUT:
    """entry[idx] places bit j of idx at bit ``field_bits*j + shift``."""
    if not 0 <= shift < field_bits:
        raise ValueError(f"shift {shift} out of range for {field_bits}-bit fields")
    idx = np.arange(1 << GROUP, dtype=np.uint32)
    entries = np.zeros_like(idx)
    for j in range(GROUP):
        entries |= ((idx >> j) & 1) << (field_bits * j + shift)
    return RepackLUT(shift, field_bits, entries.astype(np.uint16))


def repack_nibbles(nibbles: np.ndarray, bits: int,
                   counters: OpCounters | None = None) -> np.ndarray:
    """``nibbles[i, n]``: plane i of 4-group n. Returns one word per group."""
    if bits > 4:
        raise ValueError("repacking tables cover up to 4-bit codes")
    luts = [build_repack_lut(i).entries for i in range(bits)]
    words = luts[0][nibbles[0]].astype(np.uint16)
    for i in range(1, bits):
        words |= luts[i][nibbles[i]]
    if counters is not None:
        n = nibbles.shape[1]
        counters.lut_lookups += bits * n
        counters.combine_ops += (bits - 1) * n
    return words


def _tile_plane_nibbles(model: PackedModel, t: int) -> np.ndarray:
    """Tile t's nibbles regrouped as (plane, m, q)."""
    bits = model.scheme.bits
    Mt, Kt = model.tiling.m_tile, model.tiling.k_tile
    order = tile_nibble_order(model)
    stream = model.nibbles(t)
    if stream.size != order.size:
        raise LayoutError(f"tile {t} is misaligned: {stream.size} nibbles, expected {order.size}")
    nib = np.empty(order.size, dtype=np.uint8)
    nib[order] = stream
    return nib.reshape(bits, Mt, Kt // GROUP)


def repack_tile(model: PackedModel, t: int, counters: OpCounters | None = None) -> np.ndarray:
    """Bit-parallel words for tile t, shape (m_tile, k_tile/4)."""
    nib = _tile_plane_nibbles(model, t)
    bits, Mt, Q = nib.shape
    return repack_nibbles(nib.reshape(bits, -1), bits, counters).reshape(Mt, Q)


def _words_to_codes(words: np.ndarray) -> np.ndarray:
    Mt, Q = words.shape
    c = np.empty((Mt, Q, GROUP), dtype=np.uint8)
    for j in range(GROUP):
        c[:, :, j] = (words >> (4 * j)) & 0xF
    return c.reshape(Mt, Q * GROUP)


def build_conv_lut(group: QuantGroup, bits: int, counters: OpCounters | None = None) -> ConvLUT:
    codes = np.arange(1 << bits, dtype=np.float64)
    entries = ((codes - group.zero_point) * group.scale).astype(np.float16).astype(np.float64)
    if counters is not None:
        counters.fp_ops += 1 << bits
    return ConvLUT(group, bits, entries)


def build_conv_luts(scales: np.ndarray, zero_points: np.ndarray, bits: int,
                    counters: OpCounters | None = None) -> np.ndarray:
    """Vectorized :func:`build_conv_lut` over a group table; adds a trailing 2**bits axis."""
    codes = np.arange(1 << bits, dtype=np.float64)
    entries = (codes - zero_points[..., None].astype(np.float64)) * scales[..., None]
    if counters is not None:
        counters.fp_ops += scales.size << bits
    return entries.astype(np.float16).astype(np.float64)


def dequantize_tile_fused(model: PackedModel, t: int, out_precision: OutPrecision | str = "fp16",
                          counters: OpCounters | None = None) -> np.ndarray:
    """Dequantize tile t through the repacking and conversion tables.

    FP16 output is float64 holding float16-rounded values. INT8 output (per-tensor
    schemes only) is ``code - zero_point``; the scale is left for the epilogue.
    """
    out_precision = OutPrecision(out_precision)
    scheme = model.scheme
    words = repack_tile(model, t, counters)
    codes = _words_to_codes(words)
    Mt, Kt = codes.shape
    scales, zps = model.tile_groups(t)

    if out_precision is OutPrecision.INT8:
        if scheme.granularity is not Granularity.PER_TENSOR:
            raise ValueError("INT8 dequantization is only defined for per-tensor schemes")
        table = np.arange(1 << scheme.bits, dtype=np.int16) - int(zps.reshape(-1)[0])
        if counters is not None:
            counters.lut_lookups += codes.size
        return table[codes].astype(np.int8)

    rows = scales.shape[0]
    if rows not in (1, Mt):
        raise ValueError(f"group table rows {rows} do not match tile rows {Mt}")
    # one table per quantization group, shared by every weight in it
    luts = build_conv_luts(scales, zps, scheme.bits, counters)  # (rows, G, 2**b)
    n_g = luts.shape[1]
    if Kt % n_g:
        raise ValueError(f"{n_g} groups do not align with k_tile={Kt}")
    g_idx = np.repeat(np.arange(n_g), Kt // n_g)[None, :]
    m_idx = (np.arange(Mt) if rows == Mt else np.zeros(Mt, dtype=np.int64))[:, None]
    if counters is not None:
        counters.lut_lookups += codes.size
    return luts[m_idx, g_idx, codes]


def dequantize_model_fused(model: PackedModel, out_precision="fp16") -> np.ndarray:
    """Full padded matrix via the fused path, sliced to the logical shape."""
    Mt, Kt = model.tiling.m_tile, model.tiling.k_tile
    dtype = np.int8 if OutPrecision(out_precision) is OutPrecision.INT8 else np.float64
    out = np.zeros((model.M_pad, model.K_pad), dtype=dtype)
    for t, tile in enumerate(model.tiles):
        out[tile.m0:tile.m0 + Mt, tile.k0:tile.k0 + Kt] = dequantize_tile_fused(model, t, out_precision)
    return out[:model.q_M, :model.q_K]


def dequant_op_counts(n_elems: int, bits: int, group_elems: int, strategy: str) -> OpCounters:
    """Analytic op counts for dequantizing ``n_elems`` weights.

    ``lut`` mirrors what :func:`dequantize_tile_fused` records; ``convert`` is
    the naive path: bit-by-bit repack, then one float conversion per element
    (convert, zero-point subtract and scale multiply fused into a single
    charged op; ``HardwareModel.fp_op_cost`` carries its weight).
    """
    n_groups4 = n_elems // GROUP
    c = OpCounters()
    if strategy == "lut":
        c.lut_lookups = bits * n_groups4 + n_elems
        c.combine_ops = (bits - 1) * n_groups4
        c.fp_ops = (n_elems // group_elems) << bits
    elif strategy == "convert":
        c.bit_ops = 3 * GROUP * bits * n_groups4
        c.combine_ops = (GROUP * bits - 1) * n_groups4
        c.fp_ops = n_elems
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return c
