"""Bit-serial packing and the single tile-permuted weight buffer.

Layout of one thread-level tile (format constant ``PLANE_INTERLEAVE``):

    for kd in K_d_iter:              # thread-level, outer
      for md in M_d_iter:
        for plane in bits:           # plane-major inside a LUT sub-tile
          for q in K_d_lut*k_per_lut/4:
            for m in M_d_lookups:    # one 4-bit nibble per (plane, q, m)

A nibble holds bit ``plane`` of the four weights ``k = 4q..4q+3`` of row ``m``
(weight ``j`` in nibble bit ``j``). Two nibbles per byte, low nibble first.
The same nibble is the activation-table index on the decoding path and the
repacking-table index on the prefill path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantkit import Granularity, QuantizedMatrix
from .tiler import TilingConfig, padded_dims

PLANE_INTERLEAVE = "kd,md,plane,q,m;nibble-lo-first"
GROUP = 4


class LayoutError(ValueError):
    pass


@dataclass
class OpCounters:
    bit_ops: int = 0
    combine_ops: int = 0
    lut_lookups: int = 0
    fp_ops: int = 0

    def __iadd__(self, other: "OpCounters"):
        self.bit_ops += other.bit_ops
        self.combine_ops += other.combine_ops
        self.lut_lookups += other.lut_lookups
        self.fp_ops += other.fp_ops
        return self

    def cost(self, fp_op_cost: float = 1.0) -> float:
        """Vector-op cost with float ops weighted by ``fp_op_cost``."""
        return self.bit_ops + self.combine_ops + self.lut_lookups + fp_op_cost * self.fp_ops


@dataclass(frozen=True, eq=False)
class BitSerialPlanes:
    """``planes[i]`` packs bit i of every code, row-major, 8 codes per byte."""

    M: int
    K: int
    bits: int
    planes: np.ndarray

    def bit(self, i: int, m: int, k: int) -> int:
        pos = m * self.K + k
        return int(self.planes[i, pos >> 3] >> (pos & 7)) & 1

    def reconstruct(self) -> np.ndarray:
        n = self.M * self.K
        codes = np.zeros(n, dtype=np.int64)
        for i in range(self.bits):
            b = np.unpackbits(self.planes[i], bitorder="little")[:n]
            codes |= b.astype(np.int64) << i
        return codes.reshape(self.M, self.K)


def pack_bit_serial(q: QuantizedMatrix) -> BitSerialPlanes:
    flat = q.codes.reshape(-1).astype(np.uint8)
    planes = np.stack([np.packbits((flat >> i) & 1, bitorder="little")
                       for i in range(q.scheme.bits)])
    return BitSerialPlanes(q.M, q.K, q.scheme.bits, planes)


def repack_bit_parallel_naive(planes: BitSerialPlanes, m: int, q: int,
                              counters: OpCounters | None = None) -> int:
    """Gather four b-bit codes from the bit planes one bit at a time.

    Returns the bit-parallel word with weight j in bits [4j, 4j+4). Every
    moved bit costs SHIFT + AND + SHIFT.
    """
    if not (0 <= m < planes.M and 0 <= 4 * q and 4 * q + GROUP <= planes.K):
        raise LayoutError(f"group ({m}, {q}) outside {planes.M}x{planes.K}")
    word = 0
    for i in range(planes.bits):
        for j in range(GROUP):
            pos = m * planes.K + 4 * q + j
            byte = int(planes.planes[i, pos >> 3])
            word |= ((byte >> (pos & 7)) & 1) << (4 * j + i)
    if counters is not None:
        counters.bit_ops += 3 * GROUP * planes.bits
        counters.combine_ops += GROUP * planes.bits - 1
    return word


def repack_naive_nibbles(nibbles: np.ndarray, bits: int,
                         counters: OpCounters | None = None) -> np.ndarray:
    """Vectorized naive repack. ``nibbles[i, n]`` is plane i of 4-group n."""
    nib = nibbles.astype(np.uint32)
    words = np.zeros(nib.shape[1], dtype=np.uint32)
    for i in range(bits):
        for j in range(GROUP):
            words |= ((nib[i] >> j) & 1) << (4 * j + i)
    if counters is not None:
        n = nib.shape[1]
        counters.bit_ops += 3 * GROUP * bits * n
        counters.combine_ops += (GROUP * bits - 1) * n
    return words


@dataclass(frozen=True, eq=False)
class UnifiedTile:
    index: int
    m0: int
    k0: int
    tile_dims: tuple[int, int]
    bits: int
    tile_bytes: bytes


@dataclass(frozen=True, eq=False)
class PackedModel:
    """Single weight copy: tiles in visit order plus the group table.

    Tiles are ordered m-tile major, k-tile minor; both the decoding and the
    prefill kernels walk them in this order. ``scales``/``zero_points`` are in
    tile-visit order: per-block groups as ``(n_tiles, m_tile, blocks_per_tile)``,
    per-channel as ``(n_m_tiles, m_tile, 1)``, per-tensor as ``(1, 1, 1)``.
    """

    q_M: int
    q_K: int
    M_pad: int
    K_pad: int
    scheme: object
    tiling: TilingConfig
    tiles: list[UnifiedTile]
    scales: np.ndarray
    zero_points: np.ndarray
    _perm_cache: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self) -> tuple[int, int]:
        return self.M_pad // self.tiling.m_tile, self.K_pad // self.tiling.k_tile

    @property
    def weight_bytes(self) -> int:
        return sum(len(t.tile_bytes) for t in self.tiles)

    @property
    def metadata_bytes(self) -> int:
        return self.scales.size * 4 + self.zero_points.size

    def tile_groups(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Scales and zero-points for tile t as (m_tile, n_groups_along_k)."""
        g = self.scheme.granularity
        if g is Granularity.PER_BLOCK:
            return self.scales[t], self.zero_points[t]
        if g is Granularity.PER_CHANNEL:
            mt = t // self.grid[1]
            return self.scales[mt], self.zero_points[mt]
        return self.scales[0], self.zero_points[0]

    def nibbles(self, t: int) -> np.ndarray:
        """Tile t's nibble stream in buffer order."""
        raw = np.frombuffer(self.tiles[t].tile_bytes, dtype=np.uint8)
        out = np.empty(raw.size * 2, dtype=np.uint8)
        out[0::2] = raw & 0xF
        out[1::2] = raw >> 4
        return out


def _tile_nibble_order(tiling: TilingConfig, bits: int) -> np.ndarray:
    """Flat index into the (plane, m, q) nibble grid for each buffer slot."""
    d = tiling.decoding
    Mt, Kt = tiling.m_tile, tiling.k_tile
    G = d.k_outer // GROUP
    Q = Kt // GROUP
    plane = np.arange(bits)[None, None, :, None, None]
    kd = np.arange(d.K_iter)[:, None, None, None, None]
    md = np.arange(d.M_iter)[None, :, None, None, None]
    q = np.arange(G)[None, None, None, :, None]
    m = np.arange(d.M_lookups)[None, None, None, None, :]
    mm = md * d.M_lookups + m
    qq = kd * G + q
    return ((plane * Mt + mm) * Q + qq).reshape(-1)


def tile_nibble_order(model_or_tiling, bits: int | None = None) -> np.ndarray:
    if isinstance(model_or_tiling, PackedModel):
        key = "order"
        cache = model_or_tiling._perm_cache
        if key not in cache:
            cache[key] = _tile_nibble_order(model_or_tiling.tiling, model_or_tiling.scheme.bits)
        return cache[key]
    return _tile_nibble_order(model_or_tiling, bits)


def tile_permutation(tiling: TilingConfig, bits: int) -> np.ndarray:
    """Map (m, k, plane) inside a tile to its bit offset in the tile buffer."""
    order = _tile_nibble_order(tiling, bits)
    Mt, Kt = tiling.m_tile, tiling.k_tile
    slot = np.empty_like(order)
    slot[order] = np.arange(order.size)
    slot = slot.reshape(bits, Mt, Kt // GROUP)
    perm = np.empty((Mt, Kt, bits), dtype=np.int64)
    for j in range(GROUP):
        perm[:, j::GROUP, :] = (slot * 4 + j).transpose(1, 2, 0)
    return perm


def _padded_groups(q: QuantizedMatrix, M_pad: int, K_pad: int):
    """Group tables extended to the padded shape."""
    scales, zps = q.scales, q.zero_points
    g = q.scheme.granularity
    pad_zp = 0 if not q.scheme.symmetric else q.scheme.midpoint
    tiny = float(np.finfo(np.float16).tiny)
    if g is Granularity.PER_BLOCK:
        nb = K_pad // q.scheme.block_size
        s = np.full((M_pad, nb), tiny)
        z = np.full((M_pad, nb), pad_zp, dtype=np.uint8)
        s[:q.M, :scales.shape[1]] = scales
        z[:q.M, :zps.shape[1]] = zps
    elif g is Granularity.PER_CHANNEL:
        s = np.full((M_pad, 1), tiny)
        z = np.full((M_pad, 1), pad_zp, dtype=np.uint8)
        s[:q.M] = scales
        z[:q.M] = zps
    else:
        s, z = scales.copy(), zps.copy()
    return s, z


def build_unified_layout(q: QuantizedMatrix, tiling: TilingConfig, hw=None) -> PackedModel:
    Mt, Kt = tiling.m_tile, tiling.k_tile
    if hw is not None:
        M_pad, K_pad = padded_dims(q.M, q.K, hw, q.scheme)
    else:
        M_pad, K_pad = -(-q.M // Mt) * Mt, -(-q.K // Kt) * Kt
    if M_pad % Mt or K_pad % Kt:
        raise LayoutError(f"tile {Mt}x{Kt} does not divide padded shape {M_pad}x{K_pad}")
    if q.scheme.granularity is Granularity.PER_BLOCK and Kt % q.scheme.block_size:
        raise LayoutError(f"k_tile={Kt} is not a multiple of block {q.scheme.block_size}")
    bits = q.scheme.bits
    if (Mt * Kt // GROUP * bits) % 2:
        raise LayoutError("tile holds an odd number of nibbles")

    s_pad, z_pad = _padded_groups(q, M_pad, K_pad)
    # padding codes equal their group's zero-point so they dequantize to 0
    full_z = np.repeat(np.repeat(z_pad, M_pad // z_pad.shape[0], 0), K_pad // z_pad.shape[1], 1)
    codes = full_z.astype(np.uint8)
    codes[:q.M, :q.K] = q.codes

    order = _tile_nibble_order(tiling, bits)
    nm, nk = M_pad // Mt, K_pad // Kt
    tiles = []
    for mi in range(nm):
        for ki in range(nk):
            c = codes[mi * Mt:(mi + 1) * Mt, ki * Kt:(ki + 1) * Kt]
            c4 = c.reshape(Mt, Kt // GROUP, GROUP)
            nib = np.zeros((bits, Mt, Kt // GROUP), dtype=np.uint8)
            for i in range(bits):
                for j in range(GROUP):
                    nib[i] |= ((c4[:, :, j] >> i) & 1) << j
            stream = nib.reshape(-1)[order]
            packed = (stream[0::2] | (stream[1::2] << 4)).astype(np.uint8)
            tiles.append(UnifiedTile(len(tiles), mi * Mt, ki * Kt, (Mt, Kt), bits,
                                     packed.tobytes()))

    g = q.scheme.granularity
    if g is Granularity.PER_BLOCK:
        bpt = Kt // q.scheme.block_size
        s = s_pad.reshape(nm, Mt, nk, bpt).transpose(0, 2, 1, 3).reshape(nm * nk, Mt, bpt)
        z = z_pad.reshape(nm, Mt, nk, bpt).transpose(0, 2, 1, 3).reshape(nm * nk, Mt, bpt)
    elif g is Granularity.PER_CHANNEL:
        s = s_pad.reshape(nm, Mt, 1)
        z = z_pad.reshape(nm, Mt, 1)
    else:
        s = s_pad.reshape(1, 1, 1)
        z = z_pad.reshape(1, 1, 1)
    return PackedModel(q.M, q.K, M_pad, K_pad, q.scheme, tiling, tiles,
                       np.ascontiguousarray(s), np.ascontiguousarray(z))


def tile_codes(model: PackedModel, t: int) -> np.ndarray:
    """Decode tile t back to its m_tile x k_tile code block."""
    tiling, bits = model.tiling, model.scheme.bits
    Mt, Kt = tiling.m_tile, tiling.k_tile
    order = tile_nibble_order(model)
    stream = model.nibbles(t)
    if stream.size != order.size:
        raise LayoutError(f"tile {t} has {stream.size} nibbles, expected {order.size}")
    nib = np.empty(order.size, dtype=np.uint8)
    nib[order] = stream
    nib = nib.reshape(bits, Mt, Kt // GROUP)
    c = np.zeros((Mt, Kt // GROUP, GROUP), dtype=np.uint8)
    for i in range(bits):
        for j in range(GROUP):
            c[:, :, j] |= ((nib[i] >> j) & 1) << i
    return c.reshape(Mt, Kt)


def unpack(model: PackedModel) -> QuantizedMatrix:
    nm, nk = model.grid
    if len(model.tiles) != nm * nk:
        raise LayoutError(f"expected {nm * nk} tiles, found {len(model.tiles)}")
    Mt, Kt = model.tiling.m_tile, model.tiling.k_tile
    codes = np.empty((model.M_pad, model.K_pad), dtype=np.uint8)
    for t, tile in enumerate(model.tiles):
        codes[tile.m0:tile.m0 + Mt, tile.k0:tile.k0 + Kt] = tile_codes(model, t)

    g = model.scheme.granularity
    M, K = model.q_M, model.q_K
    if g is Granularity.PER_BLOCK:
        bpt = model.scales.shape[2]
        def back(a):
            return a.reshape(nm, nk, Mt, bpt).transpose(0, 2, 1, 3).reshape(model.M_pad, nk * bpt)
        nb = K // model.scheme.block_size
        scales, zps = back(model.scales)[:M, :nb], back(model.zero_points)[:M, :nb]
    elif g is Granularity.PER_CHANNEL:
        scales = model.scales.reshape(-1, 1)[:M]
        zps = model.zero_points.reshape(-1, 1)[:M]
    else:
        scales = model.scales.reshape(1, 1)
        zps = model.zero_points.reshape(1, 1)
    return QuantizedMatrix(M, K, model.scheme, codes[:M, :K].copy(),
                           np.ascontiguousarray(scales, dtype=np.float64),
                           np.ascontiguousarray(zps, dtype=np.uint8))
