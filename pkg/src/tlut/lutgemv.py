"""Bit-serial table-lookup GEMV (decoding path).

For every group of four activations a table of all 16 subset sums is built
once. Each plane-i nibble of the weight buffer indexes that table directly, so
the inner loop is lookups and integer adds only:

    out[m] = sum_blocks scale * (sum_i 2**i * S_i - zp * block_act_sum)

with ``S_i`` the block's lookup sum for plane i. Floats appear only in the
block epilogue.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bitlayout import GROUP, OpCounters, PackedModel, tile_nibble_order, _tile_nibble_order
from .hardware import HardwareModel
from .quantkit import ActivationMode, Granularity, quantize_activations
from .tiler import DecodeTilePlan, TilingConfig

INT16_MAX = np.iinfo(np.int16).max
INT32_MAX = np.iinfo(np.int32).max
FP16_MAX = float(np.finfo(np.float16).max)
ACC_BITS = 32


@dataclass(frozen=True)
class ActLUT:
    base: int
    entries: np.ndarray


@dataclass(frozen=True, eq=False)
class ActTables:
    """All activation-group tables for one vector: ``entries[group, idx]``."""

    entries: np.ndarray
    g: int
    width: int
    saturated: bool
    K: int
    signed: bool = False

    def __len__(self):
        return self.entries.shape[0]

    def __getitem__(self, i) -> ActLUT:
        return ActLUT(i * self.g, self.entries[i])

    @property
    def integer(self) -> bool:
        return self.entries.dtype.kind == "i"


def precompute_act_luts(a, g: int = GROUP, width: int = 32, signed: bool = False) -> ActTables:
    """Subset-sum tables for consecutive groups of ``g`` activations.

    ``signed`` tables hold ``sum_j (+a_j if bit j else -a_j)`` instead. They
    are antisymmetric (``T[~idx] == -T[idx]`` exactly, even after rounding),
    which roughly halves the float16 rounding error of the GEMV.

    Integer activations give integer tables; 16-bit tables saturate to the
    int16 range and set ``saturated``. Float activations give float16 (16-bit)
    or float32 (32-bit) rounded tables.
    """
    if width not in (16, 32):
        raise ValueError("entry width must be 16 or 32")
    a = np.asarray(a)
    integer = a.dtype.kind in "iu"
    K = a.shape[0]
    pad = (-K) % g
    a = np.concatenate([a, np.zeros(pad, dtype=a.dtype)])
    groups = a.reshape(-1, g).astype(np.int64 if integer else np.float64)
    idx = np.arange(1 << g)
    mask = ((idx[:, None] >> np.arange(g)[None, :]) & 1).astype(groups.dtype)
    entries = groups @ (2 * mask - 1).T if signed else groups @ mask.T
    saturated = False
    if integer:
        lim = INT16_MAX if width == 16 else INT32_MAX
        saturated = bool(np.any(np.abs(entries) > lim))
        entries = np.clip(entries, -lim, lim)
    elif width == 16:
        saturated = bool(np.any(np.abs(entries) > FP16_MAX))
        entries = np.clip(entries, -FP16_MAX, FP16_MAX).astype(np.float16).astype(np.float64)
    else:
        entries = entries.astype(np.float32).astype(np.float64)
    return ActTables(entries, g, width, saturated, K, signed)


@dataclass
class SpillBuffer:
    """Register file plus a TCM overflow arena for the outer accumulators.

    Slots below ``capacity`` live in registers; the rest live in the arena,
    and each update of an arena slot costs a 4-byte load and a 4-byte store.
    """

    capacity: int
    n_slots: int
    traffic: int = 0
    arena_region: str = "TCM"
    peak_in_registers: int = 0
    values: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.zeros(self.n_slots)
        self.peak_in_registers = min(self.capacity, self.n_slots)

    @property
    def arena_slots(self) -> int:
        return max(self.n_slots - self.capacity, 0)

    def accumulate(self, start: int, vals: np.ndarray) -> None:
        stop = start + vals.size
        self.values[start:stop] += vals
        in_arena = max(0, stop - max(start, self.capacity))
        self.traffic += 8 * in_arena


def register_capacity(hw: HardwareModel, plan: DecodeTilePlan) -> int:
    """Float accumulators that fit next to the resident LUT registers."""
    free = max(hw.n_reg - plan.K_lut - hw.reserved_regs, 0)
    return free * (hw.vector_bits // ACC_BITS)


@dataclass
class GemvResult:
    out: np.ndarray
    group_sums: np.ndarray
    plane_sums: np.ndarray
    act_scale: float
    saturated: bool
    counters: OpCounters
    spill_traffic: int
    read_offsets_monotone: bool

    @property
    def approximate(self) -> bool:
        return self.saturated


def plan_for(model: PackedModel, K_lut: int) -> DecodeTilePlan:
    """Re-split the model's K tile with ``K_lut`` resident tables."""
    d = model.tiling.decoding
    Kt = model.tiling.k_tile
    if Kt % (K_lut * d.k_per_lut):
        raise ValueError(f"K_lut={K_lut} does not tile k_tile={Kt}")
    return replace(d, K_lut=K_lut, K_iter=Kt // (K_lut * d.k_per_lut))


def valid_plans(model: PackedModel, hw: HardwareModel) -> list[DecodeTilePlan]:
    d = model.tiling.decoding
    out = []
    K_lut = 1
    while K_lut < hw.n_reg and K_lut * d.k_per_lut <= model.tiling.k_tile:
        if model.tiling.k_tile % (K_lut * d.k_per_lut) == 0:
            out.append(plan_for(model, K_lut))
        K_lut *= 2
    return out


def check_plan(model: PackedModel, plan: DecodeTilePlan) -> None:
    if plan.m_tile != model.tiling.m_tile or plan.k_tile != model.tiling.k_tile:
        raise ValueError(f"plan tile {plan.m_tile}x{plan.k_tile} != model tile "
                         f"{model.tiling.m_tile}x{model.tiling.k_tile}")
    if plan.k_outer % GROUP:
        raise ValueError("LUT sub-tile must hold whole activation groups")


def decode_read_offsets(model: PackedModel, plan: DecodeTilePlan | None = None) -> np.ndarray:
    """Nibble offsets inside a tile, in the order the decoding traversal reads them."""
    plan = model.tiling.decoding if plan is None else plan
    check_plan(model, plan)
    layout = tile_nibble_order(model)
    slot = np.empty_like(layout)
    slot[layout] = np.arange(layout.size)
    visit = _tile_nibble_order(TilingConfig(model.tiling.prefill, plan, model.tiling.dq_bytes),
                               model.scheme.bits)
    return slot[visit]


def lut_lookup(model: PackedModel, tables: ActTables, plan: DecodeTilePlan | None = None,
               hw: HardwareModel | None = None, act_scale: float = 1.0,
               planes=None) -> GemvResult:
    """Table-lookup half of the kernel, given precomputed activation tables."""
    plan = model.tiling.decoding if plan is None else plan
    check_plan(model, plan)
    scheme = model.scheme
    bits = scheme.bits
    Mt, Kt = model.tiling.m_tile, model.tiling.k_tile
    Q = Kt // GROUP
    nm, nk = model.grid
    if len(tables) * tables.g < model.q_K or tables.g != GROUP:
        raise ValueError("activation tables do not cover K")
    entries = tables.entries
    if entries.shape[0] < model.K_pad // GROUP:
        entries = np.concatenate([entries, np.zeros(
            (model.K_pad // GROUP - entries.shape[0], entries.shape[1]), dtype=entries.dtype)])
    dtype = entries.dtype
    use = np.zeros(bits, dtype=bool)
    use[list(range(bits)) if planes is None else list(planes)] = True

    per_block = scheme.granularity is Granularity.PER_BLOCK
    q_per_group = scheme.block_size // GROUP if per_block else model.K_pad // GROUP
    n_groups_row = model.K_pad // (q_per_group * GROUP)
    plane_sums = np.zeros((bits, model.M_pad, n_groups_row), dtype=dtype)
    block_act = entries[:, -1].reshape(n_groups_row, q_per_group).sum(axis=1)
    # signed tables give 2*(c - zp).a = sum 2^i S_i + (2^b - 1 - 2 zp) * block_act
    signed = tables.signed

    counters = OpCounters()
    out = np.zeros(model.M_pad)
    group_sums = np.zeros((model.M_pad, n_groups_row), dtype=dtype)
    weights = (1 << np.arange(bits)).astype(dtype if dtype.kind == "i" else np.float64)
    hw = hw or HardwareModel()
    capacity = register_capacity(hw, plan)
    layout = tile_nibble_order(model)
    offsets = decode_read_offsets(model, plan)
    monotone = bool(np.all(np.diff(offsets) > 0))
    spill_traffic = 0

    for mi in range(nm):
        spill = SpillBuffer(capacity, Mt)
        rows = slice(mi * Mt, (mi + 1) * Mt)
        scales, zps = _row_groups(model, mi)
        for ki in range(nk):
            t = mi * nk + ki
            stream = model.nibbles(t)
            nib = np.empty(layout.size, dtype=np.uint8)
            nib[layout] = stream
            nib = nib.reshape(bits, Mt, Q)
            qg = ki * Q + np.arange(Q)
            looked = entries[qg[None, None, :], nib]          # (bits, Mt, Q)
            counters.lut_lookups += looked.size
            counters.combine_ops += looked.size
            if per_block:
                g0 = ki * Q // q_per_group
                gsz = Q // q_per_group
                s = looked.reshape(bits, Mt, gsz, q_per_group).sum(axis=-1)
                plane_sums[:, rows, g0:g0 + gsz] = s
                done = range(g0, g0 + gsz)
            else:
                plane_sums[:, rows, 0] += looked.sum(axis=-1)
                done = range(1) if ki == nk - 1 else range(0)
            # epilogue of every group finished in this tile, walked in plan order
            for g in done:
                ps = plane_sums[:, rows, g]
                acc = np.tensordot(weights * use, ps, axes=(0, 0))
                ba = block_act[g].astype(acc.dtype)
                if signed:
                    if planes is None:
                        acc = acc + ((1 << bits) - 1 - 2 * zps[:, g].astype(acc.dtype)) * ba
                    else:
                        acc = acc + (weights * use).sum() * ba
                    acc = acc // 2 if acc.dtype.kind == "i" else acc / 2
                elif planes is None:
                    acc = acc - zps[:, g].astype(acc.dtype) * ba
                group_sums[rows, g] = acc
                contrib = scales[:, g] * acc.astype(np.float64)
                counters.fp_ops += 2 * Mt
                for md in range(plan.M_iter):
                    lanes = slice(md * plan.M_lookups, (md + 1) * plan.M_lookups)
                    spill.accumulate(lanes.start, contrib[lanes])
        out[rows] = spill.values
        spill_traffic += spill.traffic

    out = out[:model.q_M] * act_scale
    counters.fp_ops += model.q_M
    n_valid = model.q_K // (q_per_group * GROUP) if per_block else 1
    return GemvResult(out, group_sums[:model.q_M, :n_valid],
                      plane_sums[:, :model.q_M, :n_valid], act_scale,
                      tables.saturated, counters, spill_traffic, monotone)


def _row_groups(model: PackedModel, mi: int):
    """Scales/zero-points for m-tile mi as (m_tile, groups_per_row)."""
    Mt = model.tiling.m_tile
    nk = model.grid[1]
    g = model.scheme.granularity
    if g is Granularity.PER_BLOCK:
        s = np.concatenate([model.scales[mi * nk + ki] for ki in range(nk)], axis=1)
        z = np.concatenate([model.zero_points[mi * nk + ki] for ki in range(nk)], axis=1)
        return s, z
    if g is Granularity.PER_CHANNEL:
        return model.scales[mi], model.zero_points[mi]
    return (np.broadcast_to(model.scales[0], (Mt, 1)),
            np.broadcast_to(model.zero_points[0], (Mt, 1)))


def prepare_activations(a, mode: ActivationMode):
    mode = ActivationMode(mode)
    codes, scale = quantize_activations(a, mode)
    return codes, scale


def lut_gemv(model: PackedModel, a, plan: DecodeTilePlan | None = None,
             hw: HardwareModel | None = None, entry_width: int | None = None,
             quantize: bool = True, planes=None) -> GemvResult:
    """Decoding GEMV: ``dequantize(W) @ a`` without dequantizing W.

    With ``quantize`` the activations go through the scheme's activation mode
    first; pass integer codes with ``quantize=False`` to skip that.

    ``planes`` restricts the kernel to a subset of bit planes and returns
    ``sum_{i in planes} 2**i * (plane_i @ a)`` per group, without the
    zero-point term, so single-plane runs add up to the all-plane run.
    """
    mode = model.scheme.activation_mode
    if quantize:
        codes, scale = prepare_activations(a, mode)
    else:
        codes, scale = np.asarray(a), 1.0
    if entry_width is None:
        entry_width = 16 if mode is ActivationMode.FP16 else 32
    tables = precompute_act_luts(codes, GROUP, entry_width, signed=float_tables(codes, entry_width))
    return lut_lookup(model, tables, plan, hw, scale, planes)


def float_tables(codes, width: int) -> bool:
    """16-bit float tables use the signed form; everything else stays plain."""
    return width == 16 and np.asarray(codes).dtype.kind == "f"


@dataclass(frozen=True)
class SpillStats:
    live_accumulators: int
    capacity: int
    spilled: int
    arena_region: str
    traffic_bytes: int
    tcm_time: float
    l2_time: float


def spill_report(plan: DecodeTilePlan, hw: HardwareModel) -> SpillStats:
    """Accumulator spill for one thread tile, TCM arena vs compiler L2 spill."""
    live = plan.M_iter * plan.M_lookups
    cap = register_capacity(hw, plan)
    spilled = max(live - cap, 0)
    # one read-modify-write per spilled slot each time a quantization group closes
    traffic = 8 * spilled * max(plan.k_tile // max(plan.inner_block, 1), 1)
    return SpillStats(live, cap, spilled, "TCM", traffic,
                      traffic / hw.bw_tcm, traffic / hw.bw_l2fetch)


VLUT_VARIANTS = {
    # entries, entry bits, output bits per instruction (VLUT16 writes a vector pair)
    "VLUT16": (16, 16, 2048),
    "VLUT32": (32, 8, 1024),
}


def vlut_throughput(variant: str, activation_bits: int, cpi: float = 0.5,
                    vector_bits: int = 1024) -> dict:
    """Useful lookups per cycle and the MADDs they replace.

    Tables of activation sums need ``2 * activation_bits``-wide entries; a
    narrower hardware entry takes several lookups per useful value.
    """
    n_entries, entry_bits, out_bits = VLUT_VARIANTS[variant]
    out_bits = out_bits * vector_bits // 1024
    raw = out_bits / entry_bits / cpi
    pieces = max(2 * activation_bits // entry_bits, 1)
    lookups = int(raw // pieces)
    return {
        "variant": variant,
        "bitwidth": activation_bits,
        "cpi": cpi,
        "lookups": lookups,
        "equiv_madds": int(lookups * math.log2(n_entries)),
    }


def choose_vlut_variant(activation_bits: int, cpi: float = 0.5) -> dict:
    if activation_bits not in (8, 16):
        raise ValueError("activation_bits must be 8 or 16")
    rows = [vlut_throughput(v, activation_bits, cpi) for v in VLUT_VARIANTS]
    best = max(rows, key=lambda r: r["equiv_madds"] / r["cpi"])
    return dict(best, candidates=rows)
