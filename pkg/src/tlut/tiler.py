"""Unified tiling search.

A thread-level weight tile of ``m_tile x k_tile`` must be reachable by both
loop nests:

* prefill  ``(N_p_iter, M_p_iter, K_p_iter, N_mma, K_mma, M_mma)``
* decoding ``(K_d_iter, M_d_iter, K_d_lut, M_d_lookups)``

subject to

1. ``K_d_lut < N_REG``
2. ``M_p_iter * M_mma == M_d_iter * M_d_lookups``
3. ``K_p_iter * K_mma == K_d_iter * K_d_lut * k_per_lut``
4. ``N_STAGE * N_THREAD * S_tile < TCM``
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .hardware import HardwareModel
from .quantkit import Granularity, QuantScheme

ITER_CAP = 4096
ENTRY_BITS = 16
ACT_GROUP = 4


class TilingInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class PrefillTiling:
    N_iter: int
    M_iter: int
    K_iter: int
    N_mma: int = 32
    K_mma: int = 32
    M_mma: int = 32


@dataclass(frozen=True)
class DecodeTilePlan:
    K_iter: int
    M_iter: int
    K_lut: int
    M_lookups: int
    k_per_lut: int
    inner_block: int

    @property
    def k_outer(self) -> int:
        """K extent covered by the LUT registers held at once."""
        return self.K_lut * self.k_per_lut

    @property
    def m_tile(self) -> int:
        return self.M_iter * self.M_lookups

    @property
    def k_tile(self) -> int:
        return self.K_iter * self.k_outer


@dataclass(frozen=True)
class TilingConfig:
    prefill: PrefillTiling
    decoding: DecodeTilePlan
    dq_bytes: int = 2

    @property
    def m_tile(self) -> int:
        return self.prefill.M_iter * self.prefill.M_mma

    @property
    def k_tile(self) -> int:
        return self.prefill.K_iter * self.prefill.K_mma

    @property
    def k_per_lut(self) -> int:
        return self.decoding.k_per_lut

    @property
    def s_tile(self) -> int:
        """Dequantized tile footprint in bytes (what sits in TCM)."""
        return self.m_tile * self.k_tile * self.dq_bytes

    def score(self) -> tuple:
        d, p = self.decoding, self.prefill
        return (-d.K_lut, -d.M_iter, -p.K_iter, self.s_tile, p.N_iter)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TilingConfig":
        return cls(PrefillTiling(**d["prefill"]), DecodeTilePlan(**d["decoding"]),
                   d.get("dq_bytes", 2))


@dataclass
class TilingCheck:
    ok: bool
    violations: list[str]

    def __bool__(self):
        return self.ok


def dequant_bytes(scheme: QuantScheme) -> int:
    # per-tensor weights dequantize to INT8, everything else to FP16
    return 1 if scheme.granularity is Granularity.PER_TENSOR else 2


def padded_dims(M: int, K: int, hw: HardwareModel, scheme: QuantScheme) -> tuple[int, int]:
    N_mma, K_mma, M_mma = hw.mma_dims
    m_unit = math.lcm(hw.lookup_lanes(ENTRY_BITS), M_mma, 2)
    k_unit = math.lcm(hw.k_per_lut(ENTRY_BITS, ACT_GROUP), K_mma, 8)
    if scheme.granularity is Granularity.PER_BLOCK:
        k_unit = math.lcm(k_unit, scheme.block_size)
    return -(-M // m_unit) * m_unit, -(-K // k_unit) * k_unit


def _pow2_upto(n: int):
    v = 1
    while v <= n:
        yield v
        v *= 2


def validate_tiling(cfg: TilingConfig, hw: HardwareModel, scheme: QuantScheme,
                    M: int | None = None, K: int | None = None) -> TilingCheck:
    """Re-check every constraint from scratch and list the ones violated."""
    p, d = cfg.prefill, cfg.decoding
    bad = []
    if not d.K_lut < hw.n_reg:
        bad.append(f"eqn1: K_d_lut={d.K_lut} must be < N_REG={hw.n_reg}")
    if p.M_iter * p.M_mma != d.M_iter * d.M_lookups:
        bad.append(f"eqn2: M_p_iter*M_mma={p.M_iter * p.M_mma} != "
                   f"M_d_iter*M_d_lookups={d.M_iter * d.M_lookups}")
    if p.K_iter * p.K_mma != d.K_iter * d.K_lut * d.k_per_lut:
        bad.append(f"eqn3: K_p_iter*K_mma={p.K_iter * p.K_mma} != "
                   f"K_d_iter*K_d_lut*k_per_lut={d.K_iter * d.K_lut * d.k_per_lut}")
    footprint = hw.n_stage * hw.n_thread * cfg.s_tile
    if not footprint < hw.tcm_bytes:
        bad.append(f"eqn4: N_STAGE*N_THREAD*S_tile={footprint} must be < TCM={hw.tcm_bytes}")
    if (p.N_mma, p.K_mma, p.M_mma) != tuple(hw.mma_dims):
        bad.append(f"mma: tile {(p.N_mma, p.K_mma, p.M_mma)} != hardware {hw.mma_dims}")
    if d.M_lookups != hw.lookup_lanes(ENTRY_BITS):
        bad.append(f"lanes: M_d_lookups={d.M_lookups} != {hw.lookup_lanes(ENTRY_BITS)}")
    if d.k_per_lut != hw.k_per_lut(ENTRY_BITS, ACT_GROUP):
        bad.append(f"lanes: k_per_lut={d.k_per_lut} != {hw.k_per_lut(ENTRY_BITS, ACT_GROUP)}")
    if min(p.N_iter, p.M_iter, p.K_iter, d.K_iter, d.M_iter, d.K_lut) < 1:
        bad.append("iter: iteration counts must be positive")
    if cfg.dq_bytes != dequant_bytes(scheme):
        bad.append(f"precision: dq_bytes={cfg.dq_bytes} != {dequant_bytes(scheme)}")
    if scheme.granularity is Granularity.PER_BLOCK:
        B = scheme.block_size
        if d.inner_block != B:
            bad.append(f"block: inner_block={d.inner_block} != B={B}")
        if cfg.k_tile % B:
            bad.append(f"block: k_tile={cfg.k_tile} not a multiple of B={B}")
        if d.k_outer % B and B % d.k_outer:
            bad.append(f"block: LUT tile {d.k_outer} not aligned with B={B}")
    if (cfg.m_tile * cfg.k_tile // ACT_GROUP * scheme.bits) % 2:
        bad.append("nibbles: odd nibble count per tile")
    if M is not None and K is not None:
        Mp, Kp = padded_dims(M, K, hw, scheme)
        if Mp % cfg.m_tile:
            bad.append(f"shape: m_tile={cfg.m_tile} does not divide padded M={Mp}")
        if Kp % cfg.k_tile:
            bad.append(f"shape: k_tile={cfg.k_tile} does not divide padded K={Kp}")
    return TilingCheck(not bad, bad)


def enumerate_tilings(M: int, K: int, hw: HardwareModel, scheme: QuantScheme,
                      N: int = 128) -> list[TilingConfig]:
    """All unified tilings for an M x K weight, best first.

    Ranking: maximize K_d_lut, then M_d_iter, then K_p_iter; ties go to the
    smaller tile footprint and then the smaller N_p_iter.
    """
    if M <= 0 or K <= 0:
        raise ValueError("M and K must be positive")
    N_mma, K_mma, M_mma = hw.mma_dims
    Ml = hw.lookup_lanes(ENTRY_BITS)
    kpl = hw.k_per_lut(ENTRY_BITS, ACT_GROUP)
    Mp, Kp = padded_dims(M, K, hw, scheme)
    B = scheme.block_size if scheme.granularity is Granularity.PER_BLOCK else Kp
    dqb = dequant_bytes(scheme)
    n_iters = list(_pow2_upto(min(max(-(-N // N_mma), 1), ITER_CAP)))

    out = []
    for K_lut in _pow2_upto(min(hw.n_reg - 1, Kp // kpl)):
        for K_iter in _pow2_upto(min(Kp // (K_lut * kpl), ITER_CAP)):
            k_tile = K_iter * K_lut * kpl
            if Kp % k_tile or k_tile % K_mma or k_tile // K_mma > ITER_CAP:
                continue
            for M_iter in _pow2_upto(min(Mp // Ml, ITER_CAP)):
                m_tile = M_iter * Ml
                if Mp % m_tile or m_tile % M_mma or m_tile // M_mma > ITER_CAP:
                    continue
                for N_iter in n_iters:
                    cfg = TilingConfig(
                        PrefillTiling(N_iter, m_tile // M_mma, k_tile // K_mma,
                                      N_mma, K_mma, M_mma),
                        DecodeTilePlan(K_iter, M_iter, K_lut, Ml, kpl, B),
                        dqb)
                    if validate_tiling(cfg, hw, scheme, M, K):
                        out.append(cfg)
    if not out:
        raise TilingInfeasible(_diagnose(M, K, hw, scheme))
    out.sort(key=TilingConfig.score)
    return out


def best_tiling(M: int, K: int, hw: HardwareModel, scheme: QuantScheme,
                N: int = 128) -> TilingConfig:
    return enumerate_tilings(M, K, hw, scheme, N)[0]


def _diagnose(M, K, hw, scheme) -> str:
    N_mma, K_mma, M_mma = hw.mma_dims
    Ml = hw.lookup_lanes(ENTRY_BITS)
    kpl = hw.k_per_lut(ENTRY_BITS, ACT_GROUP)
    if hw.n_reg <= 1:
        return f"no tiling: Eqn 1 leaves no room for LUT registers (N_REG={hw.n_reg})"
    m_min = math.lcm(Ml, M_mma)
    k_min = math.lcm(kpl, K_mma)
    if scheme.granularity is Granularity.PER_BLOCK:
        k_min = math.lcm(k_min, scheme.block_size)
    smallest = hw.n_stage * hw.n_thread * m_min * k_min * dequant_bytes(scheme)
    if smallest >= hw.tcm_bytes:
        return (f"no tiling: Eqn 4 footprint of the smallest tile {m_min}x{k_min} is "
                f"{smallest} bytes, TCM holds {hw.tcm_bytes}")
    return f"no tiling: tile sizes cannot divide padded shape {padded_dims(M, K, hw, scheme)}"
