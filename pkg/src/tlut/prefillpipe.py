"""Prefill mpGEMM: fused LUT dequantization feeding the matrix core, with an
analytic DMA -> vector dequant -> matrix multiply pipeline model."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bitlayout import OpCounters, PackedModel
from .hardware import HardwareModel
from .lutdequant import OutPrecision, dequant_op_counts, dequantize_tile_fused
from .quantkit import Granularity, QuantScheme
from .tiler import TilingConfig, best_tiling, validate_tiling

META_BYTES_PER_GROUP = 5  # float32 scale + uint8 zero-point


class FootprintError(ValueError):
    pass


def worker_count() -> int:
    try:
        cap = int(os.environ.get("TLUT_THREADS", "0"))
    except ValueError:
        cap = 0
    n = os.cpu_count() or 1
    return max(1, min(cap, n) if cap > 0 else n)


@dataclass
class PipelineTrace:
    t_dma: np.ndarray
    t_dq: np.ndarray
    t_mm: np.ndarray
    sequential_latency: float
    pipelined_latency: float
    matmul_only_latency: float
    fill_time: float

    @property
    def n_tiles(self) -> int:
        return self.t_dma.size

    @property
    def speedup(self) -> float:
        return self.sequential_latency / self.pipelined_latency

    @property
    def overhead_vs_matmul(self) -> float:
        return self.pipelined_latency / self.matmul_only_latency - 1.0

    @property
    def shares(self) -> dict:
        total = self.sequential_latency
        return {"MEM": float(self.t_dma.sum() / total),
                "DQ": float(self.t_dq.sum() / total),
                "CMP": float(self.t_mm.sum() / total)}

    def summary(self) -> dict:
        return {
            "n_tiles": self.n_tiles,
            "sequential_s": self.sequential_latency,
            "pipelined_s": self.pipelined_latency,
            "matmul_only_s": self.matmul_only_latency,
            "fill_s": self.fill_time,
            "speedup": self.speedup,
            "overhead_vs_matmul": self.overhead_vs_matmul,
            "shares": self.shares,
        }


def schedule(t_dma, t_dq, t_mm, n_buffers: int | None = None) -> PipelineTrace:
    """Three-stage flow-shop schedule over tiles.

    Stage s of tile t starts once stage s-1 of tile t and stage s of tile
    t-1 are done. With ``n_buffers`` the DMA of tile t also waits for the
    matmul of tile ``t - n_buffers`` to free its TCM slot.
    """
    t_dma, t_dq, t_mm = (np.asarray(x, dtype=np.float64) for x in (t_dma, t_dq, t_mm))
    n = t_dma.size
    c1 = np.zeros(n)
    c2 = np.zeros(n)
    c3 = np.zeros(n)
    for t in range(n):
        start = c1[t - 1] if t else 0.0
        if n_buffers and t >= n_buffers:
            start = max(start, c3[t - n_buffers])
        c1[t] = start + t_dma[t]
        c2[t] = max(c1[t], c2[t - 1] if t else 0.0) + t_dq[t]
        c3[t] = max(c2[t], c3[t - 1] if t else 0.0) + t_mm[t]
    pipelined = float(c3[-1]) if n else 0.0
    steady = float(np.maximum(np.maximum(t_dma, t_dq), t_mm).sum())
    return PipelineTrace(t_dma, t_dq, t_mm,
                         float((t_dma + t_dq + t_mm).sum()), pipelined,
                         float(t_mm.sum()), pipelined - steady)


def tile_meta_bytes(scheme: QuantScheme, m_tile: int, k_tile: int) -> int:
    if scheme.granularity is Granularity.PER_BLOCK:
        return m_tile * (k_tile // scheme.block_size) * META_BYTES_PER_GROUP
    if scheme.granularity is Granularity.PER_CHANNEL:
        return m_tile * META_BYTES_PER_GROUP
    return META_BYTES_PER_GROUP


def conv_group_elems(scheme: QuantScheme, k_tile: int) -> int:
    """Weights sharing one conversion table inside a tile."""
    if scheme.granularity is Granularity.PER_BLOCK:
        return scheme.block_size
    return k_tile


def stage_times(scheme: QuantScheme, tiling: TilingConfig, N: int, hw: HardwareModel,
                counters: OpCounters | None = None) -> tuple[float, float, float]:
    Mt, Kt = tiling.m_tile, tiling.k_tile
    elems = Mt * Kt
    t_dma = (elems * scheme.bits // 8 + tile_meta_bytes(scheme, Mt, Kt)) / hw.bw_dma
    if counters is None:
        counters = tile_dequant_counters(scheme, tiling)
    t_dq = counters.cost(hw.fp_op_cost) / hw.vec_op_rate
    t_mm = elems * N / hw.mm_rate
    return t_dma, t_dq, t_mm


def tile_dequant_counters(scheme: QuantScheme, tiling: TilingConfig) -> OpCounters:
    """What :func:`dequantize_tile_fused` records for one tile."""
    Mt, Kt = tiling.m_tile, tiling.k_tile
    if scheme.granularity is Granularity.PER_TENSOR:
        c = dequant_op_counts(Mt * Kt, scheme.bits, Mt * Kt, "lut")
        c.fp_ops = 0 if tiling.dq_bytes == 1 else 1 << scheme.bits
        return c
    return dequant_op_counts(Mt * Kt, scheme.bits, conv_group_elems(scheme, Kt), "lut")


def pipeline_trace(M: int, K: int, N: int, scheme: QuantScheme, hw: HardwareModel,
                   tiling: TilingConfig | None = None) -> PipelineTrace:
    """Model-only trace for an M x K weight and N activation rows."""
    tiling = tiling or best_tiling(M, K, hw, scheme, N)
    _check_footprint(tiling, hw, scheme)
    n_tiles = -(-M // tiling.m_tile) * -(-K // tiling.k_tile)
    d, q, m = stage_times(scheme, tiling, N, hw)
    return schedule(np.full(n_tiles, d), np.full(n_tiles, q), np.full(n_tiles, m), hw.n_stage)


def _check_footprint(tiling, hw, scheme):
    check = validate_tiling(tiling, hw, scheme)
    eqn4 = [v for v in check.violations if v.startswith("eqn4")]
    if eqn4:
        raise FootprintError("tiling rejected by Eqn 4 footprint bound: " + eqn4[0])


def mp_gemm(model: PackedModel, activations, hw: HardwareModel,
            workers: int | None = None) -> tuple[np.ndarray, PipelineTrace]:
    """``activations (N x K) @ dequantize(W).T`` plus its pipeline trace.

    The output does not depend on ``hw``; only the trace does.
    """
    _check_footprint(model.tiling, hw, model.scheme)
    A = np.asarray(activations, dtype=np.float64)
    if A.ndim == 1:
        A = A[None, :]
    N, K = A.shape
    if K != model.q_K:
        raise ValueError(f"activations have K={K}, weights have K={model.q_K}")
    Ap = np.zeros((N, model.K_pad))
    Ap[:, :K] = A
    Mt, Kt = model.tiling.m_tile, model.tiling.k_tile
    nm, nk = model.grid
    int8 = model.tiling.dq_bytes == 1
    prec = OutPrecision.INT8 if int8 else OutPrecision.FP16
    out = np.zeros((N, model.M_pad))
    tile_counters = [None] * len(model.tiles)

    def run_row(mi: int):
        acc = np.zeros((N, Mt))
        for ki in range(nk):
            t = mi * nk + ki
            c = OpCounters()
            w = dequantize_tile_fused(model, t, prec, c)
            tile_counters[t] = c
            acc += Ap[:, ki * Kt:(ki + 1) * Kt] @ w.T.astype(np.float64)
        if int8:
            acc *= float(model.scales.reshape(-1)[0])
        out[:, mi * Mt:(mi + 1) * Mt] = acc

    n_workers = min(workers or worker_count(), nm)
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as ex:
            list(ex.map(run_row, range(nm)))
    else:
        for mi in range(nm):
            run_row(mi)

    times = [stage_times(model.scheme, model.tiling, N, hw, c) for c in tile_counters]
    d, q, m = (np.array(x) for x in zip(*times))
    return out[:, :model.q_M], schedule(d, q, m, hw.n_stage)


def weight_bytes(M: int, K: int, bits: int, block: int | None) -> int:
    """Quantized weight bytes plus per-group metadata; bits >= 16 means unquantized."""
    if bits >= 16:
        return M * K * 2
    groups = M * (K // block) if block else M
    return M * K * bits // 8 + groups * META_BYTES_PER_GROUP


def dequant_strategy_compare(M: int, K: int, hw: HardwareModel, bits: int = 2,
                             block: int = 64) -> dict:
    """Latency to produce full-precision weights in TCM, three ways.

    LUT and ConvertDQ both stream quantized bytes by DMA while the vector
    cores work, so each costs ``max(load, compute)``. LoadFull moves float16
    weights and does no compute.
    """
    n = M * K
    q_bytes = weight_bytes(M, K, bits, block)
    f_bytes = M * K * 2
    t_full = f_bytes / hw.bw_dma
    if bits >= 16:
        t_lut = t_conv = t_full
        lut_ops = conv_ops = 0.0
    else:
        lut_ops = dequant_op_counts(n, bits, block, "lut").cost(hw.fp_op_cost)
        conv_ops = dequant_op_counts(n, bits, block, "convert").cost(hw.fp_op_cost)
        t_load = q_bytes / hw.bw_dma
        t_lut = max(t_load, lut_ops / hw.vec_op_rate)
        t_conv = max(t_load, conv_ops / hw.vec_op_rate)
    return {
        "shape": [M, K], "bits": bits, "block": block,
        "bytes": {"lut": q_bytes, "convert_dq": q_bytes, "load_full": f_bytes},
        "ops": {"lut": lut_ops, "convert_dq": conv_ops},
        "latency_s": {"lut_dq": t_lut, "convert_dq": t_conv, "load_full": t_full},
        "speedup_vs_convert": {"value": t_conv / t_lut, "num": t_conv, "den": t_lut},
        "speedup_vs_load_full": {"value": t_full / t_lut, "num": t_full, "den": t_lut},
    }


def dequant_rate(hw: HardwareModel, bits: int, block: int, strategy: str = "convert") -> float:
    """Weights dequantized per second by the vector cores."""
    n = 1 << 16
    ops = dequant_op_counts(n, bits, block, strategy).cost(hw.fp_op_cost)
    return n * hw.vec_op_rate / ops


def gemv_breakdown(M: int, K: int, hw_npu: HardwareModel, hw_cpu: HardwareModel,
                   bits: int = 4, block: int = 64) -> dict:
    """MEM / DQ / CMP latency of a dequantize-then-GEMV kernel on two devices."""
    out = {}
    for tag, hw in (("npu", hw_npu), ("cpu", hw_cpu)):
        mem = weight_bytes(M, K, bits, block) / hw.bw_dma
        dq = M * K / dequant_rate(hw, bits, block, "convert")
        cmp_ = M * K / hw.gemv_mac_rate
        total = mem + dq + cmp_
        out[tag] = {"MEM": mem, "DQ": dq, "CMP": cmp_, "total": total,
                    "shares": {"MEM": mem / total, "DQ": dq / total, "CMP": cmp_ / total}}
    out["ratio_total"] = {"value": out["npu"]["total"] / out["cpu"]["total"],
                          "num": out["npu"]["total"], "den": out["cpu"]["total"]}
    out["ratio_dq"] = {"value": out["npu"]["DQ"] / out["cpu"]["DQ"],
                       "num": out["npu"]["DQ"], "den": out["cpu"]["DQ"]}
    return out
