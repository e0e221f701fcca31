"""Fit the unmeasured hardware rates so the modeled ablations land on target.

Bandwidths come from measurement and stay fixed. Only ``fp_op_cost``,
``vec_op_rate``, ``mm_rate`` and the CPU profile's rates are solved for, and
each profile lists them under ``fitted``.
"""
from __future__ import annotations

from dataclasses import dataclass

from .hardware import HardwareModel
from .lutdequant import dequant_op_counts
from .prefillpipe import dequant_rate, pipeline_trace, weight_bytes
from .quantkit import INT4_BLOCK64, QuantScheme


@dataclass(frozen=True)
class Targets:
    lut_vs_convert: float = 10.2
    lut_vs_load_full: float = 4.9
    pipeline_speedup: float = 1.5
    npu_vs_cpu_gemv: float = 3.8
    npu_vs_cpu_dq: float = 10.0
    dequant_bits: int = 2
    dequant_block: int = 64
    pipeline_shape: tuple[int, int, int] = (4096, 4096, 128)
    gemv_shape: tuple[int, int] = (4096, 4096)


def _per_elem(bits, block, strategy):
    """(int ops, float ops) per weight."""
    n = 1 << 16
    c = dequant_op_counts(n, bits, block, strategy)
    return (c.bit_ops + c.combine_ops + c.lut_lookups) / n, c.fp_ops / n


def fit_dequant(hw: HardwareModel, t: Targets) -> HardwareModel:
    """Solve fp_op_cost and vec_op_rate from the two dequant ablation ratios.

    With the DMA overlapped, LUT dequant is compute bound at
    ``full_bytes / (bw * r_full)`` and ConvertDQ is ``r_conv`` times slower.
    """
    b, B = t.dequant_bits, t.dequant_block
    il, fl = _per_elem(b, B, "lut")
    ic, fc = _per_elem(b, B, "convert")
    f = (t.lut_vs_convert * il - ic) / (fc - t.lut_vs_convert * fl)
    if f <= 0:
        raise ValueError("targets imply a non-positive float-op cost")
    t_lut_per_elem = 2.0 / hw.bw_dma / t.lut_vs_load_full
    q_per_elem = weight_bytes(1, B, b, B) / B / hw.bw_dma
    if t_lut_per_elem <= q_per_elem:
        raise ValueError("LoadFull target unreachable: quantized load alone is slower")
    rate = (il + fl * f) / t_lut_per_elem
    return hw.with_(fp_op_cost=f, vec_op_rate=rate)


def fit_mm_rate(hw: HardwareModel, t: Targets, scheme: QuantScheme = INT4_BLOCK64) -> HardwareModel:
    """Bisect mm_rate (log scale) until the pipelined speedup hits target."""
    M, K, N = t.pipeline_shape
    lo, hi = 1e9, 1e16
    for _ in range(200):
        mid = (lo * hi) ** 0.5
        s = pipeline_trace(M, K, N, scheme, hw.with_(mm_rate=mid)).speedup
        # faster matmul -> other stages dominate -> larger speedup
        if s < t.pipeline_speedup:
            lo = mid
        else:
            hi = mid
    return hw.with_(mm_rate=(lo * hi) ** 0.5)


def fit_cpu(npu: HardwareModel, cpu: HardwareModel, t: Targets) -> HardwareModel:
    """CPU dequant rate is ``npu_vs_cpu_dq`` times the NPU's; memory bandwidth
    closes the total-latency ratio with the CPU MAC rate held fixed."""
    M, K = t.gemv_shape
    bits, block = 4, 64
    n = M * K
    npu_rate = dequant_rate(npu, bits, block, "convert")
    ops = dequant_op_counts(1 << 16, bits, block, "convert").cost(cpu.fp_op_cost) / (1 << 16)
    cpu = cpu.with_(vec_op_rate=npu_rate * t.npu_vs_cpu_dq * ops)
    npu_total = (weight_bytes(M, K, bits, block) / npu.bw_dma + n / npu_rate
                 + n / npu.gemv_mac_rate)
    cpu_total = npu_total / t.npu_vs_cpu_gemv
    mem = cpu_total - n / dequant_rate(cpu, bits, block, "convert") - n / cpu.gemv_mac_rate
    if mem <= 0:
        raise ValueError("CPU MAC rate too low for the target ratio")
    return cpu.with_(bw_dma=weight_bytes(M, K, bits, block) / mem)


def calibrate(npu: HardwareModel, cpu: HardwareModel, t: Targets = Targets()):
    npu = fit_mm_rate(fit_dequant(npu, t), t)
    npu = npu.with_(fitted=("fp_op_cost", "vec_op_rate", "mm_rate"))
    cpu = fit_cpu(npu, cpu, t).with_(fitted=("vec_op_rate", "bw_dma"))
    return npu, cpu
