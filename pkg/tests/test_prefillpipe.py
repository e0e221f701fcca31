import numpy as np
import pytest

from tlut.calibrate import Targets, fit_dequant
from tlut.hardware import HardwareModel
from tlut.prefillpipe import (FootprintError, dequant_strategy_compare, gemv_breakdown, mp_gemm,
                              pipeline_trace, schedule, worker_count)
from tlut.quantkit import INT2_BLOCK64, INT4_BLOCK64, INT4_CHANNEL, TERNARY, dequantize_reference

import oracles
from conftest import make_model


@pytest.mark.parametrize("scheme", [INT4_BLOCK64, INT2_BLOCK64, INT4_CHANNEL, TERNARY])
def test_mp_gemm_matches_oracle(hw, scheme):
    q, model = make_model(512, 512, scheme, hw, seed=1)
    A = np.random.default_rng(2).standard_normal((16, 512))
    out, trace = mp_gemm(model, A, hw)
    ref = A @ dequantize_reference(q).T
    assert out.shape == (16, 512)
    assert oracles.rel_l2(out, ref) <= 1e-3
    assert trace.n_tiles == len(model.tiles)


def test_mp_gemm_thread_count_irrelevant(hw):
    _, model = make_model(256, 256, INT4_BLOCK64, hw)
    A = np.random.default_rng(0).standard_normal((4, 256))
    one, _ = mp_gemm(model, A, hw, workers=1)
    many, _ = mp_gemm(model, A, hw, workers=4)
    assert np.array_equal(one, many)


def test_mp_gemm_rejects_footprint(hw):
    _, model = make_model(256, 256, INT4_BLOCK64, hw)
    with pytest.raises(FootprintError):
        mp_gemm(model, np.zeros((1, 256)), hw.with_(tcm_bytes=4096))


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("TLUT_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("TLUT_THREADS", "junk")
    assert worker_count() >= 1


def test_single_tile_no_overlap():
    tr = schedule([1.0], [2.0], [3.0], 3)
    assert tr.pipelined_latency == tr.sequential_latency == 6.0


def test_balanced_stages_approach_3x():
    n = 2000
    tr = schedule(np.ones(n), np.ones(n), np.ones(n), 3)
    assert tr.speedup == pytest.approx(3.0, rel=2e-3)


def test_buffer_limit_slows_pipeline():
    d, q, m = np.full(50, 1.0), np.full(50, 1.0), np.full(50, 1.0)
    assert schedule(d, q, m, 1).pipelined_latency > schedule(d, q, m, 3).pipelined_latency


def test_pipeline_calibrated(hw):
    tr = pipeline_trace(4096, 4096, 128, INT4_BLOCK64, hw)
    assert tr.speedup == pytest.approx(1.5, abs=0.15)
    assert tr.overhead_vs_matmul <= 0.15
    assert sum(tr.shares.values()) == pytest.approx(1.0)


def test_dequant_ratios(hw):
    d = dequant_strategy_compare(4096, 4096, hw)
    assert 8 <= d["speedup_vs_convert"]["value"] <= 12
    assert 4 <= d["speedup_vs_load_full"]["value"] <= 6
    for r in ("speedup_vs_convert", "speedup_vs_load_full"):
        assert d[r]["value"] == pytest.approx(d[r]["num"] / d[r]["den"])


def test_unquantized_bytes_equal(hw):
    d = dequant_strategy_compare(1024, 1024, hw, bits=16)
    assert d["bytes"]["lut"] == d["bytes"]["load_full"]


def test_gemv_breakdown(hw, cpu):
    b = gemv_breakdown(4096, 4096, hw, cpu)
    assert 3.3 <= b["ratio_total"]["value"] <= 4.3
    assert b["ratio_dq"]["value"] == pytest.approx(10.0)
    for dev in ("npu", "cpu"):
        assert b[dev]["total"] == pytest.approx(b[dev]["MEM"] + b[dev]["DQ"] + b[dev]["CMP"])


def test_equal_dequant_rate_leaves_bandwidth(hw, cpu):
    same = cpu.with_(vec_op_rate=hw.vec_op_rate, fp_op_cost=hw.fp_op_cost,
                     gemv_mac_rate=hw.gemv_mac_rate)
    b = gemv_breakdown(4096, 4096, hw, same)
    assert b["ratio_dq"]["value"] == pytest.approx(1.0)
    assert (b["ratio_total"]["value"] > 1) == (hw.bw_dma < same.bw_dma)


def test_calibration_closed_form():
    hw = fit_dequant(HardwareModel(), Targets())
    d = dequant_strategy_compare(4096, 4096, hw)
    assert d["speedup_vs_convert"]["value"] == pytest.approx(10.2)
    assert d["speedup_vs_load_full"]["value"] == pytest.approx(4.9)
