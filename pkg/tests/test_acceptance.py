"""Acceptance criteria, one test per criterion, at the stated tolerances.

Each check returns ``(passed, detail)``; the pytest hook in conftest prints one
PASS/FAIL line per criterion. Run standalone with
``python tests/test_acceptance.py``.
"""
import time

import numpy as np
import pytest

from tlut import container as C
from tlut import graphopt as go
from tlut.bitlayout import OpCounters, build_unified_layout, repack_naive_nibbles
from tlut.hardware import load_profile
from tlut.lutdequant import build_conv_luts, build_repack_lut, dequant_op_counts, repack_nibbles
from tlut.lutgemv import choose_vlut_variant, lut_gemv, valid_plans, vlut_throughput
from tlut.prefillpipe import dequant_strategy_compare, mp_gemm, pipeline_trace
from tlut.quantkit import (INT2_BLOCK64, INT4_BLOCK64, INT4_CHANNEL, SCHEME_PRESETS, TERNARY,
                           ActivationMode, QuantScheme, dequantize_reference, quantize,
                           quantization_error_stats, quantize_activations)
from tlut.tiler import best_tiling, dequant_bytes, enumerate_tilings

import oracles

HW = load_profile("sd8gen3")
RESULTS = {}


def _model(W, scheme):
    q = quantize(W, scheme)
    return q, build_unified_layout(q, best_tiling(q.M, q.K, HW, scheme), HW)


def _fp16(s: QuantScheme) -> QuantScheme:
    return QuantScheme.from_dict(dict(s.to_dict(), activation_mode=ActivationMode.FP16))


def c01_gemv_oracle():
    rng = np.random.default_rng(101)
    schemes = [INT4_BLOCK64, INT2_BLOCK64, TERNARY]
    t0 = time.perf_counter()
    n_exact = n_int = n_fp = 0
    worst_fp = 0.0
    for i in range(1200):
        scheme = schemes[i % 3]
        if i % 4 == 3:
            scheme = _fp16(scheme)
        M, K = 64 * int(rng.integers(1, 9)), 64 * int(rng.integers(1, 9))
        W = rng.standard_normal((M, K)) * rng.choice([1e-2, 1.0, 1e2])
        if scheme.granularity.value == "per_tensor" and rng.random() < 0.5:
            W = rng.integers(-1, 2, (M, K)).astype(float)
        q, model = _model(W, scheme)
        a = rng.standard_normal(K) * 10 ** rng.uniform(-2, 2)
        codes, scale = quantize_activations(a, scheme.activation_mode)
        ref = dequantize_reference(q) @ codes.astype(np.float64) * scale
        out = lut_gemv(model, a, hw=HW).out
        if scheme.activation_mode is ActivationMode.FP16:
            n_fp += 1
            worst_fp = max(worst_fp, oracles.rel_l2(out, ref))
        else:
            n_int += 1
            n_exact += bool(np.array_equal(out, ref))
    dt = time.perf_counter() - t0
    ok = n_exact == n_int and worst_fp <= 1e-3 and n_int + n_fp >= 1000 and dt < 120
    return ok, (f"{n_exact}/{n_int} integer-mode exact, fp16-mode worst rel err "
                f"{worst_fp:.2e} over {n_fp}, {dt:.1f}s")


def c02_gemm_oracle():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for scheme in SCHEME_PRESETS.values():
        for M, K, N in [(512, 512, 16), (256, 384, 8), (128, 512, 1), (192, 64, 16)]:
            q, model = _model(rng.standard_normal((M, K)), scheme)
            A = rng.standard_normal((N, K))
            out, _ = mp_gemm(model, A, HW)
            worst = max(worst, oracles.rel_l2(out, A @ dequantize_reference(q).T))
            n += 1
    dt = time.perf_counter() - t0
    return worst <= 1e-3 and dt < 120, f"worst rel err {worst:.2e} over {n} cases, {dt:.1f}s"


def c03_repack_ratio():
    ratios = set()
    groups = np.array(list(oracles.all_code_groups(4)), dtype=np.uint8)
    nib = np.zeros((4, len(groups)), dtype=np.uint8)
    for i in range(4):
        for j in range(4):
            nib[i] |= ((groups[:, j] >> i) & 1) << j
    for n in range(len(groups)):
        naive, lut = OpCounters(), OpCounters()
        col = nib[:, n:n + 1]
        repack_naive_nibbles(col, 4, naive)
        repack_nibbles(col, 4, lut)
        ratios.add(naive.bit_ops / lut.lut_lookups)
    return ratios == {12.0}, f"naive/LUT ratios over {len(groups)} patterns: {sorted(ratios)}"


def c04_fp_reduction():
    got = []
    for B in (64, 128):
        c = OpCounters()
        build_conv_luts(np.ones((1, 1)), np.zeros((1, 1), np.uint8), 2, c)
        naive = dequant_op_counts(B, 2, B, "convert").fp_ops
        model = dequant_op_counts(B, 2, B, "lut").fp_ops
        got.append((c.fp_ops, naive, c.fp_ops / naive, model))
    ok = got[0][2] == 1 / 16 and got[1][2] == 1 / 32 and all(g[0] == g[3] == 4 for g in got)
    return ok, "; ".join(f"{a} vs {b} -> {r}" for a, b, r, _ in got)


def c05_repack_lut_truth():
    entry = int(build_repack_lut(3)[0b0011])
    groups = list(oracles.all_code_groups(4))
    nib = np.array([[oracles.plane_nibble(g, i) for g in groups] for i in range(4)], np.uint8)
    lut = repack_nibbles(nib, 4)
    naive = repack_naive_nibbles(nib, 4)
    ok = entry == 0b0000000010001000 and np.array_equal(lut, naive) and \
        lut.tolist() == [oracles.repack_word(g) for g in groups]
    return ok, f"entry[0b0011]@shift3 = {entry:#018b}; {len(groups)} groups equal naive"


def c06_tiling():
    n, bad = 0, 0
    for prof in ("sd8gen3", "sd8elite"):
        hw = load_profile(prof)
        for scheme in SCHEME_PRESETS.values():
            for M, K in [(4096, 4096), (2560, 6912), (6912, 2560), (512, 1024)]:
                for cfg in enumerate_tilings(M, K, hw, scheme):
                    eq = oracles.check_eqns(cfg, hw.n_reg, hw.n_stage, hw.n_thread,
                                            hw.tcm_bytes, dequant_bytes(scheme))
                    n += 1
                    bad += not all(eq.values())
    top = best_tiling(4096, 4096, HW, INT4_BLOCK64)
    ok = bad == 0 and top.decoding.k_outer == 256 and top.decoding.K_lut == 16
    return ok, (f"{n - bad}/{n} configs pass the independent checker; top decode K-tile "
                f"{top.decoding.k_outer} with K_lut={top.decoding.K_lut}")


def c07_pipeline_model():
    tr = pipeline_trace(4096, 4096, 128, INT4_BLOCK64, HW)
    d = dequant_strategy_compare(4096, 4096, HW)
    conv, full = d["speedup_vs_convert"]["value"], d["speedup_vs_load_full"]["value"]
    ok = (abs(tr.speedup - 1.5) <= 0.15 and tr.overhead_vs_matmul <= 0.15
          and abs(conv / 10.2 - 1) <= 0.2 and abs(full / 4.9 - 1) <= 0.2)
    return ok, (f"speedup {tr.speedup:.3f}, overhead {tr.overhead_vs_matmul:.1%}, "
                f"vs ConvertDQ {conv:.2f}x, vs LoadFull {full:.2f}x")


def c08_vlut():
    table = {("VLUT16", 8): (0.5, 256, 1024), ("VLUT32", 8): (0.5, 128, 640),
             ("VLUT16", 16): (0.5, 128, 512), ("VLUT32", 16): (0.5, 64, 320)}
    got = {(v, b): (r["cpi"], r["lookups"], r["equiv_madds"])
           for (v, b) in table for r in [vlut_throughput(v, b)]}
    picks = {b: choose_vlut_variant(b)["variant"] for b in (8, 16)}
    return got == table and set(picks.values()) == {"VLUT16"}, f"rows {got}; picks {picks}"


def c09_graph_pass():
    rng = np.random.default_rng(909)
    parts = []
    ok = True
    for g, expect in ((go.qkv_graph(256), 3), (go.mlp_graph(256, 512), 2)):
        models = {w: _model(rng.standard_normal((s["M"], s["K"])), SCHEME_PRESETS[s["scheme"]])[1]
                  for w, s in sorted(g.weights.items())}
        x = {"x": rng.standard_normal(256)}
        before = go.execute(g, x, models)
        after = go.execute(go.dedup_precompute(go.unfuse(g)), x, models)
        same = all(np.array_equal(before.values[o], after.values[o]) for o in g.outputs)
        ok &= before.precompute_calls == expect and after.precompute_calls == 1 and same
        parts.append(f"{before.precompute_calls}->{after.precompute_calls} identical={same}")
    return ok, "; ".join(parts)


def c10_plan_independence():
    rng = np.random.default_rng(1010)
    counts, ok = [], True
    for scheme in (INT4_BLOCK64, _fp16(INT4_BLOCK64), TERNARY, _fp16(INT2_BLOCK64)):
        for M, K in [(256, 512), (512, 512)]:
            _, model = _model(rng.standard_normal((M, K)), scheme)
            a = rng.standard_normal(K)
            plans = valid_plans(model, HW)
            outs = [lut_gemv(model, a, p, HW).out for p in plans]
            ok &= len(plans) >= 5 and all(np.array_equal(outs[0], o) for o in outs)
            counts.append(len(plans))
    return ok, f"plans per model {counts}, all bit-identical={ok}"


def c11_single_copy():
    _, model = _model(np.random.default_rng(11).standard_normal((4096, 4096)), INT4_BLOCK64)
    n = len(C.dumps(model))
    weights = 4096 * 4096 * 4 // 8
    payload = weights + model.metadata_bytes
    over = n / payload - 1
    ok = model.weight_bytes == weights and over <= 0.02
    return ok, (f"{n} bytes = {weights} weight + {model.metadata_bytes} metadata "
                f"+ {n - payload} framing ({over:.4%})")


def c12_quant_proxy():
    rng = np.random.default_rng(1212)
    wins = 0
    for _ in range(100):
        W = rng.standard_t(df=3, size=(128, 256))
        s = quantization_error_stats(W, INT4_BLOCK64, INT4_CHANNEL)
        wins += s["max_err_a"] <= s["max_err_b"]
    return wins == 100, f"per-block <= per-channel max-abs error in {wins}/100 trials"


CRITERIA = [
    ("C1 decoding oracle equivalence", c01_gemv_oracle),
    ("C2 prefill oracle equivalence", c02_gemm_oracle),
    ("C3 repacking op ratio 12:1", c03_repack_ratio),
    ("C4 ConvLUT fp-op reduction", c04_fp_reduction),
    ("C5 repack LUT ground truth", c05_repack_lut_truth),
    ("C6 tiling constraints", c06_tiling),
    ("C7 pipeline / dequant model", c07_pipeline_model),
    ("C8 VLUT model", c08_vlut),
    ("C9 graph pass dedup", c09_graph_pass),
    ("C10 tiling independence", c10_plan_independence),
    ("C11 single-copy storage", c11_single_copy),
    ("C12 quantization proxy", c12_quant_proxy),
]


@pytest.mark.parametrize("name,check", CRITERIA, ids=[c[0].split()[0] for c in CRITERIA])
def test_criterion(name, check):
    ok, detail = check()
    RESULTS[name] = (ok, detail)
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for name, check in CRITERIA:
        ok, detail = check()
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    raise SystemExit(1 if failed else 0)
