"""Command-line front end.

Exit codes: 0 ok, 1 bad input, 2 oracle tolerance exceeded (or saturation
under --strict), 3 infeasible tiling.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import container as C
from . import graphopt
from .bitlayout import build_unified_layout, unpack
from .hardware import PROFILE_NAMES, load_profile
from .lutgemv import lut_gemv, spill_report
from .prefillpipe import (FootprintError, dequant_strategy_compare, gemv_breakdown, mp_gemm,
                          pipeline_trace)
from .quantkit import (SCHEME_PRESETS, ActivationMode, Granularity, QuantizationError,
                       QuantScheme, dequantize_reference, quantize, quantize_activations)
from .tiler import TilingInfeasible, best_tiling, enumerate_tilings

EXIT_INPUT, EXIT_TOLERANCE, EXIT_INFEASIBLE = 1, 2, 3
TOLERANCE = 1e-3


def _scheme(args) -> QuantScheme:
    base = SCHEME_PRESETS[args.scheme]
    overrides = {k: v for k, v in (("bits", args.bits), ("block_size", args.block),
                                   ("granularity", args.granularity),
                                   ("activation_mode", args.act_mode)) if v is not None}
    d = dict(base.to_dict(), **overrides)
    if args.symmetric:
        d["symmetric"] = True
    return QuantScheme.from_dict(d)


def _add_scheme_args(p):
    p.add_argument("--scheme", default="int4-b64", choices=sorted(SCHEME_PRESETS))
    p.add_argument("--bits", type=int)
    p.add_argument("--block", type=int)
    p.add_argument("--granularity", choices=[g.value for g in Granularity])
    p.add_argument("--act-mode", choices=[m.value for m in ActivationMode])
    p.add_argument("--symmetric", action="store_true")


def _emit(obj, fmt_json=True):
    print(json.dumps(C._plain(obj), sort_keys=True, indent=2) if fmt_json else obj)


def cmd_quantize(args):
    W = C.read_raw_tensor(args.input)
    scheme = _scheme(args)
    hw = load_profile(args.hw)
    q = quantize(W, scheme)
    tiling = best_tiling(q.M, q.K, hw, scheme)
    model = build_unified_layout(q, tiling, hw)
    n = C.save(model, args.output)
    _emit({"output": args.output, "bytes": n, "M": q.M, "K": q.K, "scheme": scheme.to_dict(),
           "m_tile": tiling.m_tile, "k_tile": tiling.k_tile,
           "framing_overhead": C.framing_overhead(model)})


def cmd_unpack(args):
    model = C.load(args.container)
    W = dequantize_reference(unpack(model))
    C.write_raw_tensor(args.output, W)
    _emit({"output": args.output, "M": model.q_M, "K": model.q_K})


def _bench_model(args, hw):
    if args.container:
        return C.load(args.container)
    M, K = args.shape
    scheme = _scheme(args)
    W = np.random.default_rng(args.seed).standard_normal((M, K))
    q = quantize(W, scheme)
    return build_unified_layout(q, best_tiling(M, K, hw, scheme), hw)


def _rel_err(out, ref) -> float:
    den = np.linalg.norm(ref)
    return float(np.linalg.norm(out - ref) / den) if den else float(np.linalg.norm(out))


def cmd_bench(args):
    hw = load_profile(args.hw)
    model = _bench_model(args, hw)
    rng = np.random.default_rng(args.seed + 1)
    ref_w = dequantize_reference(unpack(model))
    M, K = model.q_M, model.q_K
    report = C.BenchReport(args.kernel, [M, K] if args.kernel == "gemv" else [M, K, args.seqlen],
                           model.scheme.to_dict(), hw.name)
    if args.kernel == "gemv":
        a = rng.standard_normal(K)
        res = lut_gemv(model, a, hw=hw)
        codes, scale = quantize_activations(a, model.scheme.activation_mode)
        ref = ref_w @ codes.astype(np.float64) * scale
        err = _rel_err(res.out, ref)
        report.error = {"rel_l2": err, "max_abs": float(np.max(np.abs(res.out - ref))),
                        "saturated": res.saturated}
        cpu = load_profile("cpu-ref")
        bd = gemv_breakdown(M, K, hw, cpu, model.scheme.bits, model.scheme.block_size)
        report.latency = {"npu": bd["npu"], "cpu": bd["cpu"]}
        report.ratios = {"npu_vs_cpu_total": bd["ratio_total"], "npu_vs_cpu_dq": bd["ratio_dq"]}
        sp = spill_report(model.tiling.decoding, hw)
        report.extra = {"counters": vars(res.counters), "spill": vars(sp),
                        "spill_traffic_measured": res.spill_traffic}
        saturated = res.saturated
    else:
        A = rng.standard_normal((args.seqlen, K))
        out, trace = mp_gemm(model, A, hw)
        ref = A @ ref_w.T
        err = _rel_err(out, ref)
        report.error = {"rel_l2": err, "max_abs": float(np.max(np.abs(out - ref)))}
        report.latency = trace.summary()
        report.ratios = {
            "pipeline_speedup": C.ratio(trace.sequential_latency, trace.pipelined_latency),
            "overhead_vs_matmul": C.ratio(trace.pipelined_latency - trace.matmul_only_latency,
                                          trace.matmul_only_latency)}
        saturated = False
    report.extra["tolerance"] = args.tol
    if args.json:
        with open(args.json, "w") as f:
            f.write(report.to_json())
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.to_csv())
    if not (args.json or args.csv):
        print(report.to_json())
    if err > args.tol:
        print(f"oracle check failed: relative error {err:.3e} > {args.tol:.1e}", file=sys.stderr)
        return EXIT_TOLERANCE
    if saturated and args.strict:
        print("activation tables saturated (strict mode)", file=sys.stderr)
        return EXIT_TOLERANCE
    return 0


def cmd_search_tiling(args):
    hw = load_profile(args.hw)
    if args.tcm is not None:
        hw = hw.with_(tcm_bytes=args.tcm)
    scheme = _scheme(args)
    cfgs = enumerate_tilings(args.M, args.K, hw, scheme, args.N)
    _emit({"hw": hw.name, "M": args.M, "K": args.K, "count": len(cfgs),
           "configs": [dict(c.to_dict(), m_tile=c.m_tile, k_tile=c.k_tile,
                            decode_k_tile=c.decoding.k_tile, s_tile=c.s_tile)
                       for c in cfgs[:args.top]]})


def cmd_pipeline(args):
    hw = load_profile(args.hw)
    scheme = _scheme(args)
    tr = pipeline_trace(args.M, args.K, args.N, scheme, hw)
    dq = dequant_strategy_compare(args.M, args.K, hw, args.dq_bits, args.dq_block)
    _emit({"hw": hw.name, "shape": [args.M, args.K, args.N], "pipeline": tr.summary(),
           "dequant": dq})


def cmd_graph_demo(args):
    if args.graph:
        with open(args.graph) as f:
            g = graphopt.KernelGraph.from_json(f.read())
    else:
        g = graphopt.qkv_graph(args.hidden) if args.preset == "qkv" else \
            graphopt.mlp_graph(args.hidden, 2 * args.hidden)
    hw = load_profile(args.hw)
    rng = np.random.default_rng(args.seed)
    models = {}
    for wid, spec in sorted(g.weights.items()):
        s = SCHEME_PRESETS[spec.get("scheme", "int4-b64")]
        q = quantize(rng.standard_normal((spec["M"], spec["K"])), s)
        models[wid] = build_unified_layout(q, best_tiling(spec["M"], spec["K"], hw, s), hw)
    inputs = {n.id: rng.standard_normal(_input_len(g, n.id)) for n in g.nodes if n.op == "input"}
    before = graphopt.execute(g, inputs, models)
    opt = graphopt.dedup_precompute(graphopt.unfuse(g))
    after = graphopt.execute(opt, inputs, models)
    identical = all(np.array_equal(before.values[o], after.values[o]) for o in g.outputs)
    _emit({"precompute_before": before.precompute_calls, "precompute_after": after.precompute_calls,
           "table_builds_before": before.table_builds, "table_builds_after": after.table_builds,
           "bit_identical": identical, "graph": opt.to_dict()})
    return 0 if identical else EXIT_TOLERANCE


def _input_len(g, node_id) -> int:
    for n in g.nodes:
        if n.op == graphopt.FUSED and n.inputs == [node_id]:
            return g.weights[n.weight]["K"]
    raise graphopt.GraphError(f"cannot infer the length of input {node_id}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tlut", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    q = sub.add_parser("quantize", help="raw float tensor -> weight container")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--hw", default="sd8gen3")
    _add_scheme_args(q)
    q.set_defaults(fn=cmd_quantize)

    u = sub.add_parser("unpack", help="weight container -> dequantized raw tensor")
    u.add_argument("container")
    u.add_argument("output")
    u.set_defaults(fn=cmd_unpack)

    b = sub.add_parser("bench", help="oracle check, then modeled latency")
    b.add_argument("container", nargs="?")
    b.add_argument("--shape", type=int, nargs=2, metavar=("M", "K"), default=(4096, 4096))
    b.add_argument("--kernel", choices=["gemv", "gemm"], default="gemv")
    b.add_argument("--hw", default="sd8gen3")
    b.add_argument("--seqlen", type=int, default=C.SEQLEN_DEFAULT)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--tol", type=float, default=TOLERANCE)
    b.add_argument("--strict", action="store_true", help="treat table saturation as failure")
    b.add_argument("--json")
    b.add_argument("--csv")
    _add_scheme_args(b)
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("search-tiling", help="list feasible tilings, best first")
    s.add_argument("M", type=int)
    s.add_argument("K", type=int)
    s.add_argument("-N", type=int, default=C.SEQLEN_DEFAULT)
    s.add_argument("--hw", default="sd8gen3")
    s.add_argument("--tcm", type=int, help="override TCM bytes")
    s.add_argument("--top", type=int, default=5)
    _add_scheme_args(s)
    s.set_defaults(fn=cmd_search_tiling)

    pl = sub.add_parser("pipeline", help="prefill pipeline and dequant-strategy model")
    pl.add_argument("M", type=int, nargs="?", default=4096)
    pl.add_argument("K", type=int, nargs="?", default=4096)
    pl.add_argument("N", type=int, nargs="?", default=C.SEQLEN_DEFAULT)
    pl.add_argument("--hw", default="sd8gen3")
    pl.add_argument("--dq-bits", type=int, default=2)
    pl.add_argument("--dq-block", type=int, default=64)
    _add_scheme_args(pl)
    pl.set_defaults(fn=cmd_pipeline)

    g = sub.add_parser("graph-demo", help="unfuse + dedup precompute on a graph")
    g.add_argument("graph", nargs="?", help="graph JSON; default is a preset")
    g.add_argument("--preset", choices=["qkv", "mlp"], default="qkv")
    g.add_argument("--hidden", type=int, default=256)
    g.add_argument("--hw", default="sd8gen3")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_graph_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args) or 0
    except (TilingInfeasible, FootprintError) as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (C.ContainerError, QuantizationError, graphopt.GraphError, ValueError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
