"""Model-level ablations: dequant strategies, pipelining, GEMV breakdown,
accumulator spill and VLUT variants. Writes one JSON document to stdout or --out.

    python scripts/run_ablations.py --hw sd8gen3 --out ablations.json
"""
import argparse
import dataclasses
import json

from tlut.container import SHAPE_PRESETS, _plain
from tlut.hardware import load_profile
from tlut.lutgemv import choose_vlut_variant, spill_report
from tlut.prefillpipe import dequant_strategy_compare, gemv_breakdown, pipeline_trace
from tlut.quantkit import INT2_BLOCK64, INT4_BLOCK64, TERNARY
from tlut.tiler import best_tiling


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--hw", default="sd8gen3")
    p.add_argument("--seqlen", type=int, default=128)
    p.add_argument("--out")
    args = p.parse_args()
    hw = load_profile(args.hw)
    cpu = load_profile("cpu-ref")

    res = {"hw": hw.name, "dequant": {}, "pipeline": {}, "spill": {}}
    for bits in (2, 4):
        res["dequant"][f"int{bits}-b64"] = dequant_strategy_compare(4096, 4096, hw, bits, 64)
    shapes = SHAPE_PRESETS["llama"] + SHAPE_PRESETS["bitnet"]
    for name, scheme in (("int4-b64", INT4_BLOCK64), ("int2-b64", INT2_BLOCK64),
                         ("ternary", TERNARY)):
        for M, K in shapes:
            tr = pipeline_trace(M, K, args.seqlen, scheme, hw)
            res["pipeline"][f"{name}/{M}x{K}"] = tr.summary()
    res["gemv_breakdown"] = gemv_breakdown(4096, 4096, hw, cpu)
    plan = best_tiling(4096, 4096, hw, INT4_BLOCK64).decoding
    for m_iter in (4, 8, 16, 32, 64):
        st = spill_report(dataclasses.replace(plan, M_iter=m_iter), hw)
        res["spill"][f"M_iter={m_iter}"] = vars(st)
    res["vlut"] = {b: choose_vlut_variant(b, hw.lut_cpi) for b in (8, 16)}

    text = json.dumps(_plain(res), indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        print(text)


if __name__ == "__main__":
    main()
