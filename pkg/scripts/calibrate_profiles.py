"""Regenerate the bundled hardware profiles under src/tlut/profiles/.

Measured values (bandwidths, TCM/L2 sizes, HMX tile) are fixed inputs; the
rates listed under "fitted" are solved so the modeled ablations match the
reported ratios. Run: python scripts/calibrate_profiles.py
"""
import json
from pathlib import Path

from tlut.calibrate import Targets, calibrate
from tlut.hardware import HardwareModel

OUT = Path(__file__).resolve().parents[1] / "src" / "tlut" / "profiles"

MEASURED = dict(
    vector_bits=1024, n_reg=32, n_stage=3,
    tcm_bytes=8 * 2**20, l2_bytes=1 * 2**20, mma_dims=(32, 32, 32),
    bw_dma=59e9, bw_l2fetch=32e9, bw_vecload=20e9,
)


def write(hw: HardwareModel, notes: str):
    d = {"_notes": notes}
    d.update(hw.to_dict())
    path = OUT / f"{hw.name}.json"
    path.write_text(json.dumps(d, indent=2, sort_keys=False) + "\n")
    print("wrote", path)


def main():
    targets = Targets()
    npu = HardwareModel(name="sd8gen3", n_thread=4, bw_tcm=256e9, gemv_mac_rate=256e9,
                        **MEASURED)
    cpu = HardwareModel(name="cpu-ref", vector_bits=128, n_reg=32, n_thread=8,
                        fp_op_cost=1.0, gemv_mac_rate=200e9, bw_l2fetch=32e9,
                        bw_vecload=32e9, bw_tcm=100e9, tcm_bytes=12 * 2**20,
                        l2_bytes=2 * 2**20, mma_dims=(4, 4, 4))
    npu, cpu = calibrate(npu, cpu, targets)
    write(npu, "Snapdragon 8 Gen 3 (OnePlus 12). Bandwidths from the DMA / l2fetch / "
               "vector-load microbenchmark (4 threads). 'fitted' rates solved by "
               "scripts/calibrate_profiles.py, not measured.")
    elite = npu.with_(name="sd8elite", n_thread=6,
                      fitted=npu.fitted + ("bw_dma", "bw_l2fetch", "bw_vecload"))
    write(elite, "Snapdragon 8 Elite (OnePlus 13T). No separate measurements: memory "
                 "numbers and fitted rates copied from sd8gen3, 6 hardware threads.")
    write(cpu, "Mobile CPU reference for the GEMV latency breakdown. Dequant rate fitted "
               "to 10x the NPU's ConvertDQ rate and bandwidth fitted to the 3.8x total "
               "ratio; the MAC rate is an assumed 200 GMAC/s.")


if __name__ == "__main__":
    main()
