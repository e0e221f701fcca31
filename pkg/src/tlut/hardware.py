"""NPU hardware parameters and the bundled device profiles."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

PROFILE_NAMES = ("sd8gen3", "sd8elite", "cpu-ref")


@dataclass(frozen=True)
class HardwareModel:
    """Analytic device description.

    Bandwidths are bytes/s. ``vec_op_rate`` is the aggregate vector-core
    throughput in simple integer ops (shift, and, or, table lookup) per
    second; one float op (convert, multiply, add) costs ``fp_op_cost`` of
    those. ``mm_rate`` is matrix-core MACs/s and ``gemv_mac_rate`` the
    vector-core MAC rate used for the CMP stage of a dequant-then-GEMV.
    """

    name: str = "custom"
    vector_bits: int = 1024
    n_reg: int = 32
    n_thread: int = 4
    n_stage: int = 3
    tcm_bytes: int = 8 * 2**20
    l2_bytes: int = 1 * 2**20
    mma_dims: tuple[int, int, int] = (32, 32, 32)
    clock_hz: float = 1.0e9
    bw_dma: float = 59e9
    bw_l2fetch: float = 32e9
    bw_vecload: float = 20e9
    bw_tcm: float = 256e9
    vec_op_rate: float = 1.0e12
    fp_op_cost: float = 1.0
    mm_rate: float = 4.0e12
    gemv_mac_rate: float = 256e9
    lut_cpi: float = 0.5
    reserved_regs: int = 4
    fitted: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "mma_dims", tuple(self.mma_dims))
        object.__setattr__(self, "fitted", tuple(self.fitted))
        rates = ("clock_hz", "bw_dma", "bw_l2fetch", "bw_vecload", "bw_tcm",
                 "vec_op_rate", "fp_op_cost", "mm_rate", "gemv_mac_rate", "lut_cpi")
        for name in rates:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if min(self.vector_bits, self.n_reg, self.n_thread, self.n_stage) <= 0:
            raise ValueError("vector_bits, n_reg, n_thread and n_stage must be positive")

    @property
    def vector_bytes(self) -> int:
        return self.vector_bits // 8

    def lookup_lanes(self, entry_bits: int = 16) -> int:
        """Output channels served by one vector lookup (M_d_lookups)."""
        return self.vector_bits // entry_bits

    def k_per_lut(self, entry_bits: int = 16, group: int = 4) -> int:
        """K positions whose tables fit in one vector register."""
        tables_per_reg = self.vector_bits // entry_bits // (1 << group)
        return max(tables_per_reg, 1) * group

    def with_(self, **kw) -> "HardwareModel":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mma_dims"] = list(self.mma_dims)
        d["fitted"] = list(self.fitted)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareModel":
        d = {k: v for k, v in d.items() if not k.startswith("_")}
        return cls(**d)


def load_profile(name_or_path: str | Path) -> HardwareModel:
    """Load a bundled profile by name, or any profile JSON file by path."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    elif str(name_or_path) in PROFILE_NAMES:
        text = resources.files("tlut.profiles").joinpath(f"{name_or_path}.json").read_text()
    else:
        raise FileNotFoundError(f"unknown hardware profile {name_or_path!r}")
    return HardwareModel.from_dict(json.loads(text))
