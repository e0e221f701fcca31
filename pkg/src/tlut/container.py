"""On-disk formats: the single-copy weight container, raw float tensors, and
benchmark reports.

Container layout (all little-endian)::

    b"TLUT1" | u16 version | u32 header_len | header JSON (utf-8)
    | tile bytes, in visit order | float32 scales | uint8 zero-points
    | u32 CRC32 of everything before it

The header fully determines decoding: logical and padded shapes, scheme,
tiling and the plane-interleave constant.
"""
from __future__ import annotations

import csv
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bitlayout import PLANE_INTERLEAVE, PackedModel, UnifiedTile
from .quantkit import QuantScheme
from .tiler import TilingConfig

MAGIC = b"TLUT1"
VERSION = 1
_PREAMBLE = struct.Struct("<5sHI")
_CRC = struct.Struct("<I")
_DIMS = struct.Struct("<QQ")

SHAPE_PRESETS = {
    # decoder projections of a BitNet-style model: every pairing of 2560 and 6912
    "bitnet": [(m, k) for m in (2560, 6912) for k in (2560, 6912)],
    "llama": [(4096, 4096)],
}
SEQLEN_DEFAULT = 128
E2E_PROMPT_TOKENS = 1024
E2E_GEN_TOKENS = 128


class ContainerError(ValueError):
    pass


# --- raw tensors -----------------------------------------------------------

def write_raw_tensor(path, array) -> None:
    a = np.asarray(array, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("raw tensors are 2-D")
    with open(path, "wb") as f:
        f.write(_DIMS.pack(*a.shape))
        f.write(a.tobytes())


def read_raw_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _DIMS.size:
        raise ContainerError("raw tensor shorter than its 16-byte header")
    M, K = _DIMS.unpack_from(data)
    if M == 0 or K == 0:
        raise ContainerError(f"empty tensor {M}x{K}")
    body = data[_DIMS.size:]
    if len(body) != M * K * 4:
        raise ContainerError(f"dims {M}x{K} need {M * K * 4} bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(M, K).astype(np.float64)


# --- weight container ------------------------------------------------------

def _header(model: PackedModel) -> dict:
    return {
        "M": model.q_M,
        "K": model.q_K,
        "M_pad": model.M_pad,
        "K_pad": model.K_pad,
        "scheme": model.scheme.to_dict(),
        "tiling": model.tiling.to_dict(),
        "plane_interleave": PLANE_INTERLEAVE,
        "n_tiles": len(model.tiles),
        "tile_bytes": len(model.tiles[0].tile_bytes) if model.tiles else 0,
        "group_shape": list(model.scales.shape),
    }


def dumps(model: PackedModel) -> bytes:
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    body = b"".join([
        _PREAMBLE.pack(MAGIC, VERSION, len(header)), header,
        *(t.tile_bytes for t in model.tiles),
        model.scales.astype("<f4").tobytes(),
        model.zero_points.astype(np.uint8).tobytes(),
    ])
    return body + _CRC.pack(zlib.crc32(body))


def loads(data: bytes) -> PackedModel:
    if len(data) < _PREAMBLE.size + _CRC.size:
        raise ContainerError("truncated container")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[:-_CRC.size]) != crc:
        raise ContainerError("checksum mismatch")
    off = _PREAMBLE.size
    h = json.loads(data[off:off + hlen])
    off += hlen
    if h["plane_interleave"] != PLANE_INTERLEAVE:
        raise ContainerError(f"unknown plane interleave {h['plane_interleave']!r}")
    scheme = QuantScheme.from_dict(h["scheme"])
    tiling = TilingConfig.from_dict(h["tiling"])
    Mt, Kt = tiling.m_tile, tiling.k_tile
    nk = h["K_pad"] // Kt
    n_tiles, tb = h["n_tiles"], h["tile_bytes"]
    gshape = tuple(h["group_shape"])
    n_groups = int(np.prod(gshape))
    expected = off + n_tiles * tb + n_groups * 5 + _CRC.size
    if len(data) != expected:
        raise ContainerError(f"payload size {len(data)} does not match header ({expected})")
    tiles = []
    for t in range(n_tiles):
        mi, ki = divmod(t, nk)
        tiles.append(UnifiedTile(t, mi * Mt, ki * Kt, (Mt, Kt), scheme.bits,
                                 bytes(data[off:off + tb])))
        off += tb
    scales = np.frombuffer(data, "<f4", n_groups, off).astype(np.float64).reshape(gshape)
    off += n_groups * 4
    zps = np.frombuffer(data, np.uint8, n_groups, off).copy().reshape(gshape)
    return PackedModel(h["M"], h["K"], h["M_pad"], h["K_pad"], scheme, tiling, tiles, scales, zps)


def save(model: PackedModel, path) -> int:
    data = dumps(model)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> PackedModel:
    return loads(Path(path).read_bytes())


def payload_bytes(model: PackedModel) -> int:
    """Bytes the weights themselves need: packed codes plus group table."""
    return model.weight_bytes + model.metadata_bytes


def framing_overhead(model: PackedModel) -> float:
    """Fraction of container bytes beyond the weight payload."""
    return len(dumps(model)) / payload_bytes(model) - 1.0


# --- reports ---------------------------------------------------------------

def ratio(num: float, den: float) -> dict:
    return {"value": num / den if den else float("inf"), "num": num, "den": den}


CSV_FIELDS = ["kernel", "shape", "scheme", "hw", "metric", "value", "num", "den"]


@dataclass
class BenchReport:
    kernel: str
    shape: list[int]
    scheme: dict
    hw: str
    latency: dict = field(default_factory=dict)
    ratios: dict = field(default_factory=dict)
    error: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kernel": self.kernel, "shape": list(self.shape), "scheme": self.scheme,
                "hw": self.hw, "latency": self.latency, "ratios": self.ratios,
                "error": self.error, "extra": self.extra}

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), sort_keys=True, indent=2)

    def csv_rows(self) -> list[dict]:
        base = {"kernel": self.kernel, "shape": "x".join(map(str, self.shape)),
                "scheme": _scheme_tag(self.scheme), "hw": self.hw}
        rows = []
        for k, v in sorted(_flatten(self.latency, "latency").items()):
            rows.append(dict(base, metric=k, value=v, num="", den=""))
        for k, r in sorted(self.ratios.items()):
            rows.append(dict(base, metric=f"ratio.{k}", value=r["value"], num=r["num"], den=r["den"]))
        for k, v in sorted(_flatten(self.error, "error").items()):
            rows.append(dict(base, metric=k, value=v, num="", den=""))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.csv_rows())
        return buf.getvalue()


def _scheme_tag(s: dict) -> str:
    g = s.get("granularity", "")
    tag = f"int{s.get('bits')}-{g}"
    if g == "per_block":
        tag += f"{s.get('block_size')}"
    return tag


def _flatten(d: dict, prefix: str) -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}.{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key))
        else:
            out[key] = v
    return out


def _plain(x):
    """numpy scalars/arrays -> JSON-native types."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    return x
