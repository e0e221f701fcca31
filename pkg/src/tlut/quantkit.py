"""Weight and activation quantization, plus the float reference dequantizer.

Every LUT kernel in the package is checked against :func:`dequantize_reference`.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# smallest positive normal float16, used as the step of all-equal groups
DEGENERATE_SCALE = float(np.finfo(np.float16).tiny)


class Granularity(str, Enum):
    PER_BLOCK = "per_block"
    PER_CHANNEL = "per_channel"
    PER_TENSOR = "per_tensor"


class ActivationMode(str, Enum):
    FP16 = "fp16"
    INT16 = "int16"
    INT8 = "int8"

    @property
    def bits(self) -> int:
        return {"fp16": 16, "int16": 16, "int8": 8}[self.value]


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantScheme:
    bits: int = 4
    granularity: Granularity = Granularity.PER_BLOCK
    block_size: int = 64
    symmetric: bool = False
    activation_mode: ActivationMode = ActivationMode.INT16

    def __post_init__(self):
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        object.__setattr__(self, "activation_mode", ActivationMode(self.activation_mode))
        if not 1 <= self.bits <= 8:
            raise QuantizationError(f"bits must be in 1..8, got {self.bits}")
        if self.symmetric and self.bits < 2:
            raise QuantizationError("symmetric quantization needs at least 2 bits")
        if self.granularity is Granularity.PER_BLOCK and self.block_size <= 0:
            raise QuantizationError("block_size must be positive")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def midpoint(self) -> int:
        return 1 << (self.bits - 1)

    def group_block(self, K: int) -> int:
        """Number of consecutive K elements sharing one group."""
        if self.granularity is Granularity.PER_BLOCK:
            return self.block_size
        return K

    def group_shape(self, M: int, K: int) -> tuple[int, int]:
        if self.granularity is Granularity.PER_BLOCK:
            return M, K // self.block_size
        if self.granularity is Granularity.PER_CHANNEL:
            return M, 1
        return 1, 1

    def check_shape(self, M: int, K: int) -> None:
        if M <= 0 or K <= 0:
            raise QuantizationError(f"empty matrix {M}x{K}")
        if self.granularity is Granularity.PER_BLOCK and K % self.block_size:
            raise QuantizationError(
                f"block size {self.block_size} does not divide K={K}")

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "granularity": self.granularity.value,
            "block_size": self.block_size,
            "symmetric": self.symmetric,
            "activation_mode": self.activation_mode.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantScheme":
        return cls(**d)


# Presets used throughout the evaluation: GPTQ-style per-block asymmetric
# INT4/INT2 and BitNet ternary stored as 2-bit per-tensor.
INT4_BLOCK64 = QuantScheme(4, Granularity.PER_BLOCK, 64, False, ActivationMode.INT16)
INT2_BLOCK64 = QuantScheme(2, Granularity.PER_BLOCK, 64, False, ActivationMode.INT16)
INT4_CHANNEL = QuantScheme(4, Granularity.PER_CHANNEL, 64, False, ActivationMode.INT16)
TERNARY = QuantScheme(2, Granularity.PER_TENSOR, 64, True, ActivationMode.INT16)

SCHEME_PRESETS = {
    "int4-b64": INT4_BLOCK64,
    "int2-b64": INT2_BLOCK64,
    "int4-channel": INT4_CHANNEL,
    "ternary": TERNARY,
}


@dataclass(frozen=True)
class QuantGroup:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise QuantizationError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    """Logical (pre-packing) quantized weights.

    ``scales`` and ``zero_points`` have shape ``scheme.group_shape(M, K)``.
    """

    M: int
    K: int
    scheme: QuantScheme
    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray

    def __post_init__(self):
        for arr in (self.codes, self.scales, self.zero_points):
            arr.setflags(write=False)
        if self.codes.shape != (self.M, self.K):
            raise QuantizationError(f"codes shape {self.codes.shape} != {(self.M, self.K)}")
        if self.scales.shape != self.scheme.group_shape(self.M, self.K):
            raise QuantizationError("group table shape does not match scheme")
        if self.codes.min() < 0 or self.codes.max() > self.scheme.qmax:
            raise QuantizationError("code out of range")

    @property
    def n_groups(self) -> int:
        return self.scales.size

    def group(self, m: int, blk: int = 0) -> QuantGroup:
        gm = m if self.scales.shape[0] > 1 else 0
        gb = blk if self.scales.shape[1] > 1 else 0
        return QuantGroup(float(self.scales[gm, gb]), int(self.zero_points[gm, gb]))

    def expand(self, table: np.ndarray) -> np.ndarray:
        """Broadcast a per-group table to the full M x K grid."""
        gm, gk = table.shape
        out = np.repeat(table, self.M // gm, axis=0)
        return np.repeat(out, self.K // gk, axis=1)

    def __eq__(self, other):
        if not isinstance(other, QuantizedMatrix):
            return NotImplemented
        return (self.M == other.M and self.K == other.K and self.scheme == other.scheme
                and np.array_equal(self.codes, other.codes)
                and np.array_equal(self.scales, other.scales)
                and np.array_equal(self.zero_points, other.zero_points))


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _group_view(w: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Reshape M x K to (gM, gK, elements-per-group)."""
    M, K = w.shape
    if scheme.granularity is Granularity.PER_BLOCK:
        B = scheme.block_size
        return w.reshape(M, K // B, B)
    if scheme.granularity is Granularity.PER_CHANNEL:
        return w.reshape(M, 1, K)
    return w.reshape(1, 1, M * K)


def _from_group_view(g: np.ndarray, M: int, K: int) -> np.ndarray:
    return g.reshape(M, K)


def quantize(weights, scheme: QuantScheme) -> QuantizedMatrix:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise QuantizationError(f"expected a 2-D matrix, got shape {w.shape}")
    M, K = w.shape
    scheme.check_shape(M, K)
    if not np.all(np.isfinite(w)):
        raise QuantizationError("weights contain NaN or Inf")

    g = _group_view(w, scheme)
    if scheme.symmetric:
        amax = np.abs(g).max(axis=-1)
        scale = amax / (scheme.midpoint - 1)
        degenerate = amax == 0
        scale = np.where(degenerate, DEGENERATE_SCALE, scale)
        scale = np.maximum(scale.astype(np.float32).astype(np.float64), DEGENERATE_SCALE)
        zp = np.full(scale.shape, scheme.midpoint, dtype=np.int64)
    else:
        # the grid always contains 0 so the integer zero-point stays in range
        lo = np.minimum(g.min(axis=-1), 0.0)
        hi = np.maximum(g.max(axis=-1), 0.0)
        scale = (hi - lo) / scheme.qmax
        degenerate = hi == lo
        scale = np.where(degenerate, DEGENERATE_SCALE, scale)
        # scales below the float16 grid would vanish in the conversion tables
        scale = np.maximum(scale.astype(np.float32).astype(np.float64), DEGENERATE_SCALE)
        zp = np.clip(round_half_away(-lo / scale), 0, scheme.qmax).astype(np.int64)

    # a group holding one non-zero value encodes it exactly as zp +- 1 step
    gmin, gmax = g.min(axis=-1), g.max(axis=-1)
    single = (gmin == gmax) & (gmax != 0)
    if np.any(single):
        c = np.where(single, gmax, 1.0)
        scale = np.where(single, np.maximum(np.abs(c).astype(np.float32).astype(np.float64),
                                            DEGENERATE_SCALE), scale)
        if not scheme.symmetric:
            zp = np.where(single & (c < 0), 1, np.where(single, 0, zp))

    codes = round_half_away(g / scale[..., None]) + zp[..., None]
    codes = np.clip(codes, 0, scheme.qmax).astype(np.uint8)
    codes = _from_group_view(codes, M, K)
    return QuantizedMatrix(M, K, scheme, codes, scale, zp.astype(np.uint8))


def dequantize_reference(q: QuantizedMatrix) -> np.ndarray:
    scales = q.expand(q.scales)
    zps = q.expand(q.zero_points.astype(np.int64))
    return (q.codes.astype(np.int64) - zps) * scales


def quantize_activations(a, mode: ActivationMode | str):
    """Per-tensor symmetric activation quantization.

    Returns ``(codes, act_scale)``. In fp16 mode the "codes" are the input
    rounded to the float16 grid and the scale is 1.
    """
    mode = ActivationMode(mode)
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise QuantizationError("activations contain NaN or Inf")
    if mode is ActivationMode.FP16:
        return a.astype(np.float16).astype(np.float64), 1.0
    qmax = (1 << (mode.bits - 1)) - 1
    amax = np.abs(a).max() if a.size else 0.0
    if amax == 0:
        return np.zeros(a.shape, dtype=np.int64), 1.0
    scale = amax / qmax
    codes = np.clip(round_half_away(a / scale), -qmax, qmax).astype(np.int64)
    return codes, float(scale)


def quantization_error_stats(w, scheme_a: QuantScheme, scheme_b: QuantScheme) -> dict:
    w = np.asarray(w, dtype=np.float64)
    out = {}
    for tag, scheme in (("a", scheme_a), ("b", scheme_b)):
        err = w - dequantize_reference(quantize(w, scheme))
        out[f"mse_{tag}"] = float(np.mean(err ** 2))
        out[f"max_err_{tag}"] = float(np.max(np.abs(err)))
    return out
