"""Unified table-lookup kernels for low-bit LLM inference on NPUs."""
from .bitlayout import (BitSerialPlanes, OpCounters, PackedModel, UnifiedTile,
                        build_unified_layout, pack_bit_serial, unpack)
from .hardware import HardwareModel, load_profile
from .lutgemv import choose_vlut_variant, lut_gemv, precompute_act_luts, spill_report
from .prefillpipe import dequant_strategy_compare, gemv_breakdown, mp_gemm
from .quantkit import (ActivationMode, Granularity, QuantGroup, QuantScheme, QuantizedMatrix,
                       dequantize_reference, quantize, quantize_activations)
from .tiler import TilingConfig, best_tiling, enumerate_tilings, validate_tiling

__version__ = "0.1.0"
