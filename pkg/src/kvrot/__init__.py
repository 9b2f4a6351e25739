"""Rotated INT4 KV-cache quantization with paged storage and serving simulation."""

__version__ = "0.1.0"

from ._kernels import available_backends, get_backend
from .artifact import CalibrationArtifact, load_artifact, save_artifact
from .attention import DecodeRequest, decode_step, decode_step_fp
from .cache import BF16, INT4, PageTable, capacity_tokens
from .errors import KvrotError
from .hadamard import HadamardMatrix, block_hadamard_matrix, fwht_blocks, make_hadamard
from .harness import (
    ErrorReport,
    MethodConfig,
    SyntheticSpec,
    default_methods,
    emit_report,
    generate_kv,
    method_from_name,
    run_matrix,
    run_profile,
)
from .int4 import PackedNibbles, QuantParams, dequantize_head, pack, quantize_head, unpack
from .layout import HeadLayout
from .rotation import (
    RotationSpec,
    SecondMoment,
    Targets,
    accumulate_queries,
    apply_block_rotation,
    apply_inverse_rotation,
    learn_rotation,
    make_signs,
)
from .sim import CostModel, ServingTrace, WorkloadSpec, simulate, tps_req, tps_sys, ttft
from .vq import Codebook, VqCode, decode, encode, fit_codebook

__all__ = [
    "__version__",
    "available_backends",
    "get_backend",
    "CalibrationArtifact",
    "load_artifact",
    "save_artifact",
    "DecodeRequest",
    "decode_step",
    "decode_step_fp",
    "BF16",
    "INT4",
    "PageTable",
    "capacity_tokens",
    "KvrotError",
    "HadamardMatrix",
    "block_hadamard_matrix",
    "fwht_blocks",
    "make_hadamard",
    "ErrorReport",
    "MethodConfig",
    "SyntheticSpec",
    "default_methods",
    "emit_report",
    "generate_kv",
    "method_from_name",
    "run_matrix",
    "run_profile",
    "PackedNibbles",
    "QuantParams",
    "dequantize_head",
    "pack",
    "quantize_head",
    "unpack",
    "HeadLayout",
    "RotationSpec",
    "SecondMoment",
    "Targets",
    "accumulate_queries",
    "apply_block_rotation",
    "apply_inverse_rotation",
    "learn_rotation",
    "make_signs",
    "CostModel",
    "ServingTrace",
    "WorkloadSpec",
    "simulate",
    "tps_req",
    "tps_sys",
    "ttft",
    "Codebook",
    "VqCode",
    "decode",
    "encode",
    "fit_codebook",
]
