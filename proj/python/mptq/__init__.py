"""Mixed-precision post-training quantization for a toy ViT encoder.

Thin Python layer over the C++ core in :mod:`mptq._core`. Plans, reports and
configs are plain dictionaries; tensors are float32 numpy arrays.
"""

from __future__ import annotations

import json
from typing import Any, Sequence

from . import _core
from ._core import (
    AllocationError,
    DimensionError,
    EncodingError,
    FitError,
    InputError,
    IoError,
    LookupError,
    MptqError,
    PipelineError,
    QuantizedModel,
    RegionQuantizer,
    ToyViT,
    compute_m1,
    fake_quantize,
    fit_region_quantizer,
    load_model,
    make_synthetic_tokens,
    minmax_scale,
    sqnr_db,
)

__all__ = [
    "AllocationError",
    "DimensionError",
    "EncodingError",
    "FitError",
    "InputError",
    "IoError",
    "LookupError",
    "MptqError",
    "PipelineError",
    "QuantizedModel",
    "RegionQuantizer",
    "ToyViT",
    "cli_main",
    "compute_m1",
    "fake_quantize",
    "fit_region_quantizer",
    "greedy_allocate",
    "load_model",
    "make_synthetic_tokens",
    "make_toy_vit",
    "minmax_scale",
    "model_config",
    "run_mptq",
    "sqnr_db",
]


def make_toy_vit(seed: int = 0, **arch: int) -> ToyViT:
    """Seeded toy model. Keyword arguments override the default architecture
    (patch_dim, embed_dim, depth, heads, mlp_dim, classes)."""
    return _core.make_toy_vit(json.dumps(arch), seed)


def model_config(model: ToyViT) -> dict[str, int]:
    return json.loads(model.config_json)


def greedy_allocate(
    table: Sequence[Sequence[float]],
    numel: Sequence[int],
    target: float,
    metric: str = "sqnr-times-lognumel",
) -> dict[str, Any]:
    """Greedy bit allocation from an SQNR table where ``table[i][b]`` is the
    SQNR of layer ``i`` at ``b`` bits (``b`` in 0..8). Returns the plan."""
    return json.loads(_core.greedy_allocate_json([list(r) for r in table], list(numel), target, metric))


def run_mptq(model: ToyViT, data, config: dict[str, Any] | None = None):
    """Full pipeline on in-memory inputs. Returns ``(quantized, plan, report)``."""
    quantized, plan, report = _core.run_mptq_json(model, data, json.dumps(config or {}))
    return quantized, json.loads(plan), json.loads(report)


def cli_main(args: Sequence[str]) -> int:
    """Runs the command-line tool in-process and returns its exit code."""
    return _core.cli_main(list(args))
