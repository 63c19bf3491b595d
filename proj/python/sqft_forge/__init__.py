# Copyright (c) 2026, The sqft-forge Authors
# SPDX-License-Identifier: Apache-2.0
"""Python bindings for the sqft-forge compression pipeline."""

import json as _json

from ._core import (
    CheckpointFormatError,
    ConfigError,
    InvariantError,
    build_mask,
    dequantize,
    heuristic_config,
    hill_climb,
    load_checkpoint,
    merge_qa,
    merge_sparsepeft,
    quantize_gptq_lite,
    quantize_rtn,
    run_pipeline_json,
    save_checkpoint,
    score_magnitude,
    score_wanda,
)

__all__ = [
    "CheckpointFormatError",
    "ConfigError",
    "InvariantError",
    "build_mask",
    "dequantize",
    "heuristic_config",
    "hill_climb",
    "load_checkpoint",
    "merge_qa",
    "merge_sparsepeft",
    "quantize_gptq_lite",
    "quantize_rtn",
    "run_pipeline",
    "save_checkpoint",
    "score_magnitude",
    "score_wanda",
]


def run_pipeline(config=None, out_dir=None):
    """Run the full pipeline; `config` is a dict with the CLI config keys."""
    text = _json.dumps(config or {})
    return run_pipeline_json(text, "" if out_dir is None else str(out_dir))
