"""Multimodal point-cloud and image place recognition."""

from ._fuseloc import (
    Dataset,
    Model,
    NumericError,
    batch_hard_mine,
    generate_synthetic,
    pool,
    recall_at_n,
    run_cli,
)

__all__ = [
    "Dataset",
    "Model",
    "NumericError",
    "batch_hard_mine",
    "generate_synthetic",
    "pool",
    "recall_at_n",
    "run_cli",
]
