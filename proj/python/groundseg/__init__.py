"""Grounded segmentation toy model: synthetic data, training, evaluation."""

from ._groundseg import (
    DataError,
    InvalidInput,
    bleu4,
    checkpoint_arrays,
    dataset_summary,
    default_config,
    evaluate,
    fragment_count,
    generate_dataset,
    grad_check,
    grad_check_fixtures,
    iou,
    token_f1,
    train,
)

__all__ = [
    "DataError",
    "InvalidInput",
    "bleu4",
    "checkpoint_arrays",
    "dataset_summary",
    "default_config",
    "evaluate",
    "fragment_count",
    "generate_dataset",
    "grad_check",
    "grad_check_fixtures",
    "iou",
    "token_f1",
    "train",
]
