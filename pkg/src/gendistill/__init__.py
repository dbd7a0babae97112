"""Generative dataset distillation with a one-step class-prompted generator.

The pipeline turns class names into prompts, generates a fixed number of
images per class under a wall-clock budget, optionally multiplies that set
with post data augmentation, and scores it by training a small ConvNet.
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    BudgetSpec,
    DatasetError,
    DatasetSpec,
    DistilledDataset,
    ImageBatch,
    LabeledImages,
    LabelRegistry,
    Provenance,
    load_distilled,
    save_distilled,
)
from .generation import BudgetExceededError, distill_dataset  # noqa: E402
from .pda import AugmentationSpec, ExpansionPlan, expand_dataset  # noqa: E402
from .evaluator import EvalReport, TrainConfig, repeat_evaluate  # noqa: E402

__all__ = [
    "AugmentationSpec",
    "BudgetExceededError",
    "BudgetSpec",
    "DatasetError",
    "DatasetSpec",
    "DistilledDataset",
    "EvalReport",
    "ExpansionPlan",
    "ImageBatch",
    "LabeledImages",
    "LabelRegistry",
    "Provenance",
    "TrainConfig",
    "distill_dataset",
    "expand_dataset",
    "load_distilled",
    "repeat_evaluate",
    "save_distilled",
]
