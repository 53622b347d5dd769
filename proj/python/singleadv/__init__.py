"""Single-class universal adversarial perturbations against interpretable classifiers."""

from ._core import (
    Classifier,
    ParameterError,
    ShapeError,
    apply_defense,
    apply_perturbation,
    attack,
    category_names,
    evaluate,
    interpret,
    iou,
    load_classifier,
    run_cli,
    synthetic_shapes,
    train_classifier,
)

__all__ = [
    "Classifier",
    "ParameterError",
    "ShapeError",
    "apply_defense",
    "apply_perturbation",
    "attack",
    "category_names",
    "evaluate",
    "interpret",
    "iou",
    "load_classifier",
    "run_cli",
    "synthetic_shapes",
    "train_classifier",
]
