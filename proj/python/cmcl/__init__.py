from ._cmcl import (
    Error,
    NumericalError,
    ShapeError,
    ValidationError,
    __version__,
    class_weights,
    cmcl_loss,
    contrastive_loss,
    generate_corpus,
    gradient_suite,
    metrics,
    run,
    silhouette,
)

__all__ = [
    "Error",
    "NumericalError",
    "ShapeError",
    "ValidationError",
    "__version__",
    "class_weights",
    "cmcl_loss",
    "contrastive_loss",
    "generate_corpus",
    "gradient_suite",
    "metrics",
    "run",
    "silhouette",
]
