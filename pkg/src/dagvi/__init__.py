"""Variational inference over DAGs with a differentiable, always-acyclic sampler."""

__version__ = "0.1.0"

from .estimator import VariationalDAGLearner  # noqa: E402
from .sampler import PosteriorParams, is_acyclic, sample_dag  # noqa: E402
from .sem import Dataset, load_dataset, make_dataset, save_dataset  # noqa: E402
from .vi import PriorSpec, TrainConfig, train  # noqa: E402

__all__ = [
    "__version__",
    "VariationalDAGLearner",
    "PosteriorParams",
    "is_acyclic",
    "sample_dag",
    "Dataset",
    "make_dataset",
    "load_dataset",
    "save_dataset",
    "PriorSpec",
    "TrainConfig",
    "train",
]
