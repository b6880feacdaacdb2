"""Knowledge-graph embeddings by generalized CP decomposition with analytic gradients."""

__version__ = "0.1.0"

from .gcp import (  # noqa: E402
    Batch,
    Bernoulli,
    FactorModel,
    Gaussian,
    GradSlices,
    bernoulli_deriv,
    bernoulli_loss,
    full_loss,
    gcp_grad,
    predict_entry,
)
from .tensor_core import TripleStore, Vocabulary, build_store  # noqa: E402
from .trainer import TrainConfig, lr_at_epoch, train  # noqa: E402
from .evaluator import EvalReport, evaluate, rank_of, score_all  # noqa: E402
from .data_io import load_dataset, load_model, save_model  # noqa: E402

__all__ = [
    "Batch", "Bernoulli", "FactorModel", "Gaussian", "GradSlices", "bernoulli_deriv",
    "bernoulli_loss", "full_loss", "gcp_grad", "predict_entry", "TripleStore", "Vocabulary",
    "build_store", "TrainConfig", "lr_at_epoch", "train", "EvalReport", "evaluate", "rank_of",
    "score_all", "load_dataset", "load_model", "save_model",
]
