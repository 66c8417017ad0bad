"""iflab: influence estimation at validation minima for noisy-label detection.

The functional core lives in the submodules (``numerics``, ``model``,
``optim``, ``data``, ``influence``, ``bounds``, ``metrics``,
``experiments``); ``estimators`` wraps it in the scikit-learn API and
``cli`` exposes it on the command line.
"""
__version__ = "0.1.0"

from .data import Dataset, NoiseSpec, load_dataset, save_dataset
from .estimators import InfluenceScorer, SoftmaxClassifier
from .influence import EstimatorConfig, InfluenceReport, score_dataset
from .model import Checkpoint, ModelSpec
from .numerics import RngState

__all__ = [
    "__version__",
    "Checkpoint",
    "Dataset",
    "EstimatorConfig",
    "InfluenceReport",
    "InfluenceScorer",
    "ModelSpec",
    "NoiseSpec",
    "RngState",
    "SoftmaxClassifier",
    "load_dataset",
    "save_dataset",
    "score_dataset",
]
