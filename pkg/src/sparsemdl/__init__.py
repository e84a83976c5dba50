"""Sparse training of small networks by description-length minimization."""

from .model import MaskedModel, MlpSpec, description_length, init_model, mlp_forward
from .regularizers import RegularizerSpec
from .training import Phase, TrainPlan, train

__all__ = [
    "MaskedModel",
    "MlpSpec",
    "Phase",
    "RegularizerSpec",
    "TrainPlan",
    "description_length",
    "init_model",
    "mlp_forward",
    "train",
]
