"""Age regression and gender classification CNNs on a from-scratch autodiff engine."""

from .data import FaceRecord, Manifest
from .model import ModelSpec, Task, build_default_age_model, build_default_gender_model
from .tensor import Tensor
from .train import TrainConfig

__all__ = [
    "FaceRecord",
    "Manifest",
    "ModelSpec",
    "Task",
    "Tensor",
    "TrainConfig",
    "build_default_age_model",
    "build_default_gender_model",
]
__version__ = "0.1.0"
