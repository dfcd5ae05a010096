"""intglab: integral, differential, signed and softmax attention at desk scale."""
from .attention import ScoreVariant
from .backbone import ModelConfig, TransformerLM, param_count, preset
from .kernels import BACKEND
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ModelConfig",
    "ScoreVariant",
    "Tensor",
    "TransformerLM",
    "backward",
    "grad_check",
    "no_grad",
    "param_count",
    "preset",
]
