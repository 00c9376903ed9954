"""Multi-task collaborative pretraining and adaptive-token fine-tuning of a 3D ViT, on numpy."""

from .autograd import Tensor, backward, grad_check, no_grad
from .encoder import EncoderConfig, ViTEncoder
from .mats import FinetuneConfig, FinetuneModel, MATSConfig, mutual_attention_scores, select_tokens
from .pretrain import AblationMode, LossWeights, PretrainConfig, PretrainModel
from .synth import PhantomSpec, build_dataset, generate_phantom

__version__ = "0.1.0"

__all__ = [
    "AblationMode",
    "EncoderConfig",
    "FinetuneConfig",
    "FinetuneModel",
    "LossWeights",
    "MATSConfig",
    "PhantomSpec",
    "PretrainConfig",
    "PretrainModel",
    "Tensor",
    "ViTEncoder",
    "backward",
    "build_dataset",
    "generate_phantom",
    "grad_check",
    "mutual_attention_scores",
    "no_grad",
    "select_tokens",
]
