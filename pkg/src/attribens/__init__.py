"""Gradient-based training data attribution with efficient ensembling.

Four single-model attribution methods (projected-gradient kernel scores,
conjugate-gradient influence, gradient dot/cosine), four ensembling
strategies over them (independent, dropout-masked, forward-only
dropout-masked, LoRA fine-tuned, plus checkpoint reuse), and a linear
datamodeling score harness with brute-force oracles and deterministic
pass-count accounting.
"""

__version__ = "0.1.0"

from .nn import DropoutMask, LayerKind, LayerSpec, LoraAdapter, Mode, sample_mask
from .models import (
    Arch,
    ModelSpec,
    ParamVector,
    attach_lora,
    build_linear_classifier,
    build_mlp,
    build_tiny_transformer,
    default_lora_targets,
    init_params,
    param_count,
)
from .grads import ModelView, OutputFn, per_sample_grad, per_sample_grads

__all__ = [
    "DropoutMask",
    "LayerKind",
    "LayerSpec",
    "LoraAdapter",
    "Mode",
    "sample_mask",
    "Arch",
    "ModelSpec",
    "ParamVector",
    "attach_lora",
    "build_linear_classifier",
    "build_mlp",
    "build_tiny_transformer",
    "default_lora_targets",
    "init_params",
    "param_count",
    "ModelView",
    "OutputFn",
    "per_sample_grad",
    "per_sample_grads",
]
