"""Model definitions, the flat parameter layout, LoRA attachment,
and ensemble parameter-count accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import nn
from .nn import LayerKind, LayerSpec, LoraAdapter
from .rng import keyed_generator

__all__ = [
    "Arch",
    "ModelSpec",
    "ParamVector",
    "build_mlp",
    "build_linear_classifier",
    "build_tiny_transformer",
    "init_params",
    "attach_lora",
    "default_lora_targets",
    "param_count",
    "CountReport",
]


class Arch(str, Enum):
    MLP = "mlp"
    TINY_TRANSFORMER = "tiny_transformer"


@dataclass(frozen=True)
class ModelSpec:
    arch: Arch
    layers: list[LayerSpec]
    input_dim: int
    output_dim: int
    vocab_size: int = 0
    context_len: int = 0

    def is_sequence_model(self) -> bool:
        return self.layers[0].kind == LayerKind.EMBEDDING

    def dropout_widths(self) -> dict[str, int]:
        return nn.dropout_layer_widths(self.layers)

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, _, s in nn.layer_param_shapes(self.layers))


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus its (layer, param, shape, offset)
    layout. The layout is a pure function of the layer list, so two models
    built from the same spec always share addressing."""

    layout: list[tuple[str, str, tuple[int, ...], int]]
    data: np.ndarray

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamVector":
        layout = []
        offset = 0
        for lname, pname, shape in nn.layer_param_shapes(spec.layers):
            layout.append((lname, pname, shape, offset))
            offset += int(np.prod(shape))
        return cls(layout=layout, data=np.zeros(offset))

    def copy(self) -> "ParamVector":
        return ParamVector(layout=list(self.layout), data=self.data.copy())

    def get(self, lname: str, pname: str) -> np.ndarray:
        for name, param, shape, offset in self.layout:
            if name == lname and param == pname:
                return self.data[offset : offset + int(np.prod(shape))].reshape(shape)
        raise KeyError(f"no parameter {lname}.{pname}")

    def header_layout(self) -> list[list]:
        return [[n, p, list(s), o] for n, p, s, o in self.layout]


def _validate_chain(layers: list[LayerSpec]) -> None:
    names = [l.name for l in layers]
    if len(set(names)) != len(names):
        raise ValueError("layer names must be unique within a model")


def build_mlp(input_dim: int, hidden: list[int], output_dim: int,
              dropout_rate: float) -> ModelSpec:
    """Linear -> ReLU -> Dropout per hidden width, then a final Linear.

    With two hidden layers this places dropout after the first two linear
    layers, the arrangement used for the MNIST-style classifier.
    """
    if input_dim < 1 or output_dim < 1 or any(h < 1 for h in hidden):
        raise ValueError("dimensions must be positive")
    if not hidden:
        raise ValueError("hidden layer list must be non-empty")
    layers: list[LayerSpec] = []
    prev = input_dim
    for i, width in enumerate(hidden, start=1):
        layers.append(LayerSpec(LayerKind.LINEAR, f"fc{i}", prev, width))
        layers.append(LayerSpec(LayerKind.RELU, f"relu{i}", width, width))
        layers.append(LayerSpec(LayerKind.DROPOUT, f"drop{i}", width, width,
                                dropout_rate=dropout_rate))
        prev = width
    layers.append(LayerSpec(LayerKind.LINEAR, f"fc{len(hidden) + 1}", prev, output_dim))
    _validate_chain(layers)
    return ModelSpec(Arch.MLP, layers, input_dim, output_dim)


def build_linear_classifier(input_dim: int, output_dim: int) -> ModelSpec:
    """Single Linear layer (softmax applied by the loss): the convex model
    used by brute-force oracles."""
    layers = [LayerSpec(LayerKind.LINEAR, "fc1", input_dim, output_dim)]
    return ModelSpec(Arch.MLP, layers, input_dim, output_dim)


def build_tiny_transformer(vocab_size: int, context_len: int, d_model: int,
                           n_heads: int, n_layers: int, d_ff: int,
                           dropout_rate: float) -> ModelSpec:
    """Decoder-only causal transformer at desk scale.

    Each block is Attention (residual inside) -> LayerNorm -> feed-forward
    -> Dropout; a final LayerNorm feeds an untied output projection. The
    attention projections are addressable as "layer{i}.Wq" etc. for
    adapter targeting.
    """
    if d_model % n_heads != 0:
        raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    if vocab_size < 2 or context_len < 1 or n_layers < 1:
        raise ValueError("transformer dimensions must be positive (vocab >= 2)")
    layers: list[LayerSpec] = [
        LayerSpec(LayerKind.EMBEDDING, "embed", 1, d_model,
                  vocab_size=vocab_size, context_len=context_len)
    ]
    for i in range(n_layers):
        layers.append(LayerSpec(LayerKind.ATTENTION, f"layer{i}", d_model, d_model,
                                n_heads=n_heads))
        layers.append(LayerSpec(LayerKind.LAYERNORM, f"ln{i}", d_model, d_model))
        layers.append(LayerSpec(LayerKind.LINEAR, f"ff{i}_in", d_model, d_ff))
        layers.append(LayerSpec(LayerKind.RELU, f"ff{i}_act", d_ff, d_ff))
        layers.append(LayerSpec(LayerKind.LINEAR, f"ff{i}_out", d_ff, d_model))
        layers.append(LayerSpec(LayerKind.DROPOUT, f"drop{i}", d_model, d_model,
                                dropout_rate=dropout_rate))
    layers.append(LayerSpec(LayerKind.LAYERNORM, "ln_f", d_model, d_model))
    layers.append(LayerSpec(LayerKind.LINEAR, "head", d_model, vocab_size))
    _validate_chain(layers)
    return ModelSpec(Arch.TINY_TRANSFORMER, layers, context_len, vocab_size,
                     vocab_size=vocab_size, context_len=context_len)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Seeded initialization: Kaiming-uniform linear/attention weights,
    zero biases, unit LayerNorm gains, N(0, 0.02) embeddings."""
    pv = ParamVector.zeros(spec)
    for layer in spec.layers:
        rng = keyed_generator(seed, "init", layer.name)
        if layer.kind == LayerKind.LINEAR:
            bound = np.sqrt(6.0 / layer.in_dim)
            pv.get(layer.name, "W")[:] = rng.uniform(-bound, bound,
                                                     size=(layer.out_dim, layer.in_dim))
        elif layer.kind == LayerKind.ATTENTION:
            bound = np.sqrt(6.0 / layer.out_dim)
            for pname in ("Wq", "Wk", "Wv", "Wo"):
                pv.get(layer.name, pname)[:] = rng.uniform(
                    -bound, bound, size=(layer.out_dim, layer.out_dim))
        elif layer.kind == LayerKind.LAYERNORM:
            pv.get(layer.name, "g")[:] = 1.0
        elif layer.kind == LayerKind.EMBEDDING:
            pv.get(layer.name, "tok")[:] = rng.normal(0.0, 0.02,
                                                      size=(layer.vocab_size, layer.out_dim))
            pv.get(layer.name, "pos")[:] = rng.normal(0.0, 0.02,
                                                      size=(layer.context_len, layer.out_dim))
    return pv


def default_lora_targets(spec: ModelSpec) -> list[str]:
    """All Wq and Wv projections, the standard adapter placement."""
    targets = []
    for layer in spec.layers:
        if layer.kind == LayerKind.ATTENTION:
            targets.extend([f"{layer.name}.Wq", f"{layer.name}.Wv"])
    return targets


def _target_dims(spec: ModelSpec, target: str) -> tuple[int, int]:
    by_name = {l.name: l for l in spec.layers}
    if target in by_name and by_name[target].kind == LayerKind.LINEAR:
        layer = by_name[target]
        return layer.in_dim, layer.out_dim
    if "." in target:
        lname, pname = target.rsplit(".", 1)
        layer = by_name.get(lname)
        if layer is not None and layer.kind == LayerKind.ATTENTION and \
                pname in ("Wq", "Wk", "Wv", "Wo"):
            return layer.out_dim, layer.out_dim
    raise KeyError(f"adapter target not found in model: {target!r}")


def attach_lora(spec: ModelSpec, base: ParamVector, targets: list[str],
                rank: int, alpha: float, seed: int,
                trainable_bias: bool = True) -> list[LoraAdapter]:
    """One zero-initialized adapter per target; `base` is only consulted
    for validation and never written."""
    del base  # dimensions come from the spec; base params stay untouched
    adapters = []
    for target in targets:
        in_dim, out_dim = _target_dims(spec, target)
        rng = keyed_generator(seed, "lora_init", target)
        adapters.append(nn.init_lora_adapter(target, in_dim, out_dim, rank, alpha,
                                             rng, trainable_bias=trainable_bias))
    return adapters


@dataclass(frozen=True)
class CountReport:
    base_params: int
    members: int
    adapters_per_member: int
    adapter_params_each: dict = field(default_factory=dict)
    adapter_params_total: int = 0
    total: int = 0


def param_count(spec: ModelSpec, members: int = 1, dropout_passes: int = 1,
                lora_sets: int = 0, rank: int = 8,
                targets: Optional[list[str]] = None,
                trainable_bias: bool = True) -> CountReport:
    """Stored-parameter accounting for an ensemble.

    Total = members x base, plus members x lora_sets x adapter params when
    adapters are in play. Dropout passes reuse the stored models, so
    `dropout_passes` never changes the count.
    """
    if members < 1 or dropout_passes < 1 or lora_sets < 0:
        raise ValueError("ensemble shape out of range")
    base = spec.n_params()
    per_target = {}
    if lora_sets > 0:
        for target in (targets if targets is not None else default_lora_targets(spec)):
            in_dim, out_dim = _target_dims(spec, target)
            per_target[target] = nn.adapter_param_count(rank, in_dim, out_dim,
                                                        bias=trainable_bias)
    adapters_total = sum(per_target.values())
    total = members * base + members * lora_sets * adapters_total
    return CountReport(base_params=base, members=members,
                       adapters_per_member=lora_sets,
                       adapter_params_each=per_target,
                       adapter_params_total=adapters_total, total=total)
