"""Model-output functions and per-sample gradient drivers.

A "sample" is (features row, class label) for classifiers or
(token sequence, next-token targets) for sequence models. Every scalar
output function exposes its value and its cotangent with respect to the
model logits, which the nn engine pulls back to parameter space.
"""

from __future__ import annotations

from enum import Enum
from typing import Optional

import numpy as np

from . import nn
from .errors import NumericError, ShapeError
from .models import ModelSpec
from .nn import DropoutMask, LoraAdapter, Mode

__all__ = [
    "OutputFn",
    "ModelView",
    "output_value_and_dlogits",
    "per_sample_grad",
    "per_sample_grads",
    "batch_loss_and_grad",
    "correct_class_probs",
    "logits_for",
    "grad_dim",
]


class OutputFn(str, Enum):
    LOSS = "loss"
    LOG_LIKELIHOOD = "log_likelihood"
    MARGIN = "margin"


class ModelView:
    """A model fixed for attribution: spec + params, optionally seen
    through a dropout mask and/or LoRA adapters, optionally with gradients
    restricted to adapter parameters."""

    def __init__(self, spec: ModelSpec, params: np.ndarray,
                 mask: Optional[DropoutMask] = None,
                 adapters: Optional[list[LoraAdapter]] = None,
                 adapter_grads_only: bool = False):
        if adapter_grads_only and not adapters:
            raise ValueError("adapter_grads_only requires adapters")
        self.spec = spec
        self.params = np.asarray(params, dtype=np.float64)
        self.mask = mask
        self.adapters = adapters
        self.adapter_grads_only = adapter_grads_only
        self.mode = Mode.MASKED_EVAL if mask is not None else Mode.EVAL

    def grad_dim(self) -> int:
        if self.adapter_grads_only:
            assert self.adapters is not None
            return sum(ad.n_params() for ad in self.adapters)
        return self.spec.n_params()


def grad_dim(view: ModelView) -> int:
    return view.grad_dim()


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def expand_binary(z: np.ndarray) -> np.ndarray:
    """Single-logit binary heads score class 1; class 0 carries an implicit
    zero logit. This keeps their gradient space full-rank (no zero-sum
    degeneracy across logits)."""
    return np.concatenate([np.zeros_like(z), z], axis=-1)


def _row_value_and_grad(z: np.ndarray, label: int, fn: OutputFn) -> tuple[float, np.ndarray]:
    if z.size == 1:
        val, grad2 = _row_value_and_grad(expand_binary(z), label, fn)
        return val, grad2[1:2]
    logp = _log_softmax(z)
    p = np.exp(logp)
    onehot = np.zeros_like(z)
    onehot[label] = 1.0
    if fn == OutputFn.LOSS:
        return -logp[label], p - onehot
    if fn == OutputFn.LOG_LIKELIHOOD:
        return logp[label], onehot - p
    # margin: log p_correct - log(1 - p_correct) == z_y - logsumexp(others)
    others = np.delete(z, label)
    lse_others = others.max() + np.log(np.exp(others - others.max()).sum())
    grad = np.zeros_like(z)
    soft_others = np.exp(_log_softmax(others))
    grad[np.arange(z.size) != label] = -soft_others
    grad[label] = 1.0
    return z[label] - lse_others, grad


def output_value_and_dlogits(logits: np.ndarray, target, fn: OutputFn,
                             sequence: bool) -> tuple[float, np.ndarray]:
    """Scalar model-output value and its gradient w.r.t. the logits.

    Sequence samples sum the per-position value for margin/log-likelihood
    and average it for the loss (matching the training objective).
    """
    if not sequence:
        return _row_value_and_grad(logits, int(target), fn)
    targets = np.asarray(target, dtype=np.int64)
    if logits.shape[0] != targets.size:
        raise ShapeError("targets do not align with sequence positions")
    total = 0.0
    dlogits = np.zeros_like(logits)
    for t in range(targets.size):
        val, row = _row_value_and_grad(logits[t], int(targets[t]), fn)
        total += val
        dlogits[t] = row
    if fn == OutputFn.LOSS:
        return total / targets.size, dlogits / targets.size
    return total, dlogits


def _sample_input(view: ModelView, features_or_tokens) -> np.ndarray:
    if view.spec.is_sequence_model():
        return np.asarray(features_or_tokens)
    return np.asarray(features_or_tokens, dtype=np.float64).reshape(1, -1)


def logits_for(view: ModelView, features_or_tokens) -> np.ndarray:
    """Logits for one sample: (classes,) for classifiers, (T, vocab) for
    sequence models."""
    out = nn.forward(view.spec.layers, view.params, _sample_input(view, features_or_tokens),
                     mode=view.mode, mask=view.mask, adapters=view.adapters)
    return out if view.spec.is_sequence_model() else out[0]


def per_sample_grad(view: ModelView, features_or_tokens, target,
                    fn: OutputFn) -> np.ndarray:
    """Flat gradient of the chosen scalar output for one sample."""
    x = _sample_input(view, features_or_tokens)
    out, trace = nn.run_forward_trace(view.spec.layers, view.params, x,
                                      mode=view.mode, mask=view.mask,
                                      adapters=view.adapters)
    seq = view.spec.is_sequence_model()
    logits = out if seq else out[0]
    _, dlogits = output_value_and_dlogits(logits, target, fn, seq)
    dout = dlogits if seq else dlogits.reshape(1, -1)
    return nn.backward_params(view.spec.layers, view.params, trace, dout,
                              adapters=view.adapters,
                              adapters_only=view.adapter_grads_only)


def _flat_per_sample_grads(view: ModelView, X: np.ndarray, labels: np.ndarray,
                           fn: OutputFn) -> np.ndarray:
    """Per-sample gradients for a flat-stack chunk in one batched pass.

    The whole chunk shares a forward/backward sweep; Linear weight
    cotangents are expanded per row with an einsum instead of a Python
    loop over samples.
    """
    layers = view.spec.layers
    pvw = nn.ParamView(layers, view.params)
    ad_map = nn._adapters_by_target(layers, view.adapters)
    out, trace = nn.run_forward_trace(layers, view.params, X, mode=view.mode,
                                      mask=view.mask, adapters=view.adapters)
    B = X.shape[0]
    dlogits = np.empty_like(out)
    for i in range(B):
        _, dlogits[i] = _row_value_and_grad(out[i], int(labels[i]), fn)

    sink = _PerRowSink(pvw, view.adapters, view.adapter_grads_only, B)
    dy = dlogits
    for rec in reversed(trace):
        layer: nn.LayerSpec = rec["layer"]
        if layer.kind == nn.LayerKind.LINEAR:
            x = rec["x"]
            W = pvw.get(layer.name, "W")
            sink.add(layer.name, "W", np.einsum("bo,bi->boi", dy, x))
            sink.add(layer.name, "b", dy)
            dx = dy @ W
            ad = ad_map.get((layer.name, "W"))
            if ad is not None:
                s = ad.scaling()
                du = s * (dy @ ad.B)
                dx = dx + du @ ad.A
                sink.add_adapter(ad, np.einsum("br,bi->bri", du, x),
                                 s * np.einsum("bo,br->bor", dy, rec["u"]),
                                 dy if ad.bias_delta is not None else None)
            dy = dx
        elif layer.kind == nn.LayerKind.RELU:
            dy = dy * (rec["x"] > 0.0)
        elif layer.kind == nn.LayerKind.DROPOUT:
            mult = rec["mult"]
            dy = dy if mult is None else dy * mult
        elif layer.kind == nn.LayerKind.SOFTMAX:
            dy = nn._softmax_vjp(rec["y"], dy)
        elif layer.kind == nn.LayerKind.LAYERNORM:
            xhat, inv = rec["xhat"], rec["inv"]
            g = pvw.get(layer.name, "g")
            sink.add(layer.name, "g", dy * xhat)
            sink.add(layer.name, "b", dy)
            dxhat = dy * g
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dy = inv * (dxhat - m1 - xhat * m2)
        else:
            raise ShapeError(f"layer kind {layer.kind} not valid in a flat stack")
    grads = sink.grads
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient")
    return grads


class _PerRowSink:
    """Per-row analogue of nn.GradSink: rows of a (B, grad_dim) matrix."""

    def __init__(self, pvw: nn.ParamView, adapters, adapters_only: bool, rows: int):
        self.pvw = pvw
        self.adapters_only = adapters_only
        self.adapter_slots: dict[int, int] = {}
        if adapters_only:
            offset = 0
            for ad in adapters or []:
                self.adapter_slots[id(ad)] = offset
                offset += ad.n_params()
            self.grads = np.zeros((rows, offset))
        else:
            self.grads = np.zeros((rows, pvw.total))

    def add(self, lname: str, pname: str, per_row: np.ndarray) -> None:
        if self.adapters_only:
            return
        offset, shape = self.pvw.slot(lname, pname)
        size = int(np.prod(shape))
        self.grads[:, offset : offset + size] += per_row.reshape(per_row.shape[0], size)

    def add_adapter(self, ad, dA_rows, dB_rows, dbias_rows) -> None:
        if not self.adapters_only:
            return
        base = self.adapter_slots[id(ad)]
        rows = dA_rows.shape[0]
        self.grads[:, base : base + ad.A.size] += dA_rows.reshape(rows, -1)
        base += ad.A.size
        self.grads[:, base : base + ad.B.size] += dB_rows.reshape(rows, -1)
        base += ad.B.size
        if ad.bias_delta is not None and dbias_rows is not None:
            self.grads[:, base : base + ad.bias_delta.size] += dbias_rows


def per_sample_grads(view: ModelView, inputs: np.ndarray, targets: np.ndarray,
                     fn: OutputFn, chunk: int = 0) -> np.ndarray:
    """(rows, grad_dim) matrix of per-sample gradients.

    Flat stacks are processed in batched chunks; sequence models one
    sequence at a time (chunking has no effect there).
    """
    rows = inputs.shape[0]
    if view.spec.is_sequence_model():
        out = np.empty((rows, view.grad_dim()))
        for i in range(rows):
            out[i] = per_sample_grad(view, inputs[i], targets[i], fn)
        return out
    if chunk <= 0:
        chunk = rows
    out = np.empty((rows, view.grad_dim()))
    for start in range(0, rows, chunk):
        stop = min(start + chunk, rows)
        out[start:stop] = _flat_per_sample_grads(view, inputs[start:stop],
                                                 targets[start:stop], fn)
    return out


def correct_class_probs(view: ModelView, inputs: np.ndarray,
                        targets: np.ndarray) -> np.ndarray:
    """p(correct prediction) per sample; sequence samples average over
    positions so values stay in [0, 1]. Forward passes only."""
    rows = inputs.shape[0]
    probs = np.empty(rows)
    if view.spec.is_sequence_model():
        for i in range(rows):
            logits = logits_for(view, inputs[i])
            logp = _log_softmax(logits)
            tgt = np.asarray(targets[i], dtype=np.int64)
            probs[i] = np.exp(logp[np.arange(tgt.size), tgt]).mean()
        return probs
    logits = nn.forward(view.spec.layers, view.params,
                        np.asarray(inputs, dtype=np.float64),
                        mode=view.mode, mask=view.mask, adapters=view.adapters)
    if logits.shape[-1] == 1:
        logits = expand_binary(logits)
    logp = _log_softmax(logits)
    return np.exp(logp[np.arange(rows), np.asarray(targets, dtype=np.int64)])


def batch_loss_and_grad(view: ModelView, inputs: np.ndarray, targets: np.ndarray,
                        mode: Mode = Mode.EVAL,
                        train_rng: Optional[np.random.Generator] = None
                        ) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its single summed gradient
    (the training workhorse; no per-sample expansion)."""
    layers = view.spec.layers
    B = inputs.shape[0]
    if view.spec.is_sequence_model():
        total = 0.0
        grad = np.zeros(view.grad_dim())
        for i in range(B):
            out, trace = nn.run_forward_trace(layers, view.params, inputs[i],
                                              mode=mode, mask=view.mask,
                                              adapters=view.adapters, train_rng=train_rng)
            val, dlogits = output_value_and_dlogits(out, targets[i], OutputFn.LOSS, True)
            total += val
            grad += nn.backward_params(layers, view.params, trace, dlogits,
                                       adapters=view.adapters,
                                       adapters_only=view.adapter_grads_only)
        return total / B, grad / B
    out, trace = nn.run_forward_trace(layers, view.params,
                                      np.asarray(inputs, dtype=np.float64),
                                      mode=mode, mask=view.mask,
                                      adapters=view.adapters, train_rng=train_rng)
    logp = _log_softmax(expand_binary(out) if out.shape[-1] == 1 else out)
    labels = np.asarray(targets, dtype=np.int64)
    loss = -logp[np.arange(B), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    if out.shape[-1] == 1:
        dlogits = dlogits[:, 1:2]
    grad = nn.backward_params(layers, view.params, trace, dlogits,
                              adapters=view.adapters,
                              adapters_only=view.adapter_grads_only)
    return loss, grad
