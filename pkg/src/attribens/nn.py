"""Dense compute core: fixed layer vocabulary with manual reverse-mode
(per-sample) gradients and forward-mode tangents.

The engine understands two stack shapes:

* flat stacks (Linear/ReLU/Dropout/Softmax/LayerNorm) operate on a
  (rows, features) batch where each row is an independent sample;
* sequence stacks start with an Embedding layer, take one token sequence
  at a time, and carry (positions, features) activations through causal
  Attention blocks.

All arrays are float64. Layers are pure functions of (params, input,
mode); dropout randomness comes either from a caller-supplied generator
(Train mode) or from a regenerable `DropoutMask` (MaskedEval mode).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import MaskError, NumericError, ShapeError
from .rng import keyed_uniform

__all__ = [
    "LayerKind",
    "Mode",
    "LayerSpec",
    "DropoutMask",
    "LoraAdapter",
    "sample_mask",
    "forward",
    "backward_params",
    "jvp_outputs",
    "init_lora_adapter",
    "adapter_param_count",
]


class LayerKind(str, Enum):
    LINEAR = "linear"
    RELU = "relu"
    DROPOUT = "dropout"
    SOFTMAX = "softmax"
    ATTENTION = "attention"
    LAYERNORM = "layernorm"
    EMBEDDING = "embedding"


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"
    MASKED_EVAL = "masked_eval"


LN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    """One layer in a model chain. `name` is unique within a model.

    in_dim/out_dim are feature widths. Attention uses n_heads; Embedding
    uses vocab_size (in_dim is ignored) and context_len rows of the
    positional table.
    """

    kind: LayerKind
    name: str
    in_dim: int
    out_dim: int
    dropout_rate: float = 0.0
    n_heads: int = 1
    vocab_size: int = 0
    context_len: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1): {self.dropout_rate}")
        if self.kind == LayerKind.ATTENTION and self.out_dim % self.n_heads != 0:
            raise ValueError(
                f"attention width {self.out_dim} not divisible by {self.n_heads} heads"
            )


@dataclass(frozen=True)
class DropoutMask:
    """Fixed keep/drop pattern per Dropout layer, regenerable from its key.

    bits[name] is a float64 0/1 vector as wide as that layer; `rate` is the
    drop probability the bits were sampled at (also the inverted-scaling
    denominator when applied).
    """

    member_seed: int
    mask_index: int
    rate: float
    bits: dict[str, np.ndarray] = field(default_factory=dict)

    def scale(self) -> float:
        return 1.0 / (1.0 - self.rate)


@dataclass
class LoraAdapter:
    """Low-rank delta for one linear projection: W + (alpha/rank) * B @ A.

    target names either a Linear layer ("fc1") or a projection inside an
    attention layer ("layer0.Wq"). B starts at zero so a fresh adapter
    leaves the model unchanged; bias_delta is None when biases are frozen.
    """

    target: str
    rank: int
    alpha: float
    A: np.ndarray  # (rank, in_dim)
    B: np.ndarray  # (out_dim, rank)
    bias_delta: Optional[np.ndarray]  # (out_dim,)

    def scaling(self) -> float:
        return self.alpha / self.rank

    def n_params(self) -> int:
        n = self.A.size + self.B.size
        if self.bias_delta is not None:
            n += self.bias_delta.size
        return n


def adapter_param_count(rank: int, in_dim: int, out_dim: int, bias: bool = True) -> int:
    return rank * (in_dim + out_dim) + (out_dim if bias else 0)


def sample_mask(
    member_seed: int,
    mask_index: int,
    rate: float,
    layer_widths: dict[str, int],
) -> DropoutMask:
    """Draw one fixed dropout mask.

    Each bit is Bernoulli(1 - rate), keyed by (member_seed, mask_index,
    layer name, unit index), so regeneration is exact and independent of
    evaluation order or chunking.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1): {rate}")
    bits: dict[str, np.ndarray] = {}
    for name in sorted(layer_widths):
        width = layer_widths[name]
        if rate == 0.0:
            bits[name] = np.ones(width)
            continue
        u = np.array(
            [keyed_uniform(member_seed, mask_index, name, unit) for unit in range(width)]
        )
        bits[name] = (u >= rate).astype(np.float64)
    return DropoutMask(member_seed=member_seed, mask_index=mask_index, rate=rate, bits=bits)


def dropout_layer_widths(layers: list[LayerSpec]) -> dict[str, int]:
    return {l.name: l.out_dim for l in layers if l.kind == LayerKind.DROPOUT}


# ---------------------------------------------------------------------------
# parameter addressing


def _layer_param_names(layer: LayerSpec) -> list[tuple[str, tuple[int, ...]]]:
    k = layer.kind
    if k == LayerKind.LINEAR:
        return [("W", (layer.out_dim, layer.in_dim)), ("b", (layer.out_dim,))]
    if k == LayerKind.LAYERNORM:
        return [("g", (layer.out_dim,)), ("b", (layer.out_dim,))]
    if k == LayerKind.EMBEDDING:
        return [
            ("tok", (layer.vocab_size, layer.out_dim)),
            ("pos", (layer.context_len, layer.out_dim)),
        ]
    if k == LayerKind.ATTENTION:
        d = layer.out_dim
        return [
            ("Wq", (d, d)), ("bq", (d,)),
            ("Wk", (d, d)), ("bk", (d,)),
            ("Wv", (d, d)), ("bv", (d,)),
            ("Wo", (d, d)), ("bo", (d,)),
        ]
    return []


def layer_param_shapes(layers: list[LayerSpec]) -> list[tuple[str, str, tuple[int, ...]]]:
    """(layer name, param name, shape) triples in model order."""
    out = []
    for layer in layers:
        for pname, shape in _layer_param_names(layer):
            out.append((layer.name, pname, shape))
    return out


class ParamView:
    """Read access to named parameter blocks of a flat float64 vector."""

    def __init__(self, layers: list[LayerSpec], data: np.ndarray):
        self._index: dict[tuple[str, str], tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for lname, pname, shape in layer_param_shapes(layers):
            size = int(np.prod(shape))
            self._index[(lname, pname)] = (offset, shape)
            offset += size
        if data.shape != (offset,):
            raise ShapeError(f"parameter vector has length {data.shape}, expected ({offset},)")
        self.data = data
        self.total = offset

    def get(self, lname: str, pname: str) -> np.ndarray:
        offset, shape = self._index[(lname, pname)]
        return self.data[offset : offset + int(np.prod(shape))].reshape(shape)

    def slot(self, lname: str, pname: str) -> tuple[int, tuple[int, ...]]:
        return self._index[(lname, pname)]


def _adapters_by_target(
    layers: list[LayerSpec], adapters: Optional[list[LoraAdapter]]
) -> dict[tuple[str, str], LoraAdapter]:
    """Map (layer, param) -> adapter, validating targets against the chain."""
    if not adapters:
        return {}
    known = {l.name: l for l in layers}
    out: dict[tuple[str, str], LoraAdapter] = {}
    for ad in adapters:
        if ad.target in known and known[ad.target].kind == LayerKind.LINEAR:
            key = (ad.target, "W")
            layer = known[ad.target]
        elif "." in ad.target:
            lname, pname = ad.target.rsplit(".", 1)
            layer = known.get(lname)
            if layer is None or pname not in {p for p, _ in _layer_param_names(layer)}:
                raise KeyError(f"adapter target not found in model: {ad.target!r}")
            if not pname.startswith("W"):
                raise KeyError(f"adapter target must be a weight matrix: {ad.target!r}")
            key = (lname, pname)
        else:
            raise KeyError(f"adapter target not found in model: {ad.target!r}")
        if key in out:
            raise KeyError(f"duplicate adapter target: {ad.target!r}")
        out[key] = ad
    return out


def _adapter_bias_param(pname: str) -> str:
    # Linear weight "W" pairs with bias "b"; attention "Wq" with "bq".
    return "b" + pname[1:]


# ---------------------------------------------------------------------------
# forward


def _check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")
    return x


def _dropout_vector(layer: LayerSpec, mode: Mode, mask: Optional[DropoutMask],
                    rng: Optional[np.random.Generator], rows: int) -> Optional[np.ndarray]:
    """Per-feature multiplier for one Dropout layer, or None for identity."""
    if mode == Mode.EVAL:
        return None
    if mode == Mode.MASKED_EVAL:
        if mask is None:
            raise MaskError("MaskedEval mode requires a mask")
        if layer.name not in mask.bits:
            raise MaskError(f"mask has no bits for dropout layer {layer.name!r}")
        bits = mask.bits[layer.name]
        if bits.shape != (layer.out_dim,):
            raise MaskError(
                f"mask width {bits.shape} does not match layer {layer.name!r} "
                f"width {layer.out_dim}"
            )
        if mask.rate == 0.0:
            return None
        return bits * mask.scale()
    # Train mode: fresh Bernoulli per (row, unit), inverted scaling.
    if layer.dropout_rate == 0.0:
        return None
    if rng is None:
        raise ValueError("Train-mode dropout requires a generator")
    keep = (rng.random((rows, layer.out_dim)) >= layer.dropout_rate).astype(np.float64)
    return keep / (1.0 - layer.dropout_rate)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _causal_attention_forward(layer: LayerSpec, pv: ParamView,
                              ad_map: dict, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Multi-head causal self-attention with residual; x is (T, d)."""
    T, d = x.shape
    H = layer.n_heads
    dh = d // H
    cache: dict = {"x": x}
    proj = {}
    for pname in ("Wq", "Wk", "Wv"):
        W = pv.get(layer.name, pname)
        b = pv.get(layer.name, _adapter_bias_param(pname))
        y = x @ W.T + b
        ad = ad_map.get((layer.name, pname))
        if ad is not None:
            u = x @ ad.A.T
            y = y + ad.scaling() * (u @ ad.B.T)
            if ad.bias_delta is not None:
                y = y + ad.bias_delta
            cache[f"u_{pname}"] = u
        proj[pname] = y
    q = proj["Wq"].reshape(T, H, dh).transpose(1, 0, 2)
    k = proj["Wk"].reshape(T, H, dh).transpose(1, 0, 2)
    v = proj["Wv"].reshape(T, H, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    neg = np.triu(np.full((T, T), -np.inf), k=1)
    att = _softmax_rows(scores + neg)
    z = (att @ v).transpose(1, 0, 2).reshape(T, d)
    Wo = pv.get(layer.name, "Wo")
    bo = pv.get(layer.name, "bo")
    out_proj = z @ Wo.T + bo
    ad = ad_map.get((layer.name, "Wo"))
    if ad is not None:
        u = z @ ad.A.T
        out_proj = out_proj + ad.scaling() * (u @ ad.B.T)
        if ad.bias_delta is not None:
            out_proj = out_proj + ad.bias_delta
        cache["u_Wo"] = u
    cache.update(q=q, k=k, v=v, att=att, z=z)
    return x + out_proj, cache


def _layernorm_forward(pv: ParamView, layer: LayerSpec, x: np.ndarray) -> tuple[np.ndarray, dict]:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    g = pv.get(layer.name, "g")
    b = pv.get(layer.name, "b")
    return g * xhat + b, {"xhat": xhat, "inv": inv}


def _forward_trace(
    layers: list[LayerSpec],
    pv: ParamView,
    x: np.ndarray,
    mode: Mode,
    mask: Optional[DropoutMask],
    ad_map: dict,
    rng: Optional[np.random.Generator],
) -> tuple[np.ndarray, list[dict]]:
    trace: list[dict] = []
    for layer in layers:
        rec: dict = {"layer": layer, "x": x}
        if layer.kind == LayerKind.LINEAR:
            if x.shape[-1] != layer.in_dim:
                raise ShapeError(
                    f"layer {layer.name!r} expects width {layer.in_dim}, got {x.shape[-1]}"
                )
            W = pv.get(layer.name, "W")
            b = pv.get(layer.name, "b")
            y = x @ W.T + b
            ad = ad_map.get((layer.name, "W"))
            if ad is not None:
                u = x @ ad.A.T
                y = y + ad.scaling() * (u @ ad.B.T)
                if ad.bias_delta is not None:
                    y = y + ad.bias_delta
                rec["u"] = u
        elif layer.kind == LayerKind.RELU:
            y = np.maximum(x, 0.0)
        elif layer.kind == LayerKind.DROPOUT:
            mult = _dropout_vector(layer, mode, mask, rng, x.shape[0])
            rec["mult"] = mult
            y = x if mult is None else x * mult
        elif layer.kind == LayerKind.SOFTMAX:
            y = _softmax_rows(x)
            rec["y"] = y
        elif layer.kind == LayerKind.LAYERNORM:
            y, extra = _layernorm_forward(pv, layer, x)
            rec.update(extra)
        elif layer.kind == LayerKind.EMBEDDING:
            tokens = np.asarray(x).astype(np.int64).reshape(-1)
            if tokens.size > layer.context_len:
                raise ShapeError(
                    f"sequence length {tokens.size} exceeds context {layer.context_len}"
                )
            if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= layer.vocab_size:
                raise ShapeError("token id out of vocabulary range")
            tok = pv.get(layer.name, "tok")
            pos = pv.get(layer.name, "pos")
            y = tok[tokens] + pos[: tokens.size]
            rec["tokens"] = tokens
        elif layer.kind == LayerKind.ATTENTION:
            y, extra = _causal_attention_forward(layer, pv, ad_map, x)
            rec.update(extra)
        else:  # pragma: no cover
            raise ValueError(f"unknown layer kind {layer.kind}")
        _check_finite(y, f"output of layer {layer.name!r}")
        trace.append(rec)
        x = y
    return x, trace


def forward(
    layers: list[LayerSpec],
    params: np.ndarray,
    batch: np.ndarray,
    mode: Mode = Mode.EVAL,
    mask: Optional[DropoutMask] = None,
    adapters: Optional[list[LoraAdapter]] = None,
    train_rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Run the chain on a (rows, features) batch or a (T,) token sequence.

    Eval mode makes dropout layers identity; Train mode draws fresh
    inverted-scaled units; MaskedEval applies the given fixed mask with
    the same scaling.
    """
    if mode == Mode.MASKED_EVAL and mask is None:
        raise MaskError("MaskedEval mode requires a mask")
    if mode != Mode.MASKED_EVAL and mask is not None:
        raise MaskError("mask given but mode is not MaskedEval")
    pv = ParamView(layers, params)
    ad_map = _adapters_by_target(layers, adapters)
    out, _ = _forward_trace(layers, pv, np.asarray(batch), mode, mask, ad_map, train_rng)
    return out


# ---------------------------------------------------------------------------
# reverse mode


class GradSink:
    """Accumulates parameter cotangents, either into the full flat layout
    or restricted to adapter parameters (A, B, bias_delta per adapter,
    in adapter list order)."""

    def __init__(self, pv: ParamView, adapters: Optional[list[LoraAdapter]],
                 adapters_only: bool):
        self.pv = pv
        self.adapters_only = adapters_only
        self.adapter_slots: dict[int, int] = {}
        if adapters_only:
            if not adapters:
                raise ValueError("adapter-restricted gradient without adapters")
            offset = 0
            for ad in adapters:
                self.adapter_slots[id(ad)] = offset
                offset += ad.n_params()
            self.grad = np.zeros(offset)
        else:
            self.grad = np.zeros(pv.total)

    def add_param(self, lname: str, pname: str, value: np.ndarray) -> None:
        if self.adapters_only:
            return
        offset, shape = self.pv.slot(lname, pname)
        self.grad[offset : offset + value.size] += value.reshape(-1)

    def add_adapter(self, ad: LoraAdapter, dA: np.ndarray, dB: np.ndarray,
                    dbias: Optional[np.ndarray]) -> None:
        if not self.adapters_only:
            return
        base = self.adapter_slots[id(ad)]
        self.grad[base : base + dA.size] += dA.reshape(-1)
        base += dA.size
        self.grad[base : base + dB.size] += dB.reshape(-1)
        base += dB.size
        if ad.bias_delta is not None and dbias is not None:
            self.grad[base : base + dbias.size] += dbias.reshape(-1)


def _linear_like_backward(x: np.ndarray, dy: np.ndarray, W: np.ndarray,
                          ad: Optional[LoraAdapter], u: Optional[np.ndarray],
                          sink: GradSink, lname: str, wname: str) -> np.ndarray:
    """Backward through y = x W^T + b (+ adapter); returns dx."""
    sink.add_param(lname, wname, dy.T @ x)
    sink.add_param(lname, _adapter_bias_param(wname), dy.sum(axis=0))
    dx = dy @ W
    if ad is not None:
        s = ad.scaling()
        du = s * (dy @ ad.B)  # (rows, rank)
        dx = dx + du @ ad.A
        dA = du.T @ x
        dB = s * (dy.T @ u)
        dbias = dy.sum(axis=0) if ad.bias_delta is not None else None
        sink.add_adapter(ad, dA, dB, dbias)
    return dx


def _softmax_vjp(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return y * (dy - (y * dy).sum(axis=-1, keepdims=True))


def _attention_backward(rec: dict, dy: np.ndarray, pv: ParamView,
                        ad_map: dict, sink: GradSink) -> np.ndarray:
    layer: LayerSpec = rec["layer"]
    x = rec["x"]
    T, d = x.shape
    H = layer.n_heads
    dh = d // H
    dx = dy.copy()  # residual branch
    # output projection
    z = rec["z"]
    Wo = pv.get(layer.name, "Wo")
    dz = _linear_like_backward(z, dy, Wo, ad_map.get((layer.name, "Wo")),
                               rec.get("u_Wo"), sink, layer.name, "Wo")
    dz = dz.reshape(T, H, dh).transpose(1, 0, 2)
    att, q, k, v = rec["att"], rec["q"], rec["k"], rec["v"]
    datt = dz @ v.transpose(0, 2, 1)
    dv = att.transpose(0, 2, 1) @ dz
    dscores = _softmax_vjp(att, datt) / np.sqrt(dh)
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    for pname, dproj in (("Wq", dq), ("Wk", dk), ("Wv", dv)):
        flat = dproj.transpose(1, 0, 2).reshape(T, d)
        W = pv.get(layer.name, pname)
        dx += _linear_like_backward(x, flat, W, ad_map.get((layer.name, pname)),
                                    rec.get(f"u_{pname}"), sink, layer.name, pname)
    return dx


def _layernorm_vjp(rec: dict, dy: np.ndarray, pv: ParamView, sink: GradSink) -> np.ndarray:
    layer: LayerSpec = rec["layer"]
    xhat, inv = rec["xhat"], rec["inv"]
    g = pv.get(layer.name, "g")
    sink.add_param(layer.name, "g", (dy * xhat).sum(axis=0))
    sink.add_param(layer.name, "b", dy.sum(axis=0))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def backward_params(
    layers: list[LayerSpec],
    params: np.ndarray,
    trace: list[dict],
    dout: np.ndarray,
    adapters: Optional[list[LoraAdapter]] = None,
    adapters_only: bool = False,
) -> np.ndarray:
    """Propagate an output cotangent back to a flat parameter gradient."""
    pv = ParamView(layers, params)
    ad_map = _adapters_by_target(layers, adapters)
    sink = GradSink(pv, adapters, adapters_only)
    dy = dout
    for rec in reversed(trace):
        layer: LayerSpec = rec["layer"]
        if layer.kind == LayerKind.LINEAR:
            dy = _linear_like_backward(rec["x"], dy, pv.get(layer.name, "W"),
                                       ad_map.get((layer.name, "W")), rec.get("u"),
                                       sink, layer.name, "W")
        elif layer.kind == LayerKind.RELU:
            dy = dy * (rec["x"] > 0.0)
        elif layer.kind == LayerKind.DROPOUT:
            mult = rec["mult"]
            dy = dy if mult is None else dy * mult
        elif layer.kind == LayerKind.SOFTMAX:
            dy = _softmax_vjp(rec["y"], dy)
        elif layer.kind == LayerKind.LAYERNORM:
            dy = _layernorm_vjp(rec, dy, pv, sink)
        elif layer.kind == LayerKind.ATTENTION:
            dy = _attention_backward(rec, dy, pv, ad_map, sink)
        elif layer.kind == LayerKind.EMBEDDING:
            tokens = rec["tokens"]
            dtok = np.zeros(pv.get(layer.name, "tok").shape)
            np.add.at(dtok, tokens, dy)
            sink.add_param(layer.name, "tok", dtok)
            dpos = np.zeros(pv.get(layer.name, "pos").shape)
            dpos[: tokens.size] = dy
            sink.add_param(layer.name, "pos", dpos)
            dy = None  # type: ignore[assignment]  # chain starts here
            break
        else:  # pragma: no cover
            raise ValueError(f"unknown layer kind {layer.kind}")
    grad = sink.grad
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return grad


def run_forward_trace(
    layers: list[LayerSpec],
    params: np.ndarray,
    batch: np.ndarray,
    mode: Mode = Mode.EVAL,
    mask: Optional[DropoutMask] = None,
    adapters: Optional[list[LoraAdapter]] = None,
    train_rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, list[dict]]:
    """forward() that also returns the activation trace for backward()."""
    if mode == Mode.MASKED_EVAL and mask is None:
        raise MaskError("MaskedEval mode requires a mask")
    pv = ParamView(layers, params)
    ad_map = _adapters_by_target(layers, adapters)
    return _forward_trace(layers, pv, np.asarray(batch), mode, mask, ad_map, train_rng)


# ---------------------------------------------------------------------------
# forward mode (tangents), used for Gauss-Newton Hessian-vector products


class TangentView:
    """Named access to a parameter-space tangent vector, full or
    adapter-restricted (mirroring GradSink's layouts)."""

    def __init__(self, pv: ParamView, adapters: Optional[list[LoraAdapter]],
                 adapters_only: bool, vec: np.ndarray):
        self.pv = pv
        self.adapters_only = adapters_only
        self.vec = vec
        self.adapter_slots: dict[int, int] = {}
        if adapters_only:
            offset = 0
            for ad in adapters or []:
                self.adapter_slots[id(ad)] = offset
                offset += ad.n_params()
            if vec.shape != (offset,):
                raise ShapeError("tangent length does not match adapter layout")
        elif vec.shape != (pv.total,):
            raise ShapeError("tangent length does not match parameter layout")

    def param(self, lname: str, pname: str) -> Optional[np.ndarray]:
        if self.adapters_only:
            return None
        offset, shape = self.pv.slot(lname, pname)
        return self.vec[offset : offset + int(np.prod(shape))].reshape(shape)

    def adapter(self, ad: LoraAdapter) -> Optional[tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]]:
        if not self.adapters_only:
            return None
        base = self.adapter_slots[id(ad)]
        tA = self.vec[base : base + ad.A.size].reshape(ad.A.shape)
        base += ad.A.size
        tB = self.vec[base : base + ad.B.size].reshape(ad.B.shape)
        base += ad.B.size
        tbias = None
        if ad.bias_delta is not None:
            tbias = self.vec[base : base + ad.bias_delta.size]
        return tA, tB, tbias


def _linear_like_jvp(x: np.ndarray, tx: np.ndarray, W: np.ndarray,
                     ad: Optional[LoraAdapter], u: Optional[np.ndarray],
                     tv: TangentView, lname: str, wname: str) -> np.ndarray:
    ty = tx @ W.T
    tW = tv.param(lname, wname)
    if tW is not None:
        ty = ty + x @ tW.T
        tb = tv.param(lname, _adapter_bias_param(wname))
        ty = ty + tb
    if ad is not None:
        s = ad.scaling()
        ty = ty + s * ((tx @ ad.A.T) @ ad.B.T)
        tan = tv.adapter(ad)
        if tan is not None:
            tA, tB, tbias = tan
            ty = ty + s * ((x @ tA.T) @ ad.B.T) + s * (u @ tB.T)
            if tbias is not None:
                ty = ty + tbias
    return ty


def _softmax_jvp(y: np.ndarray, tx: np.ndarray) -> np.ndarray:
    return y * (tx - (y * tx).sum(axis=-1, keepdims=True))


def jvp_outputs(
    layers: list[LayerSpec],
    params: np.ndarray,
    trace: list[dict],
    tangent: np.ndarray,
    adapters: Optional[list[LoraAdapter]] = None,
    adapters_only: bool = False,
) -> np.ndarray:
    """Directional derivative of the chain output along a parameter tangent,
    replayed over a stored forward trace (input held fixed)."""
    pv = ParamView(layers, params)
    ad_map = _adapters_by_target(layers, adapters)
    tv = TangentView(pv, adapters, adapters_only, tangent)
    tx: Optional[np.ndarray] = None  # None means zero tangent so far
    for rec in trace:
        layer: LayerSpec = rec["layer"]
        x = rec["x"]
        if layer.kind == LayerKind.EMBEDDING:
            tokens = rec["tokens"]
            ttok = tv.param(layer.name, "tok")
            if ttok is None:
                tx = np.zeros((tokens.size, layer.out_dim))
            else:
                tpos = tv.param(layer.name, "pos")
                tx = ttok[tokens] + tpos[: tokens.size]
            continue
        if tx is None:
            tx = np.zeros_like(x)
        if layer.kind == LayerKind.LINEAR:
            tx = _linear_like_jvp(x, tx, pv.get(layer.name, "W"),
                                  ad_map.get((layer.name, "W")), rec.get("u"),
                                  tv, layer.name, "W")
        elif layer.kind == LayerKind.RELU:
            tx = tx * (x > 0.0)
        elif layer.kind == LayerKind.DROPOUT:
            mult = rec["mult"]
            tx = tx if mult is None else tx * mult
        elif layer.kind == LayerKind.SOFTMAX:
            tx = _softmax_jvp(rec["y"], tx)
        elif layer.kind == LayerKind.LAYERNORM:
            xhat, inv = rec["xhat"], rec["inv"]
            g = pv.get(layer.name, "g")
            tmu = tx.mean(axis=-1, keepdims=True)
            tsig = (xhat * tx).mean(axis=-1, keepdims=True)  # = tsigma~ * inv^{-1} ... see below
            txhat = (tx - tmu) * inv - xhat * tsig * inv
            ty = g * txhat
            tg = tv.param(layer.name, "g")
            if tg is not None:
                ty = ty + tg * xhat + tv.param(layer.name, "b")
            tx = ty
        elif layer.kind == LayerKind.ATTENTION:
            tx = _attention_jvp(rec, tx, pv, ad_map, tv)
        else:  # pragma: no cover
            raise ValueError(f"unknown layer kind {layer.kind}")
    assert tx is not None
    return tx


def _attention_jvp(rec: dict, tx: np.ndarray, pv: ParamView, ad_map: dict,
                   tv: TangentView) -> np.ndarray:
    layer: LayerSpec = rec["layer"]
    x = rec["x"]
    T, d = x.shape
    H = layer.n_heads
    dh = d // H
    tproj = {}
    for pname in ("Wq", "Wk", "Wv"):
        tproj[pname] = _linear_like_jvp(x, tx, pv.get(layer.name, pname),
                                        ad_map.get((layer.name, pname)),
                                        rec.get(f"u_{pname}"), tv, layer.name, pname)
    heads = lambda a: a.reshape(T, H, dh).transpose(1, 0, 2)
    tq, tk, tvv = heads(tproj["Wq"]), heads(tproj["Wk"]), heads(tproj["Wv"])
    q, k, v, att = rec["q"], rec["k"], rec["v"], rec["att"]
    tscores = (tq @ k.transpose(0, 2, 1) + q @ tk.transpose(0, 2, 1)) / np.sqrt(dh)
    # masked (upper-triangle) entries carry att == 0, so their tangent drops out
    tscores = np.tril(tscores)
    tatt = _softmax_jvp(att, tscores)
    tz = (tatt @ v + att @ tvv).transpose(1, 0, 2).reshape(T, d)
    z = rec["z"]
    tout = _linear_like_jvp(z, tz, pv.get(layer.name, "Wo"),
                            ad_map.get((layer.name, "Wo")), rec.get("u_Wo"),
                            tv, layer.name, "Wo")
    return tx + tout


def init_lora_adapter(target: str, in_dim: int, out_dim: int, rank: int,
                      alpha: float, rng: np.random.Generator,
                      trainable_bias: bool = True) -> LoraAdapter:
    """A ~ N(0, 1/rank), B = 0, bias_delta = 0: the adapted model starts
    exactly equal to the base model."""
    if rank < 1 or rank > min(in_dim, out_dim):
        raise ValueError(f"rank {rank} out of range for {in_dim}x{out_dim}")
    A = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, in_dim))
    B = np.zeros((out_dim, rank))
    bias = np.zeros(out_dim) if trainable_bias else None
    return LoraAdapter(target=target, rank=rank, alpha=alpha, A=A, B=B, bias_delta=bias)
