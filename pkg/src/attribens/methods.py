"""Single-model attribution primitives: projected-gradient features
(Phi, phi, Q) with a kernel solve, conjugate-gradient influence scores,
and raw gradient dot/cosine similarity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .costs import CostLedger
from .data import Dataset
from .errors import NumericError, ShapeError
from .grads import ModelView, OutputFn, correct_class_probs, per_sample_grads
from . import nn
from .rng import keyed_generator

__all__ = [
    "FeaturePack",
    "AttributionMatrix",
    "project_grads",
    "compute_q",
    "build_feature_pack",
    "trak_single",
    "trak_scores",
    "influence_cg",
    "grad_dot",
    "grad_cos",
]

# Projection column-block width and the row-chunk memory budget for raw
# per-sample gradients. Both are fixed constants (not adaptive), so the
# sequence of float operations never depends on the environment.
PROJECTION_BLOCK = 128
GRAD_CHUNK_BYTES = 1 << 28


@dataclass
class FeaturePack:
    """Per-model attribution intermediates for the kernel method."""

    member_id: str
    projection_seed: int
    proj_dim: int
    Phi: np.ndarray        # (n_train, k)
    phi_test: np.ndarray   # (n_test, k)
    Q_diag: np.ndarray     # (n_train,)
    lam: float             # Gram ridge, resolved value >= 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.Phi)) or not np.all(np.isfinite(self.phi_test)):
            raise NumericError("non-finite feature entries")
        if np.any(self.Q_diag < 0.0) or np.any(self.Q_diag > 1.0):
            raise NumericError("Q diagonal out of [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class AttributionMatrix:
    scores: np.ndarray  # (n_train, n_test)
    method: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise NumericError("non-finite attribution scores")


def _grad_chunk_rows(grad_dim: int) -> int:
    return max(1, GRAD_CHUNK_BYTES // (8 * grad_dim))


def _projection_block(seed: int, grad_dim: int, block_index: int, cols: int) -> np.ndarray:
    """Columns [block*B, block*B + cols) of the projection matrix, entries
    N(0, 1/k)-scaled later; keyed by (seed, block) only, so any chunking
    of the rows reproduces identical entries."""
    rng = keyed_generator(seed, "projection", block_index)
    return rng.standard_normal((grad_dim, cols))


def project_grads(view: ModelView, data: Dataset, output_fn: OutputFn,
                  proj_dim: int, projection_seed: int,
                  projection: str = "gaussian",
                  ledger: Optional[CostLedger] = None,
                  phase: str = "serve") -> np.ndarray:
    """Per-sample gradients multiplied by a seed-determined Gaussian
    projection with entry variance 1/k, generated column-block-wise so the
    full matrix is never materialized. projection="identity" is the test
    hook (requires proj_dim == gradient dimension)."""
    if proj_dim < 1:
        raise ValueError("proj_dim must be >= 1")
    p = view.grad_dim()
    if projection == "identity" and proj_dim != p:
        raise ShapeError(f"identity projection needs proj_dim == {p}, got {proj_dim}")
    if projection not in ("identity", "gaussian"):
        raise ValueError(f"unknown projection {projection!r}")
    rows = data.n
    out = np.empty((rows, proj_dim))
    chunk = _grad_chunk_rows(p)
    scale = 1.0 / np.sqrt(proj_dim)
    for start in range(0, rows, chunk):
        stop = min(start + chunk, rows)
        grads = per_sample_grads(view, data.inputs[start:stop], data.targets[start:stop],
                                 output_fn, chunk=64)
        if ledger is not None:
            ledger.record(phase, "forward", stop - start)
            ledger.record(phase, "backward", stop - start)
        if projection == "identity":
            out[start:stop] = grads
            continue
        for b, col in enumerate(range(0, proj_dim, PROJECTION_BLOCK)):
            cols = min(PROJECTION_BLOCK, proj_dim - col)
            block = _projection_block(projection_seed, p, b, cols)
            out[start:stop, col : col + cols] = grads @ (block * scale)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite projected gradients")
    return out


def compute_q(view: ModelView, train_data: Dataset,
              ledger: Optional[CostLedger] = None,
              phase: str = "serve") -> np.ndarray:
    """Diagonal reweighting: one minus the correct-class probability per
    training point. Forward passes only."""
    probs = correct_class_probs(view, train_data.inputs, train_data.targets)
    if ledger is not None:
        ledger.record(phase, "forward", train_data.n)
    return 1.0 - probs


def resolve_lambda(Phi: np.ndarray, lam: float | str) -> float:
    """"auto" scales a tiny ridge with the Gram trace; numbers pass through."""
    if lam == "auto":
        k = Phi.shape[1]
        return 1e-6 * float(np.einsum("ij,ij->", Phi, Phi)) / k
    value = float(lam)
    if value < 0:
        raise ValueError("lambda must be non-negative")
    return value


def build_feature_pack(view: ModelView, train_data: Dataset, test_data: Dataset,
                       output_fn: OutputFn, proj_dim: int, projection_seed: int,
                       projection: str = "gaussian", lam: float | str = "auto",
                       member_id: str = "", q_view: Optional[ModelView] = None,
                       ledger: Optional[CostLedger] = None) -> FeaturePack:
    """All per-model intermediates in one sweep. `q_view` lets the
    reweighting diagonal come from a differently-masked model than the
    gradient features (the forward-only ensemble variant)."""
    Phi = project_grads(view, train_data, output_fn, proj_dim, projection_seed,
                        projection=projection, ledger=ledger)
    phi = project_grads(view, test_data, output_fn, proj_dim, projection_seed,
                        projection=projection, ledger=ledger)
    q = compute_q(q_view if q_view is not None else view, train_data, ledger=ledger)
    return FeaturePack(member_id=member_id, projection_seed=projection_seed,
                       proj_dim=proj_dim, Phi=Phi, phi_test=phi, Q_diag=q,
                       lam=resolve_lambda(Phi, lam))


def _kernel_factor(pack: FeaturePack) -> np.ndarray:
    """phi (Phi^T Phi + lam I)^{-1} Phi^T as (n_test, n_train), solved via
    Cholesky of the (regularized) Gram matrix."""
    k = pack.Phi.shape[1]
    gram = pack.Phi.T @ pack.Phi + pack.lam * np.eye(k)
    try:
        chol = cho_factor(gram, lower=True)
    except LinAlgError as exc:
        raise NumericError(
            "Gram matrix not positive definite; increase the lambda ridge"
        ) from exc
    # (n_test, k) @ solve(k, n_train)
    return pack.phi_test @ cho_solve(chol, pack.Phi.T)


def trak_scores(q_diags: list[np.ndarray], packs: list[FeaturePack]) -> AttributionMatrix:
    """Score matrix from averaged reweighting diagonals and averaged
    kernel factors: scores[j, t] = mean(Q)_j * mean(factor)[t, j]."""
    if not q_diags or not packs:
        raise ValueError("need at least one Q diagonal and one feature pack")
    n_train = packs[0].Phi.shape[0]
    n_test = packs[0].phi_test.shape[0]
    for pack in packs:
        if pack.Phi.shape[0] != n_train or pack.phi_test.shape[0] != n_test:
            raise ShapeError("feature packs disagree on dataset sizes")
    q_avg = np.zeros(n_train)
    for q in q_diags:
        if q.shape != (n_train,):
            raise ShapeError("Q diagonal length mismatch")
        q_avg += q
    q_avg /= len(q_diags)
    factor = np.zeros((n_test, n_train))
    for pack in packs:
        factor += _kernel_factor(pack)
    factor /= len(packs)
    scores = (q_avg[None, :] * factor).T
    return AttributionMatrix(scores=np.ascontiguousarray(scores), method="trak",
                             metadata={"n_units_q": len(q_diags),
                                       "n_units_features": len(packs)})


def trak_single(pack: FeaturePack) -> AttributionMatrix:
    return trak_scores([pack.Q_diag], [pack])


def _ggn_hvp(view: ModelView, traces: list[tuple[list[dict], np.ndarray]],
             vec: np.ndarray, ledger: Optional[CostLedger]) -> np.ndarray:
    """Gauss-Newton Hessian-vector product of the mean training loss.

    Per sample: push the tangent to the logits, apply the cross-entropy
    curvature there (diag(p) - p p^T, scaled like the loss), pull back.
    """
    layers = view.spec.layers
    n = len(traces)
    out = np.zeros_like(vec)
    seq = view.spec.is_sequence_model()
    for trace, probs in traces:
        tangent = nn.jvp_outputs(layers, view.params, trace, vec,
                                 adapters=view.adapters,
                                 adapters_only=view.adapter_grads_only)
        if probs.shape[-1] == 1:
            # single-logit binary head: Bernoulli curvature p(1-p)
            curved = probs * (1.0 - probs) * tangent
        else:
            curved = probs * tangent - probs * (probs * tangent).sum(axis=-1, keepdims=True)
        if seq:
            curved = curved / trace_positions(trace)
        out += nn.backward_params(layers, view.params, trace, curved,
                                  adapters=view.adapters,
                                  adapters_only=view.adapter_grads_only)
        if ledger is not None:
            ledger.record("serve", "forward", 1)
            ledger.record("serve", "backward", 1)
    return out / n


def trace_positions(trace: list[dict]) -> int:
    first = trace[0]
    return int(first["tokens"].size) if "tokens" in first else 1


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _curvature_probs(out: np.ndarray) -> np.ndarray:
    if out.shape[-1] == 1:
        return 1.0 / (1.0 + np.exp(-out))  # sigmoid for single-logit heads
    return _softmax(out)


def influence_cg(view: ModelView, train_data: Dataset, test_data: Dataset,
                 output_fn: OutputFn, damping: float = 1e-3,
                 max_iters: int = 100, tol: float = 1e-6,
                 ledger: Optional[CostLedger] = None) -> AttributionMatrix:
    """scores[j, t] = g(x_j)^T (H + damping I)^{-1} g(x_t) with H the
    Gauss-Newton curvature of the mean training loss, solved matrix-free
    by conjugate gradients per test point.

    Unconverged solves return their partial result and set a warning flag
    in the metadata rather than failing the run.
    """
    if damping < 0:
        raise ValueError("damping must be non-negative")
    train_grads = per_sample_grads(view, train_data.inputs, train_data.targets,
                                   output_fn, chunk=64)
    test_grads = per_sample_grads(view, test_data.inputs, test_data.targets,
                                  output_fn, chunk=64)
    if ledger is not None:
        ledger.record("serve", "forward", train_data.n + test_data.n)
        ledger.record("serve", "backward", train_data.n + test_data.n)

    # Forward traces (and softmax probabilities) of every training sample
    # back the Hessian-vector products.
    traces = []
    layers = view.spec.layers
    seq = view.spec.is_sequence_model()
    for i in range(train_data.n):
        x = train_data.inputs[i] if seq else np.asarray(
            train_data.inputs[i], dtype=np.float64).reshape(1, -1)
        out, trace = nn.run_forward_trace(layers, view.params, x, mode=view.mode,
                                          mask=view.mask, adapters=view.adapters)
        traces.append((trace, _curvature_probs(out)))

    def hvp(v: np.ndarray) -> np.ndarray:
        if ledger is not None:
            ledger.cg_iterations += 1
        return _ggn_hvp(view, traces, v, ledger) + damping * v

    scores = np.empty((train_data.n, test_data.n))
    not_converged: list[int] = []
    for t in range(test_data.n):
        b = test_grads[t]
        x = np.zeros_like(b)
        r = b.copy()
        p = b.copy()
        rr = float(r @ r)
        bnorm = np.sqrt(float(b @ b))
        threshold = tol * max(bnorm, 1e-300)
        converged = bnorm == 0.0
        for _ in range(max_iters):
            if np.sqrt(rr) <= threshold:
                converged = True
                break
            hp = hvp(p)
            php = float(p @ hp)
            if php <= 0.0:
                raise NumericError(
                    "negative curvature in conjugate gradients; increase damping"
                )
            alpha = rr / php
            x += alpha * p
            r -= alpha * hp
            rr_new = float(r @ r)
            p = r + (rr_new / rr) * p
            rr = rr_new
        if not converged and np.sqrt(rr) > threshold:
            not_converged.append(t)
        scores[:, t] = train_grads @ x
    meta = {"damping": damping, "cg_tol": tol, "cg_max_iters": max_iters,
            "cg_not_converged": not_converged}
    return AttributionMatrix(scores=scores, method="influence_cg", metadata=meta)


def grad_dot(view: ModelView, train_data: Dataset, test_data: Dataset,
             output_fn: OutputFn,
             ledger: Optional[CostLedger] = None) -> AttributionMatrix:
    """scores[j, t] = g(x_j)^T g(x_t), streamed over training chunks."""
    scores, _ = _pairwise_grad_scores(view, train_data, test_data, output_fn,
                                      normalize=False, ledger=ledger)
    return AttributionMatrix(scores=scores, method="grad_dot")


def grad_cos(view: ModelView, train_data: Dataset, test_data: Dataset,
             output_fn: OutputFn,
             ledger: Optional[CostLedger] = None) -> AttributionMatrix:
    """Cosine similarity of gradients; zero-norm gradients score 0 and are
    flagged in the metadata."""
    scores, zero_norms = _pairwise_grad_scores(view, train_data, test_data, output_fn,
                                               normalize=True, ledger=ledger)
    return AttributionMatrix(scores=scores, method="grad_cos",
                             metadata={"zero_norm_samples": zero_norms})


def _pairwise_grad_scores(view: ModelView, train_data: Dataset, test_data: Dataset,
                          output_fn: OutputFn, normalize: bool,
                          ledger: Optional[CostLedger]) -> tuple[np.ndarray, int]:
    test_grads = per_sample_grads(view, test_data.inputs, test_data.targets,
                                  output_fn, chunk=64)
    if ledger is not None:
        ledger.record("serve", "forward", test_data.n)
        ledger.record("serve", "backward", test_data.n)
    zero_norms = 0
    if normalize:
        norms = np.linalg.norm(test_grads, axis=1)
        zero_norms += int((norms == 0.0).sum())
        test_grads = test_grads / np.where(norms == 0.0, 1.0, norms)[:, None]
    chunk = _grad_chunk_rows(view.grad_dim())
    scores = np.empty((train_data.n, test_data.n))
    for start in range(0, train_data.n, chunk):
        stop = min(start + chunk, train_data.n)
        grads = per_sample_grads(view, train_data.inputs[start:stop],
                                 train_data.targets[start:stop], output_fn, chunk=64)
        if ledger is not None:
            ledger.record("serve", "forward", stop - start)
            ledger.record("serve", "backward", stop - start)
        if normalize:
            norms = np.linalg.norm(grads, axis=1)
            zero_norms += int((norms == 0.0).sum())
            grads = grads / np.where(norms == 0.0, 1.0, norms)[:, None]
        scores[start:stop] = grads @ test_grads.T
    return scores, zero_norms
