"""Attribution-efficacy measurement: Spearman rank correlation, the
subset-sum output predictor, the linear datamodeling score harness with
subset retraining, and the brute-force leave-one-out oracle."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .costs import CostLedger
from .data import Dataset, config_digest
from .errors import ShapeError, SizeCapError
from .grads import ModelView, OutputFn, logits_for, output_value_and_dlogits
from .methods import AttributionMatrix
from .models import ModelSpec, init_params
from .rng import derive_seed
from .training import TrainConfig, sample_subset, train_member

__all__ = [
    "spearman",
    "g_tau",
    "LdsGroundTruth",
    "LdsReport",
    "build_lds_ground_truth",
    "lds",
    "loo_oracle",
]

LOO_SIZE_CAP = 200


def _midranks(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based); ties share the mean of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of midranks. All-constant input is defined as
    correlation 0 (callers that need the flag use spearman_flagged)."""
    rho, _ = spearman_flagged(x, y)
    return rho


def spearman_flagged(x, y) -> tuple[float, bool]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("spearman needs two equal-length vectors")
    if x.size < 2:
        raise ShapeError("spearman needs at least two points")
    rx, ry = _midranks(x), _midranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt((dx @ dx) * (dy @ dy))
    if denom == 0.0:
        return 0.0, True
    return float((dx @ dy) / denom), False


def g_tau(tau_column: np.ndarray, subset) -> float:
    """Attribution-based output prediction: the score sum over a subset."""
    tau_column = np.asarray(tau_column, dtype=np.float64)
    idx = np.asarray(subset, dtype=np.int64)
    if idx.size == 0:
        return 0.0
    if idx.min() < 0 or idx.max() >= tau_column.size:
        raise IndexError("subset index out of range")
    return float(tau_column[idx].sum())


@dataclass
class LdsGroundTruth:
    subsets: list[np.ndarray]          # m sorted index arrays, size floor(alpha*n)
    outputs: np.ndarray                # (m, n_test) retrained-model outputs
    alpha: float
    m: int
    seed: int
    output_fn: OutputFn
    dataset_digest: str
    retrain_digest: str


@dataclass
class LdsReport:
    per_test: np.ndarray
    mean: float
    m: int
    alpha: float
    constant_flags: np.ndarray
    seed: int

    def as_dict(self) -> dict:
        return {
            "mean_lds": self.mean,
            "m": self.m,
            "alpha": self.alpha,
            "seed": self.seed,
            "per_test_lds": [float(v) for v in self.per_test],
            "constant_flags": [bool(v) for v in self.constant_flags],
        }


@dataclass
class _RetrainJob:
    spec: ModelSpec
    dataset: Dataset
    test_data: Dataset
    subset: np.ndarray
    config: TrainConfig
    output_fn: OutputFn
    j: int


def _retrain_outputs(job: _RetrainJob) -> np.ndarray:
    member = train_member(job.spec, job.dataset.take(job.subset), job.config, 1)
    view = ModelView(job.spec, member.params.data)
    seq = job.spec.is_sequence_model()
    out = np.empty(job.test_data.n)
    for t in range(job.test_data.n):
        logits = logits_for(view, job.test_data.inputs[t])
        out[t], _ = output_value_and_dlogits(logits, job.test_data.targets[t],
                                             job.output_fn, seq)
    return out


def build_lds_ground_truth(spec: ModelSpec, dataset: Dataset, test_data: Dataset,
                           m: int, alpha: float, retrain_config: TrainConfig,
                           seed: int, output_fn: OutputFn = OutputFn.MARGIN,
                           jobs: int = 1,
                           ledger: Optional[CostLedger] = None) -> LdsGroundTruth:
    """m random subsets of size floor(alpha*n), one retrained model per
    subset, and the retrained outputs on every test point."""
    if m < 2:
        raise ValueError("m must be >= 2")
    n = dataset.n
    size = int(np.floor(alpha * n))
    subsets = []
    for j in range(m):
        subsets.append(sample_subset(n, alpha, derive_seed(seed, "lds_subset", j))
                       if alpha < 1.0 else np.arange(n, dtype=np.int64))
        if subsets[-1].size != size:
            raise ShapeError("subset size drifted from floor(alpha*n)")
    # One shared retrain seed: the m models differ only through their
    # subsets, so alpha = 1 degenerates to m identical models and the
    # output variation isolates the data effect being scored.
    retrain_seed = derive_seed(seed, "lds_train")
    jobs_list = [
        _RetrainJob(spec=spec, dataset=dataset, test_data=test_data,
                    subset=subsets[j],
                    config=replace(retrain_config, seed=retrain_seed),
                    output_fn=output_fn, j=j)
        for j in range(m)
    ]
    if jobs <= 1 or m <= 1:
        rows = [_retrain_outputs(job) for job in jobs_list]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_retrain_outputs, jobs_list))
    if ledger is not None:
        ledger.training_runs += m
    retrain_digest = config_digest({
        "m": m, "alpha": alpha, "seed": seed, "output_fn": output_fn.value,
        "epochs": retrain_config.epochs, "lr": retrain_config.lr,
        "optimizer": retrain_config.optimizer,
        "batch_size": retrain_config.batch_size,
    })
    return LdsGroundTruth(subsets=subsets, outputs=np.vstack(rows), alpha=alpha,
                          m=m, seed=seed, output_fn=output_fn,
                          dataset_digest=dataset.digest(),
                          retrain_digest=retrain_digest)


def lds(tau: AttributionMatrix, gt: LdsGroundTruth) -> LdsReport:
    """Per test point, the Spearman correlation between retrained outputs
    and subset score sums across the m subsets; mean over test points."""
    n_train, n_test = tau.scores.shape
    if gt.outputs.shape[1] != n_test:
        raise ShapeError(
            f"ground truth covers {gt.outputs.shape[1]} test points, "
            f"attribution has {n_test}"
        )
    for subset in gt.subsets:
        if subset.size and subset.max() >= n_train:
            raise ShapeError("ground-truth subset indexes beyond the training set")
    per_test = np.empty(n_test)
    flags = np.zeros(n_test, dtype=bool)
    for t in range(n_test):
        predictions = np.array([g_tau(tau.scores[:, t], s) for s in gt.subsets])
        per_test[t], flags[t] = spearman_flagged(gt.outputs[:, t], predictions)
    return LdsReport(per_test=per_test, mean=float(per_test.mean()), m=gt.m,
                     alpha=gt.alpha, constant_flags=flags, seed=gt.seed)


@dataclass
class _LooJob:
    spec: ModelSpec
    dataset: Dataset
    test_data: Dataset
    config: TrainConfig
    output_fn: OutputFn
    drop: int  # -1 trains on the full set


def _loo_outputs(job: _LooJob) -> np.ndarray:
    if job.drop < 0:
        subset = np.arange(job.dataset.n, dtype=np.int64)
    else:
        subset = np.array([i for i in range(job.dataset.n) if i != job.drop],
                          dtype=np.int64)
    if subset.size == 0:
        params = init_params(job.spec, derive_seed(job.config.seed, "member", 1)).data
    else:
        member = train_member(job.spec, job.dataset.take(subset), job.config, 1)
        params = member.params.data
    view = ModelView(job.spec, params)
    seq = job.spec.is_sequence_model()
    out = np.empty(job.test_data.n)
    for t in range(job.test_data.n):
        logits = logits_for(view, job.test_data.inputs[t])
        out[t], _ = output_value_and_dlogits(logits, job.test_data.targets[t],
                                             job.output_fn, seq)
    return out


def loo_oracle(spec: ModelSpec, dataset: Dataset, test_data: Dataset,
               retrain_config: TrainConfig, output_fn: OutputFn = OutputFn.MARGIN,
               jobs: int = 1) -> AttributionMatrix:
    """Brute-force leave-one-out ground truth on a small convex model:
    scores[j, t] = f_full(x_t) - f_without_j(x_t), every model retrained
    from the same fixed seed."""
    if dataset.n > LOO_SIZE_CAP:
        raise SizeCapError(
            f"leave-one-out retraining is capped at n <= {LOO_SIZE_CAP}, got {dataset.n}"
        )
    jobs_list = [_LooJob(spec=spec, dataset=dataset, test_data=test_data,
                         config=retrain_config, output_fn=output_fn, drop=j)
                 for j in range(-1, dataset.n)]
    if jobs <= 1:
        rows = [_loo_outputs(job) for job in jobs_list]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_loo_outputs, jobs_list))
    full = rows[0]
    scores = np.vstack([full - rows[1 + j] for j in range(dataset.n)])
    return AttributionMatrix(scores=scores, method="loo_oracle",
                             metadata={"output_fn": output_fn.value})
