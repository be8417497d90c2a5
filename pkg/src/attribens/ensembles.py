"""Ensemble strategies over the attribution methods: independent members,
dropout-masked passes, the forward-only masked variant, LoRA fine-tunes,
and intermediate-checkpoint reuse.

Each ensemble unit (i, d) or (i, l) derives its mask/projection/fine-tune
seeds from a structured hash of (run seed, i, d or l), so any subset of
units can be recomputed independently and aggregation order never matters.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .costs import CostLedger
from .data import Dataset
from .errors import ConfigError, ShapeError
from .grads import ModelView, OutputFn
from .methods import (
    AttributionMatrix,
    FeaturePack,
    build_feature_pack,
    compute_q,
    grad_cos,
    grad_dot,
    influence_cg,
    project_grads,
    resolve_lambda,
    trak_scores,
)
from .models import ModelSpec, attach_lora, default_lora_targets
from .nn import DropoutMask, sample_mask
from .rng import derive_seed
from .training import LORA_FINETUNE_DEFAULTS, TrainConfig, TrainedMember, fine_tune_lora

__all__ = [
    "EnsembleConfig",
    "aggregate_average",
    "trak_aggregate",
    "run_naive",
    "run_dropout_ensemble",
    "run_dropout_forward_only",
    "run_lora_ensemble",
    "run_checkpoint_ensemble",
    "run_strategy",
]

STRATEGIES = ("naive", "dropout", "dropout_forward_only", "lora", "checkpoints")
METHODS = ("trak", "influence_cg", "grad_dot", "grad_cos")


@dataclass(frozen=True)
class EnsembleConfig:
    strategy: str = "naive"
    method: str = "trak"
    I: int = 1
    D: int = 1
    L: int = 1
    checkpoint_epochs: tuple[int, ...] = ()
    seed: int = 0
    output_fn: OutputFn = OutputFn.MARGIN
    # kernel-method knobs
    proj_dim: int = 512
    projection: str = "gaussian"   # "gaussian" | "identity" (test hook)
    lam: float | str = "auto"
    # masked-pass knobs; None means reuse the model's training dropout rate
    mask_rate: Optional[float] = None
    dropout_disabled: bool = False  # projection-only ablation control
    # influence knobs
    damping: float = 1e-3
    cg_max_iters: int = 100
    cg_tol: float = 1e-6
    # adapter knobs
    lora_rank: int = 8
    lora_alpha: float = 8.0
    lora_targets: Optional[tuple[str, ...]] = None
    lora_epochs: int = LORA_FINETUNE_DEFAULTS.epochs
    lora_lr: float = LORA_FINETUNE_DEFAULTS.lr
    lora_batch_size: int = LORA_FINETUNE_DEFAULTS.batch_size
    lora_fraction: float = LORA_FINETUNE_DEFAULTS.subset_fraction
    lora_full_gradients: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.I < 1 or self.D < 1 or self.L < 1:
            raise ConfigError("I, D, L must all be >= 1")
        if self.strategy == "dropout_forward_only" and self.method != "trak":
            raise ConfigError("the forward-only variant applies only to trak")
        if self.strategy == "checkpoints" and not self.checkpoint_epochs:
            raise ConfigError("checkpoints strategy needs checkpoint_epochs")

    def lora_train_config(self, base_seed: int) -> TrainConfig:
        return replace(LORA_FINETUNE_DEFAULTS, lr=self.lora_lr,
                       epochs=self.lora_epochs, batch_size=self.lora_batch_size,
                       subset_fraction=self.lora_fraction, seed=base_seed)


def aggregate_average(matrices: list[AttributionMatrix]) -> AttributionMatrix:
    """Elementwise mean of same-shaped, same-method score matrices."""
    if not matrices:
        raise ValueError("nothing to aggregate")
    first = matrices[0]
    total = np.zeros_like(first.scores)
    merged_meta: dict = {"n_units": len(matrices)}
    for m in matrices:
        if m.scores.shape != first.scores.shape:
            raise ShapeError("attribution matrices disagree on shape")
        if m.method != first.method:
            raise ValueError("attribution matrices disagree on method")
        total += m.scores
    not_conv = sorted({t for m in matrices for t in m.metadata.get("cg_not_converged", [])})
    if not_conv:
        merged_meta["cg_not_converged"] = not_conv
    return AttributionMatrix(scores=total / len(matrices), method=first.method,
                             metadata=merged_meta)


def trak_aggregate(packs: list[FeaturePack]) -> AttributionMatrix:
    """Kernel-method aggregation: average the reweighting diagonals and the
    per-pack kernel factors across packs, then combine."""
    return trak_scores([p.Q_diag for p in packs], packs)


# ---------------------------------------------------------------------------
# unit construction


def _mask_for(spec: ModelSpec, config: EnsembleConfig, member_index: int,
              d: int) -> DropoutMask:
    widths = spec.dropout_widths()
    if not widths:
        raise ConfigError("model has no dropout layers; masked passes impossible")
    if config.mask_rate is not None:
        rate = config.mask_rate
    else:
        rates = {l.dropout_rate for l in spec.layers
                 if l.name in widths and l.dropout_rate > 0}
        rate = rates.pop() if len(rates) == 1 else max(
            (l.dropout_rate for l in spec.layers if l.name in widths), default=0.0)
    return sample_mask(derive_seed(config.seed, "mask", member_index), d, rate, widths)


def _proj_seed(config: EnsembleConfig, member_index: int, d: int) -> int:
    return derive_seed(config.seed, "proj", member_index, d)


def _unit_view(member: TrainedMember, mask: Optional[DropoutMask]) -> ModelView:
    return ModelView(member.spec, member.params.data, mask=mask)


def _eval_unit(view: ModelView, train_data: Dataset, test_data: Dataset,
               config: EnsembleConfig, projection_seed: int, member_id: str,
               ledger: Optional[CostLedger]):
    """One ensemble unit -> FeaturePack (trak) or AttributionMatrix."""
    if config.method == "trak":
        return build_feature_pack(view, train_data, test_data, config.output_fn,
                                  config.proj_dim, projection_seed,
                                  projection=config.projection, lam=config.lam,
                                  member_id=member_id, ledger=ledger)
    if config.method == "influence_cg":
        return influence_cg(view, train_data, test_data, config.output_fn,
                            damping=config.damping, max_iters=config.cg_max_iters,
                            tol=config.cg_tol, ledger=ledger)
    if config.method == "grad_dot":
        return grad_dot(view, train_data, test_data, config.output_fn, ledger=ledger)
    return grad_cos(view, train_data, test_data, config.output_fn, ledger=ledger)


def _aggregate_units(results: list, config: EnsembleConfig) -> AttributionMatrix:
    if config.method == "trak":
        return trak_aggregate(results)
    return aggregate_average(results)


def _run_jobs(jobs: list, worker, n_procs: int) -> list:
    """Order-preserving map; results are reduced by unit index no matter
    how the work was scheduled."""
    if n_procs <= 1 or len(jobs) <= 1:
        return [worker(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_procs) as pool:
        return list(pool.map(worker, jobs))


@dataclass
class _UnitJob:
    member: TrainedMember
    mask: Optional[DropoutMask]
    projection_seed: int
    member_id: str
    train_data: Dataset
    test_data: Dataset
    config: EnsembleConfig
    timers: bool = False


def _run_unit_job(job: _UnitJob):
    ledger = CostLedger(timers_enabled=job.timers)
    view = _unit_view(job.member, job.mask)
    with ledger.timer("serve"):
        result = _eval_unit(view, job.train_data, job.test_data, job.config,
                            job.projection_seed, job.member_id, ledger)
    return result, ledger


# ---------------------------------------------------------------------------
# strategies


def run_naive(members: list[TrainedMember], train_data: Dataset, test_data: Dataset,
              config: EnsembleConfig, ledger: Optional[CostLedger] = None,
              jobs: int = 1) -> AttributionMatrix:
    """Average the method over the independently trained members; exactly
    the dropout strategy at D = 1 with masking off."""
    unit_jobs = [
        _UnitJob(member=m, mask=None, projection_seed=_proj_seed(config, m.member_index, 1),
                 member_id=f"i{m.member_index}", train_data=train_data,
                 test_data=test_data, config=config,
                 timers=bool(ledger and ledger.timers_enabled))
        for m in members
    ]
    outputs = _run_jobs(unit_jobs, _run_unit_job, jobs)
    results = [r for r, _ in outputs]
    if ledger is not None:
        for _, unit_ledger in outputs:
            ledger.merge(unit_ledger)
    return _aggregate_units(results, config)


def run_dropout_ensemble(members: list[TrainedMember], D: int,
                         train_data: Dataset, test_data: Dataset,
                         config: EnsembleConfig,
                         ledger: Optional[CostLedger] = None,
                         jobs: int = 1) -> AttributionMatrix:
    """Evaluate the method on every dropout-masked variant (i, d) and
    aggregate all I*D units. With dropout_disabled the same passes run
    unmasked but keep their fresh per-pass projection seeds (the
    projection-only ablation control)."""
    if D > 1 and not config.dropout_disabled and not members[0].spec.dropout_widths():
        raise ConfigError("model has no dropout layers; cannot run masked passes")
    unit_jobs = []
    for m in members:
        for d in range(1, D + 1):
            mask = None if config.dropout_disabled else _mask_for(m.spec, config,
                                                                  m.member_index, d)
            unit_jobs.append(_UnitJob(
                member=m, mask=mask,
                projection_seed=_proj_seed(config, m.member_index, d),
                member_id=f"i{m.member_index}.d{d}", train_data=train_data,
                test_data=test_data, config=config,
                timers=bool(ledger and ledger.timers_enabled)))
    outputs = _run_jobs(unit_jobs, _run_unit_job, jobs)
    if ledger is not None:
        for _, unit_ledger in outputs:
            ledger.merge(unit_ledger)
    return _aggregate_units([r for r, _ in outputs], config)


@dataclass
class _ForwardOnlyJob:
    member: TrainedMember
    D: int
    train_data: Dataset
    test_data: Dataset
    config: EnsembleConfig
    timers: bool = False


def _run_forward_only_job(job: _ForwardOnlyJob):
    """One member's share of the forward-only variant: gradient features
    once on the unmasked model, the reweighting diagonal under every mask."""
    config, member = job.config, job.member
    ledger = CostLedger(timers_enabled=job.timers)
    with ledger.timer("serve"):
        base_view = _unit_view(member, None)
        seed = _proj_seed(config, member.member_index, 1)
        Phi = project_grads(base_view, job.train_data, config.output_fn,
                            config.proj_dim, seed, projection=config.projection,
                            ledger=ledger)
        phi = project_grads(base_view, job.test_data, config.output_fn,
                            config.proj_dim, seed, projection=config.projection,
                            ledger=ledger)
        q_diags = []
        for d in range(1, job.D + 1):
            mask = _mask_for(member.spec, config, member.member_index, d)
            q_diags.append(compute_q(_unit_view(member, mask), job.train_data,
                                     ledger=ledger))
        pack = FeaturePack(member_id=f"i{member.member_index}", projection_seed=seed,
                           proj_dim=config.proj_dim, Phi=Phi, phi_test=phi,
                           Q_diag=np.mean(q_diags, axis=0),
                           lam=resolve_lambda(Phi, config.lam))
    return pack, q_diags, ledger


def run_dropout_forward_only(members: list[TrainedMember], D: int,
                             train_data: Dataset, test_data: Dataset,
                             config: EnsembleConfig,
                             ledger: Optional[CostLedger] = None,
                             jobs: int = 1) -> AttributionMatrix:
    """Forward-only masked variant: the reweighting diagonal is averaged
    over all I*D masked forward passes, while gradient features and the
    kernel solve are computed once per member on the unmasked model."""
    if config.method != "trak":
        raise ConfigError("the forward-only variant applies only to trak")
    if not members[0].spec.dropout_widths():
        raise ConfigError("model has no dropout layers; cannot run masked passes")
    member_jobs = [
        _ForwardOnlyJob(member=m, D=D, train_data=train_data, test_data=test_data,
                        config=config, timers=bool(ledger and ledger.timers_enabled))
        for m in members
    ]
    outputs = _run_jobs(member_jobs, _run_forward_only_job, jobs)
    packs = [pack for pack, _, _ in outputs]
    q_diags = [q for _, qs, _ in outputs for q in qs]
    if ledger is not None:
        for _, _, unit_ledger in outputs:
            ledger.merge(unit_ledger)
    return trak_scores(q_diags, packs)


@dataclass
class _LoraJob:
    member: TrainedMember
    l: int
    train_data: Dataset
    test_data: Dataset
    config: EnsembleConfig
    timers: bool = False


def _run_lora_job(job: _LoraJob):
    config, member = job.config, job.member
    ledger = CostLedger(timers_enabled=job.timers)
    targets = (list(config.lora_targets) if config.lora_targets is not None
               else default_lora_targets(member.spec))
    if not targets:
        raise ConfigError("model has no adapter-capable attention projections")
    init_seed = derive_seed(config.seed, "lora_init", member.member_index, job.l)
    subset_seed = derive_seed(config.seed, "lora_subset", member.member_index, job.l)
    adapters = attach_lora(member.spec, member.params, targets,
                           config.lora_rank, config.lora_alpha, init_seed)
    fine_tune_lora(member, adapters, job.train_data, subset_seed,
                   config=config.lora_train_config(subset_seed), ledger=ledger)
    view = ModelView(member.spec, member.params.data, adapters=adapters,
                     adapter_grads_only=not config.lora_full_gradients)
    with ledger.timer("serve"):
        result = _eval_unit(view, job.train_data, job.test_data, config,
                            _proj_seed(config, member.member_index, job.l),
                            f"i{member.member_index}.l{job.l}", ledger)
    return result, ledger


def run_lora_ensemble(members: list[TrainedMember], L: int,
                      train_data: Dataset, test_data: Dataset,
                      config: EnsembleConfig,
                      ledger: Optional[CostLedger] = None,
                      jobs: int = 1) -> AttributionMatrix:
    """Fine-tune L adapter sets per member and aggregate the method over
    all I*L adapted models, with gradients restricted to adapter
    parameters unless lora_full_gradients is set."""
    unit_jobs = [
        _LoraJob(member=m, l=l, train_data=train_data, test_data=test_data,
                 config=config, timers=bool(ledger and ledger.timers_enabled))
        for m in members for l in range(1, L + 1)
    ]
    outputs = _run_jobs(unit_jobs, _run_lora_job, jobs)
    if ledger is not None:
        for _, unit_ledger in outputs:
            ledger.merge(unit_ledger)
    return _aggregate_units([r for r, _ in outputs], config)


def run_checkpoint_ensemble(member: TrainedMember, train_data: Dataset,
                            test_data: Dataset, config: EnsembleConfig,
                            ledger: Optional[CostLedger] = None,
                            jobs: int = 1) -> AttributionMatrix:
    """Treat stored intermediate checkpoints of one training run as
    ensemble units, optionally composed with D masked passes each."""
    epochs = list(config.checkpoint_epochs)
    missing = [e for e in epochs if e not in member.checkpoints]
    if missing:
        raise ConfigError(f"member has no checkpoint for epochs {missing}")
    unit_jobs = []
    for slot, epoch in enumerate(epochs, start=1):
        ckpt_member = TrainedMember(
            member_index=slot, spec=member.spec,
            params=member.checkpoints[epoch],
            subset_indices=member.subset_indices, seed=member.seed)
        for d in range(1, config.D + 1):
            mask = None
            if config.D > 1 or config.mask_rate is not None:
                mask = _mask_for(member.spec, config, slot, d)
            unit_jobs.append(_UnitJob(
                member=ckpt_member, mask=mask,
                projection_seed=_proj_seed(config, slot, d),
                member_id=f"c{epoch}.d{d}", train_data=train_data,
                test_data=test_data, config=config,
                timers=bool(ledger and ledger.timers_enabled)))
    outputs = _run_jobs(unit_jobs, _run_unit_job, jobs)
    if ledger is not None:
        for _, unit_ledger in outputs:
            ledger.merge(unit_ledger)
    return _aggregate_units([r for r, _ in outputs], config)


def run_strategy(members: list[TrainedMember], train_data: Dataset,
                 test_data: Dataset, config: EnsembleConfig,
                 ledger: Optional[CostLedger] = None,
                 jobs: int = 1) -> AttributionMatrix:
    """Dispatch on config.strategy; members beyond what the strategy uses
    are ignored (checkpoints uses only the first member)."""
    if config.strategy == "naive":
        return run_naive(members, train_data, test_data, config, ledger, jobs)
    if config.strategy == "dropout":
        return run_dropout_ensemble(members, config.D, train_data, test_data,
                                    config, ledger, jobs)
    if config.strategy == "dropout_forward_only":
        return run_dropout_forward_only(members, config.D, train_data, test_data,
                                        config, ledger, jobs)
    if config.strategy == "lora":
        return run_lora_ensemble(members, config.L, train_data, test_data,
                                 config, ledger, jobs)
    return run_checkpoint_ensemble(members[0], train_data, test_data, config,
                                   ledger, jobs)
