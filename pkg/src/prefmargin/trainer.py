"""Deterministic preference-optimization training of the toy policy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import backend
from .core import SPLIT_TAGS, PreferenceInstance, ScoredInstance, batch_stats
from .diagnostics import ReportRow, build_report_row, histogram
from .errors import DivergenceError, ValidationError
from .features import FeatureMap
from .methods import METHOD_NAMES, MethodConfig, MethodSpec, alpha_gaps, evaluate_batch, registry_lookup
from .policy import AdamState, Checkpoint, PairTensors, PolicyModel, ReferenceModel, adam_step, cosine_lr, pair_gradient, pair_logprobs


@dataclass(frozen=True)
class TrainConfig:
    method: str = "amapo"
    method_config: MethodConfig = field(default_factory=MethodConfig)
    learning_rate: float = 1e-2
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_ratio: float = 0.1
    init_scale: float = 0.1
    shuffle: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if self.method not in METHOD_NAMES:
            raise ValidationError(f"unknown method {self.method!r}; valid names: {', '.join(METHOD_NAMES)}")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValidationError("epochs must be ≥ 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be ≥ 1")

    @property
    def spec(self) -> MethodSpec:
        return registry_lookup(self.method, self.method_config)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method_config"] = asdict(self.method_config)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["method_config"] = MethodConfig(**d["method_config"])
        return cls(**d)


class SplitTensors:
    """Cached features and frozen reference log-probabilities of one split."""

    def __init__(self, instances: Sequence[PreferenceInstance], feature_map: FeatureMap, reference: ReferenceModel, kernels):
        self.instances = list(instances)
        self.pairs = PairTensors.encode(feature_map, self.instances)
        self.ref_w, self.ref_l = pair_logprobs(reference.weights, self.pairs, kernels)
        gaps = [i.oracle_gap for i in self.instances]
        self.delta_r = None if any(g is None for g in gaps) else np.array(gaps)

    def __len__(self):
        return len(self.instances)


def _inputs(split: SplitTensors, idx, logp_w, logp_l):
    pairs = split.pairs
    return dict(
        a_w=logp_w.tolist(),
        a_l=logp_l.tolist(),
        len_w=pairs.len_w[idx].tolist(),
        len_l=pairs.len_l[idx].tolist(),
        c_w=split.ref_w[idx].tolist(),
        c_l=split.ref_l[idx].tolist(),
        delta_r=None if split.delta_r is None else split.delta_r[idx].tolist(),
    )


def _evaluate_guarded(batch_id, spec, **kwargs):
    """``evaluate_batch`` with overflow to non-finite values reported as divergence."""
    try:
        return evaluate_batch(spec, **kwargs)
    except ValidationError as exc:
        if "non-finite" not in str(exc):
            raise
        raise DivergenceError(f"divergence: {exc}", batch_id=batch_id) from None


def batch_loss_and_grad(
    spec: MethodSpec,
    weights,
    split: SplitTensors,
    idx,
    kernels=None,
    margins=None,
    z_ref=None,
    alpha_stats=None,
    batch_id=None,
):
    """Mean batch loss, its gradient w.r.t. weights, and the per-instance evaluation.

    ``margins``/``z_ref`` freeze the batch statistics (they are estimated
    from the current weights when omitted).
    """
    k = kernels or backend.kernels
    idx = np.asarray(idx, dtype=np.int64)
    sub = split.pairs.take(idx)
    logp = k.candidate_logprobs(sub.phi, weights, sub.offsets)
    if not np.all(np.isfinite(logp)):
        raise DivergenceError("divergence: non-finite log-probabilities", batch_id=batch_id)
    logp_w, logp_l = logp[0::2], logp[1::2]
    ev = _evaluate_guarded(
        batch_id,
        spec,
        **_inputs(split, idx, logp_w, logp_l),
        alpha_stats=alpha_stats,
        margins=margins,
        z_ref=z_ref,
    )
    n = len(idx)
    loss = math.fsum(ev.losses) / n
    d_w = np.array([g.d_logp_w for g in ev.results]) / n
    d_l = np.array([g.d_logp_l for g in ev.results]) / n
    grad = pair_gradient(weights, sub, d_w, d_l, k, logp=logp)
    return loss, grad, ev, (logp_w, logp_l)


def _alpha_dataset_stats(spec, weights, split: SplitTensors, kernels):
    logp_w, logp_l = pair_logprobs(weights, split.pairs, kernels)
    return batch_stats(alpha_gaps(spec, logp_w, logp_l, split.ref_w, split.ref_l))


@dataclass
class EpochSnapshot:
    epoch: int
    split: str
    scores: list
    margins: list
    d_theta: list
    logp_chosen: np.ndarray
    logp_rejected: np.ndarray
    batch_means: list


@dataclass
class TrainResult:
    model: PolicyModel
    reference: ReferenceModel
    config: TrainConfig
    rows: list
    histograms: list
    steps: int

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            weights=self.model.weights.tolist(),
            reference_weights=self.reference.weights.tolist(),
            feature_map=self.model.feature_map.to_dict(),
            config=self.config.to_dict(),
            seed=self.config.seed,
        )


def evaluate_split(
    spec: MethodSpec, weights, split: SplitTensors, batch_size: int, kernels=None, alpha_stats=None, label="eval"
):
    """Score a split in consecutive batches (dataset order) with the method's batch statistics."""
    k = kernels or backend.kernels
    logp_w, logp_l = pair_logprobs(weights, split.pairs, k)
    scores, margins, losses, d_theta, batch_means = [], [], [], [], []
    for start in range(0, len(split), batch_size):
        idx = np.arange(start, min(start + batch_size, len(split)))
        ev = _evaluate_guarded(
            f"{label}/{start // batch_size}", spec, **_inputs(split, idx, logp_w[idx], logp_l[idx]), alpha_stats=alpha_stats
        )
        scores += ev.scores
        margins += ev.margins
        losses += ev.losses
        d_theta += ev.d_theta
        mu = math.fsum(ev.scores) / len(idx)
        batch_means += [mu] * len(idx)
    return scores, margins, losses, d_theta, logp_w, logp_l, batch_means


def _report_row(epoch, tag, spec, split, scores, margins, losses, d_theta, logp_w, logp_l) -> ReportRow:
    gaps = None if split.delta_r is None else split.delta_r.tolist()
    return build_report_row(epoch, tag, spec, logp_w, logp_l, scores, margins, losses, d_theta, gaps)


def train(
    config: TrainConfig,
    dataset,
    feature_map: Optional[FeatureMap] = None,
    kernels=None,
    on_epoch: Optional[Callable] = None,
    snapshot_epochs: Optional[Sequence[int]] = None,
) -> TrainResult:
    """Train on the ``id`` split and report every split after each epoch.

    ``dataset`` is a list of instances or anything with an ``all()`` method.
    Epoch 0 in the report is the initial policy. ``on_epoch(epoch, model,
    snapshots)`` is called after each evaluation with per-split
    :class:`EpochSnapshot` objects.
    """
    k = kernels or backend.kernels
    instances = dataset.all() if hasattr(dataset, "all") else list(dataset)
    if not instances:
        raise ValidationError("dataset is empty")
    by_tag = {tag: [i for i in instances if i.split_tag == tag] for tag in SPLIT_TAGS}
    train_set = by_tag["id"]
    if not train_set:
        raise ValidationError("dataset has no 'id' instances to train on")
    if config.batch_size > len(train_set):
        raise ValidationError("batch_size exceeds the training set size")
    if feature_map is None:
        feature_map = FeatureMap(input_dim=train_set[0].dim)

    spec = config.spec
    rng = np.random.default_rng(config.seed)
    model = PolicyModel.initial(feature_map, rng, config.init_scale)
    reference = model.freeze()
    splits = {tag: SplitTensors(insts, feature_map, reference, k) for tag, insts in by_tag.items() if insts}
    if spec.needs_oracle and spec.config.delta_r_from_oracle and splits["id"].delta_r is None:
        raise ValidationError("oracle rewards required")
    train_split = splits["id"]

    n = len(train_split)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    final_epoch = config.epochs
    snapshot_epochs = {0, final_epoch} if snapshot_epochs is None else set(snapshot_epochs)

    rows, hists = [], []

    def evaluate(epoch, weights):
        alpha_stats = None
        if spec.name == "alpha_dpo" and spec.config.alpha_dataset_norm:
            alpha_stats = _alpha_dataset_stats(spec, weights, train_split, k)
        snaps = {}
        for tag, split in splits.items():
            scores, margins, losses, d_theta, lw, ll, means = evaluate_split(
                spec, weights, split, config.batch_size, k, alpha_stats, label=f"eval/{tag}/{epoch}"
            )
            if not all(math.isfinite(v) for v in losses):
                raise DivergenceError("divergence: non-finite evaluation loss", batch_id=f"eval/{tag}/{epoch}")
            rows.append(_report_row(epoch, tag, spec, split, scores, margins, losses, d_theta, lw, ll))
            snaps[tag] = EpochSnapshot(epoch, tag, scores, margins, d_theta, lw, ll, means)
            if epoch in snapshot_epochs:
                hists.append(histogram(epoch, tag, "score", scores))
                hists.append(histogram(epoch, tag, "prob_diff", np.exp(lw) - np.exp(ll)))
                hists.append(histogram(epoch, tag, "logp_chosen", lw))
        if on_epoch is not None:
            on_epoch(epoch, model, snaps)

    evaluate(0, model.weights)
    state = AdamState(model.weights.copy(), beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        alpha_stats = None
        if spec.name == "alpha_dpo" and spec.config.alpha_dataset_norm:
            alpha_stats = _alpha_dataset_stats(spec, state.params, train_split, k)
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * config.batch_size : (b + 1) * config.batch_size])
            batch_id = f"{epoch}:{b}"
            loss, grad, _, _ = batch_loss_and_grad(
                spec, state.params, train_split, idx, k, alpha_stats=alpha_stats, batch_id=batch_id
            )
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError("divergence: non-finite loss", batch_id=batch_id)
            state = adam_step(state, grad, cosine_lr(step, total_steps, config.learning_rate, config.warmup_ratio))
            step += 1
        model.weights = state.params.copy()
        if epoch % config.eval_every == 0 or epoch == final_epoch:
            evaluate(epoch, model.weights)

    return TrainResult(model, reference, config, rows, hists, step)


def score_instances(model: PolicyModel, reference: Optional[PolicyModel], instances, kernels=None) -> list:
    """ScoredInstances for a list of instances, filling reference log-probs from ``reference``."""
    from dataclasses import replace

    if not instances:
        return []
    pairs = PairTensors.encode(model.feature_map, instances)
    lw, ll = pair_logprobs(model.weights, pairs, kernels)
    if reference is not None:
        rw, rl = pair_logprobs(reference.weights, pairs, kernels)
        instances = [
            replace(inst, ref_logp_chosen=float(rw[i]), ref_logp_rejected=float(rl[i])) for i, inst in enumerate(instances)
        ]
    return [ScoredInstance(inst, min(0.0, float(lw[i])), min(0.0, float(ll[i]))) for i, inst in enumerate(instances)]
