"""Adaptive per-instance margins estimated from batch score statistics.

Each instance's score ``r`` is compared to the batch mean: its Z-score
``(mu - r) / sigma`` grades difficulty and is scaled by ``mu`` as a stand-in
for the unknown oracle margin. Positive raw margins are mapped through
``beta * exp(.)``; non-positive ones become exactly zero. The margins are
constants during differentiation.
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass
from typing import Optional, Sequence

from . import backend
from .core import BatchStats, ScoredInstance, perplexity
from .errors import ValidationError
from .methods import MethodConfig, SIGMA_FLOOR, loss_grad, registry_lookup

DEFAULT_BATCH_SIZE = 32
MARGIN_COLUMNS = ("id", "r", "mu_r", "sigma_r", "zscore", "raw_margin", "scaled_margin", "oracle_margin")


@dataclass(frozen=True)
class AdaptiveMarginBatch:
    r_values: tuple
    stats: BatchStats
    zscores: tuple
    raw_margins: tuple
    scaled_margins: tuple
    beta: float


@dataclass(frozen=True)
class OracleMargin:
    gamma_star: Optional[float]

    @property
    def available(self) -> bool:
        return self.gamma_star is not None

    @classmethod
    def from_instance(cls, instance) -> "OracleMargin":
        return cls(instance.oracle_gap)


def ideal_margin(gamma_star: float, r: float) -> float:
    """The oracle margin where the policy is still short of it, else zero."""
    if not math.isfinite(gamma_star):
        raise ValidationError("non-finite argument")
    return gamma_star if gamma_star - r > 0.0 else 0.0


def compute_adaptive_margins(
    r_values: Sequence[float],
    beta: float,
    clamp_mu: bool = False,
    kernels=None,
) -> AdaptiveMarginBatch:
    """Margins for one batch of scores.

    With ``clamp_mu`` the mean is floored at zero before it scales the
    Z-scores, so a batch with negative mean gets no margins at all.
    """
    if len(r_values) == 0:
        raise ValidationError("empty batch")
    if not beta > 0:
        raise ValidationError("beta must be > 0")
    k = kernels or backend.kernels
    mu, sigma, z, raw, scaled = k.adaptive_margins(r_values, float(beta), bool(clamp_mu), SIGMA_FLOOR)
    return AdaptiveMarginBatch(
        r_values=tuple(float(v) for v in r_values),
        stats=BatchStats(mu_r=mu, sigma_r=sigma, count=len(r_values)),
        zscores=tuple(z.tolist()),
        raw_margins=tuple(raw.tolist()),
        scaled_margins=tuple(scaled.tolist()),
        beta=float(beta),
    )


def _scores(scored_batch: Sequence[ScoredInstance], beta: float) -> list:
    return [
        (beta / s.instance.chosen_length) * s.logp_chosen - (beta / s.instance.rejected_length) * s.logp_rejected
        for s in scored_batch
    ]


def amapo_loss_grad(scored_batch: Sequence[ScoredInstance], config: Optional[MethodConfig] = None) -> list:
    """Per-instance loss and stop-gradient partials for one batch."""
    config = config or MethodConfig()
    if not scored_batch:
        raise ValidationError("empty batch")
    spec = registry_lookup("amapo", config)
    batch = compute_adaptive_margins(_scores(scored_batch, config.beta), config.beta, config.clamp_mu)
    out = []
    for s, margin in zip(scored_batch, batch.scaled_margins):
        inst = s.instance
        out.append(
            loss_grad(spec, s.logp_chosen, s.logp_rejected, margin, inst.chosen_length, inst.rejected_length)
        )
    return out


def ppl_equivalence_check(scored_batch: Sequence[ScoredInstance], beta: float) -> tuple:
    """Return ``(exp(mu_r / beta), geometric mean of PPL_l / PPL_w)``."""
    if not scored_batch:
        raise ValidationError("empty batch")
    r = _scores(scored_batch, beta)
    lhs = math.exp((math.fsum(r) / len(r)) / beta)
    ratios = [
        perplexity(s.logp_rejected, s.instance.rejected_length) / perplexity(s.logp_chosen, s.instance.chosen_length)
        for s in scored_batch
    ]
    return lhs, statistics.geometric_mean(ratios)


def margin_rows(scored: Sequence[ScoredInstance], beta: float, batch_size: int = DEFAULT_BATCH_SIZE, clamp_mu=False):
    """Rows of the margin dump, estimating margins over consecutive batches."""
    rows = []
    for start in range(0, len(scored), batch_size):
        chunk = scored[start : start + batch_size]
        batch = compute_adaptive_margins(_scores(chunk, beta), beta, clamp_mu)
        for i, s in enumerate(chunk):
            rows.append(
                {
                    "id": s.instance.id,
                    "r": batch.r_values[i],
                    "mu_r": batch.stats.mu_r,
                    "sigma_r": batch.stats.sigma_r,
                    "zscore": batch.zscores[i],
                    "raw_margin": batch.raw_margins[i],
                    "scaled_margin": batch.scaled_margins[i],
                    "oracle_margin": s.instance.oracle_gap,
                }
            )
    return rows


def write_margins_csv(handle, rows) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(MARGIN_COLUMNS)
    for row in rows:
        writer.writerow(["" if row[c] is None else (row[c] if c == "id" else repr(float(row[c]))) for c in MARGIN_COLUMNS])


def read_margins_csv(handle) -> list:
    reader = csv.DictReader(handle)
    if tuple(reader.fieldnames or ()) != MARGIN_COLUMNS:
        raise ValidationError(f"margin CSV must have columns {', '.join(MARGIN_COLUMNS)}")
    rows = []
    for raw in reader:
        row = {"id": raw["id"]}
        for c in MARGIN_COLUMNS[1:]:
            row[c] = None if raw[c] == "" else float(raw[c])
        rows.append(row)
    return rows
