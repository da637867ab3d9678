"""Numerically stable primitives and the record types shared across the package."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import ValidationError

SPLIT_TAGS = ("id", "prompt_ood", "response_ood", "mutual_ood")


def _check_finite(x: float) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise ValidationError("non-finite argument")
    return x


def log_sigmoid(x: float) -> float:
    """Return ``log(sigmoid(x))`` without overflow for large ``|x|``."""
    x = _check_finite(x)
    if x >= 0.0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def sigmoid(x: float) -> float:
    x = _check_finite(x)
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class BatchStats:
    """Mean and population standard deviation of per-instance scores in one batch."""

    mu_r: float
    sigma_r: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValidationError("empty batch")
        if not self.sigma_r >= 0.0:
            raise ValidationError("sigma_r must be non-negative")


def batch_stats(r_values: Sequence[float]) -> BatchStats:
    values = [float(v) for v in r_values]
    if not values:
        raise ValidationError("empty batch")
    n = len(values)
    mu = math.fsum(values) / n
    var = math.fsum((v - mu) ** 2 for v in values) / n
    return BatchStats(mu_r=mu, sigma_r=math.sqrt(var), count=n)


def perplexity(logp: float, length: int) -> float:
    """Per-token perplexity ``exp(-logp / length)`` of a sequence."""
    if length == 0:
        raise ValidationError("zero length")
    if length < 0:
        raise ValidationError("length must be positive")
    if logp > 0.0:
        raise ValidationError("log-probability must be ≤ 0")
    return math.exp(-logp / length)


def _as_vector(values) -> tuple:
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class PreferenceInstance:
    """One (prompt, chosen, rejected) triple.

    Features are stored as tuples so instances are hashable and compare by
    value. Log-prob dumps produce instances with empty feature vectors.
    """

    id: str
    prompt_features: tuple
    chosen_features: tuple
    rejected_features: tuple
    chosen_length: int
    rejected_length: int
    ref_logp_chosen: Optional[float] = None
    ref_logp_rejected: Optional[float] = None
    oracle_reward_chosen: Optional[float] = None
    oracle_reward_rejected: Optional[float] = None
    split_tag: str = "id"

    def __post_init__(self):
        for name in ("prompt_features", "chosen_features", "rejected_features"):
            object.__setattr__(self, name, _as_vector(getattr(self, name)))
        dims = {len(self.prompt_features), len(self.chosen_features), len(self.rejected_features)}
        if len(dims) != 1:
            raise ValidationError(f"instance {self.id}: feature vectors differ in dimension")
        for name in ("chosen_length", "rejected_length"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value:
                raise ValidationError(f"instance {self.id}: {name} must be an integer")
            if value < 1:
                raise ValidationError(f"instance {self.id}: {name} must be ≥ 1")
            object.__setattr__(self, name, int(value))
        if (self.ref_logp_chosen is None) != (self.ref_logp_rejected is None):
            raise ValidationError(f"instance {self.id}: ref_logp fields must be present together")
        if (self.oracle_reward_chosen is None) != (self.oracle_reward_rejected is None):
            raise ValidationError(f"instance {self.id}: oracle_reward fields must be present together")
        for name in ("ref_logp_chosen", "ref_logp_rejected"):
            value = getattr(self, name)
            if value is not None and not (math.isfinite(value) and value <= 0.0):
                raise ValidationError(f"instance {self.id}: log-probability must be ≤ 0")
        if self.split_tag not in SPLIT_TAGS:
            raise ValidationError(f"instance {self.id}: unknown split_tag {self.split_tag!r}")

    @property
    def dim(self) -> int:
        return len(self.prompt_features)

    @property
    def has_reference(self) -> bool:
        return self.ref_logp_chosen is not None

    @property
    def has_oracle(self) -> bool:
        return self.oracle_reward_chosen is not None

    @property
    def oracle_gap(self) -> Optional[float]:
        if not self.has_oracle:
            return None
        return self.oracle_reward_chosen - self.oracle_reward_rejected


@dataclass(frozen=True)
class ScoredInstance:
    """An instance together with the current policy's log-probabilities."""

    instance: PreferenceInstance
    logp_chosen: float
    logp_rejected: float

    def __post_init__(self):
        for name in ("logp_chosen", "logp_rejected"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValidationError(f"instance {self.instance.id}: non-finite log-probability")
            if value > 0.0:
                raise ValidationError("log-probability must be ≤ 0")
            object.__setattr__(self, name, value)
