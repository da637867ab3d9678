"""Margin-based preference losses and their analytic gradients.

Every method is written in the common form

    L = -( m(h_w(log pi_w) - h_l(log pi_l) - gamma) + Lambda(log pi_w) )

and evaluated on scalars: the policy log-probabilities ``a_w``/``a_l``, the
reference log-probabilities ``c_w``/``c_l``, and the response lengths.
Gradients are taken with respect to ``(a_w, a_l)`` with the margin (and any
other batch statistic) held fixed.

``d_theta`` is the push on the ranking score, ``-dL/dr``; for the logistic
methods it equals ``sigmoid(gamma - r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .core import BatchStats, ScoredInstance, batch_stats, log_sigmoid, sigmoid
from .errors import ValidationError

METHOD_NAMES = (
    "dpo",
    "ipo",
    "slic",
    "cpo",
    "odpo",
    "kto",
    "simpo",
    "focalpo",
    "alpha_dpo",
    "amapo",
)
LOGISTIC_METHODS = frozenset({"dpo", "cpo", "odpo", "simpo", "alpha_dpo", "amapo"})
REFERENCE_METHODS = frozenset({"dpo", "ipo", "slic", "odpo", "kto", "focalpo", "alpha_dpo"})
ORACLE_METHODS = frozenset({"odpo"})
LENGTH_NORMALIZED = frozenset({"simpo", "alpha_dpo", "amapo"})
# Methods whose margin is structurally absent rather than zero.
MARGINLESS = frozenset({"cpo", "kto"})

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class MethodConfig:
    """Hyperparameters; each method reads only the fields it uses."""

    beta: float = 2.0
    gamma_const: float = 1.0
    tau: float = 1.0
    delta_r_from_oracle: bool = True
    lambda_sft: float = 1.0
    lambda_w: float = 1.0
    lambda_l: float = 1.0
    focal_gamma: float = 1.0
    alpha: float = 0.05
    alpha_dataset_norm: bool = False
    clamp_mu: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError("beta must be > 0")
        if not self.tau > 0:
            raise ValidationError("tau must be > 0")
        if self.lambda_sft < 0:
            raise ValidationError("lambda_sft must be ≥ 0")
        if not (self.lambda_w > 0 and self.lambda_l > 0):
            raise ValidationError("lambda_w and lambda_l must be > 0")
        if self.focal_gamma < 0:
            raise ValidationError("focal_gamma must be ≥ 0")
        if self.alpha < 0:
            raise ValidationError("alpha must be ≥ 0")


@dataclass(frozen=True)
class MethodSpec:
    """Decomposition of one method into scoring function, transforms, margin and auxiliary term."""

    name: str
    scoring_m: str
    transform_hw: str
    transform_hl: str
    margin_source: str
    aux_lambda: str
    config: MethodConfig = field(default_factory=MethodConfig)

    @property
    def is_logistic(self) -> bool:
        return self.name in LOGISTIC_METHODS

    @property
    def needs_reference(self) -> bool:
        return self.name in REFERENCE_METHODS

    @property
    def needs_oracle(self) -> bool:
        return self.name in ORACLE_METHODS

    @property
    def has_margin(self) -> bool:
        return self.name not in MARGINLESS


_DECOMPOSITIONS = {
    "dpo": ("logistic-log", "beta*a", "beta*a", "reference-ratio", "none"),
    "ipo": ("squared", "a", "a", "reference-ratio-plus-offset", "none"),
    "slic": ("hinge", "a", "a", "reference-ratio", "linear"),
    "cpo": ("logistic-log", "beta*a", "beta*a", "none", "linear"),
    "odpo": ("logistic-log", "beta*a", "beta*a", "reference-ratio-plus-reward-gap", "none"),
    "kto": (
        "identity",
        "lambda_w*sigmoid(beta*(a-c_w)-z_ref)",
        "lambda_l*sigmoid(beta*(a-c_l)-z_ref)",
        "none",
        "none",
    ),
    "simpo": ("logistic-log", "beta/|y_w|*a", "beta/|y_l|*a", "constant", "none"),
    "focalpo": ("focal", "beta*a", "beta*a", "reference-ratio", "none"),
    "alpha_dpo": ("logistic-log", "beta/|y_w|*a", "beta/|y_l|*a", "alpha-adaptive", "none"),
    "amapo": ("logistic-log", "beta/|y_w|*a", "beta/|y_l|*a", "amapo-adaptive", "none"),
}


def registry_lookup(name: str, config: Optional[MethodConfig] = None) -> MethodSpec:
    if name not in _DECOMPOSITIONS:
        raise ValidationError(f"unknown method {name!r}; valid names: {', '.join(METHOD_NAMES)}")
    m, hw, hl, margin, aux = _DECOMPOSITIONS[name]
    return MethodSpec(name, m, hw, hl, margin, aux, config or MethodConfig())


@dataclass(frozen=True)
class LossGrad:
    loss: float
    d_logp_w: float
    d_logp_l: float
    d_theta_magnitude: float
    margin_used: Optional[float]
    kink: bool = False


# --- scalar kernels -------------------------------------------------------


def _slopes(spec: MethodSpec, len_w: int, len_l: int) -> tuple:
    beta = spec.config.beta
    if spec.name in LENGTH_NORMALIZED:
        return beta / len_w, beta / len_l
    if spec.name in ("ipo", "slic"):
        return 1.0, 1.0
    return beta, beta


def _kto_parts(cfg: MethodConfig, a_w, a_l, c_w, c_l, z_ref):
    x_w = cfg.beta * (a_w - c_w) - z_ref
    x_l = cfg.beta * (a_l - c_l) - z_ref
    return x_w, x_l


def score(spec: MethodSpec, a_w, a_l, len_w=1, len_l=1, c_w=None, c_l=None, z_ref=0.0) -> float:
    """Ranking score ``h_w(a_w) - h_l(a_l)`` on raw scalars."""
    if spec.name == "kto":
        cfg = spec.config
        x_w, x_l = _kto_parts(cfg, a_w, a_l, c_w, c_l, z_ref)
        return cfg.lambda_w * sigmoid(x_w) - cfg.lambda_l * sigmoid(x_l)
    s_w, s_l = _slopes(spec, len_w, len_l)
    return s_w * a_w - s_l * a_l


def static_margin(spec: MethodSpec, c_w=None, c_l=None, delta_r=None) -> Optional[float]:
    """Margin of the methods whose margin does not depend on the batch."""
    cfg = spec.config
    name = spec.name
    if name in MARGINLESS:
        return None
    if name == "simpo":
        return cfg.gamma_const
    if name in ("alpha_dpo", "amapo"):
        raise ValidationError(f"{name} margins are batch-dependent")
    c_ref = c_w - c_l
    if name in ("dpo", "focalpo"):
        return cfg.beta * c_ref
    if name == "ipo":
        return c_ref + 1.0 / (2.0 * cfg.beta)
    if name == "slic":
        return c_ref
    if name == "odpo":
        return cfg.beta * c_ref + delta_r
    raise AssertionError(name)


def loss_grad(
    spec: MethodSpec,
    a_w,
    a_l,
    margin,
    len_w=1,
    len_l=1,
    c_w=None,
    c_l=None,
    z_ref=0.0,
) -> LossGrad:
    """Loss and partials w.r.t. ``(a_w, a_l)`` with ``margin`` held fixed.

    Margin-free methods (cpo, kto) ignore ``margin``.
    """
    cfg = spec.config
    name = spec.name

    if name == "kto":
        x_w, x_l = _kto_parts(cfg, a_w, a_l, c_w, c_l, z_ref)
        s_w, s_l = sigmoid(x_w), sigmoid(x_l)
        # lambda_w * (1 - sigma_w) + lambda_l * sigma_l == lambda_w - score
        loss = cfg.lambda_w * sigmoid(-x_w) + cfg.lambda_l * s_l
        hw_prime = cfg.lambda_w * cfg.beta * s_w * sigmoid(-x_w)
        hl_prime = cfg.lambda_l * cfg.beta * s_l * sigmoid(-x_l)
        return LossGrad(loss, -hw_prime, hl_prime, 1.0, None)

    s_w, s_l = _slopes(spec, len_w, len_l)
    r = s_w * a_w - s_l * a_l
    if name in MARGINLESS:
        margin = None
    gamma = 0.0 if margin is None else margin
    u = r - gamma
    kink = False

    if name in LOGISTIC_METHODS:
        d = sigmoid(-u)
        loss = -log_sigmoid(u)
        aux = 0.0
        if name == "cpo":
            loss -= cfg.lambda_sft * a_w
            aux = cfg.lambda_sft
        d_w = -s_w * d - aux
        d_l = s_l * d
    elif name == "ipo":
        loss = u * u
        d = -2.0 * u
        d_w = -s_w * d
        d_l = s_l * d
    elif name == "slic":
        arg = 1.0 - cfg.tau * u
        kink = arg == 0.0
        d = cfg.tau if arg > 0.0 else 0.0
        loss = max(0.0, arg) - cfg.lambda_sft * a_w
        d_w = -s_w * d - cfg.lambda_sft
        d_l = s_l * d
    elif name == "focalpo":
        g = cfg.focal_gamma
        lp = log_sigmoid(u)
        p_g = math.exp(g * lp)
        loss = -p_g * lp
        d = p_g * sigmoid(-u) * (1.0 + g * lp)
        d_w = -s_w * d
        d_l = s_l * d
    else:
        raise AssertionError(name)

    return LossGrad(loss, d_w, d_l, d, margin, kink)


def loss_value(spec: MethodSpec, a_w, a_l, margin, len_w=1, len_l=1, c_w=None, c_l=None, z_ref=0.0) -> float:
    return loss_grad(spec, a_w, a_l, margin, len_w, len_l, c_w, c_l, z_ref).loss


# --- batch preparation ----------------------------------------------------


def kto_reference_point(spec: MethodSpec, a_l: Sequence[float], c_l: Sequence[float]) -> float:
    """Clamped batch-mean KL estimate from the rejected responses."""
    beta = spec.config.beta
    values = [beta * (a - c) for a, c in zip(a_l, c_l)]
    if not values:
        raise ValidationError("empty batch")
    return max(0.0, math.fsum(values) / len(values))


def alpha_margins(spec: MethodSpec, a_w, a_l, c_w, c_l, stats: Optional[BatchStats] = None) -> list:
    """``gamma_const + alpha * Z(M)`` where ``M`` is the DPO implicit reward gap."""
    cfg = spec.config
    m = alpha_gaps(spec, a_w, a_l, c_w, c_l)
    if stats is None:
        stats = batch_stats(m)
    if stats.sigma_r < SIGMA_FLOOR:
        z = [0.0] * len(m)
    else:
        z = [(v - stats.mu_r) / stats.sigma_r for v in m]
    return [cfg.gamma_const + cfg.alpha * zi for zi in z]


def alpha_gaps(spec: MethodSpec, a_w, a_l, c_w, c_l) -> list:
    beta = spec.config.beta
    return [beta * ((aw - cw) - (al - cl)) for aw, al, cw, cl in zip(a_w, a_l, c_w, c_l)]


@dataclass
class BatchEvaluation:
    scores: list
    margins: list
    results: list
    z_ref: Optional[float] = None

    @property
    def losses(self) -> list:
        return [g.loss for g in self.results]

    @property
    def d_theta(self) -> list:
        return [g.d_theta_magnitude for g in self.results]


def evaluate_batch(
    spec: MethodSpec,
    a_w: Sequence[float],
    a_l: Sequence[float],
    len_w: Sequence[int],
    len_l: Sequence[int],
    c_w: Optional[Sequence[float]] = None,
    c_l: Optional[Sequence[float]] = None,
    delta_r: Optional[Sequence[float]] = None,
    alpha_stats: Optional[BatchStats] = None,
    margins: Optional[Sequence[Optional[float]]] = None,
    z_ref: Optional[float] = None,
) -> BatchEvaluation:
    """Prepare batch statistics, then evaluate every instance with them frozen.

    Passing ``margins`` (and ``z_ref`` for KTO) skips the estimation step and
    uses the given values instead, which is how finite-difference checks
    hold the batch statistics fixed.
    """
    n = len(a_w)
    if n == 0:
        raise ValidationError("empty batch")
    if spec.needs_reference and (c_w is None or c_l is None):
        raise ValidationError("reference log-probs required")
    if spec.needs_oracle:
        if not spec.config.delta_r_from_oracle:
            delta_r = [0.0] * n
        elif delta_r is None:
            raise ValidationError("oracle rewards required")
    if c_w is None:
        c_w = c_l = [None] * n

    if z_ref is None:
        z_ref = kto_reference_point(spec, a_l, c_l) if spec.name == "kto" else 0.0

    scores = [score(spec, a_w[i], a_l[i], len_w[i], len_l[i], c_w[i], c_l[i], z_ref) for i in range(n)]

    if margins is not None:
        if len(margins) != n:
            raise ValidationError("one margin per instance required")
        margins = list(margins)
    elif spec.name == "amapo":
        from .amapo import compute_adaptive_margins

        margins = list(
            compute_adaptive_margins(scores, spec.config.beta, clamp_mu=spec.config.clamp_mu).scaled_margins
        )
    elif spec.name == "alpha_dpo":
        margins = alpha_margins(spec, a_w, a_l, c_w, c_l, alpha_stats)
    else:
        margins = [
            static_margin(spec, c_w[i], c_l[i], None if delta_r is None else delta_r[i]) for i in range(n)
        ]

    results = [
        loss_grad(spec, a_w[i], a_l[i], margins[i], len_w[i], len_l[i], c_w[i], c_l[i], z_ref) for i in range(n)
    ]
    return BatchEvaluation(scores, margins, results, z_ref if spec.name == "kto" else None)


def _unpack(scored_batch: Sequence[ScoredInstance], spec: MethodSpec):
    inst = [s.instance for s in scored_batch]
    a_w = [s.logp_chosen for s in scored_batch]
    a_l = [s.logp_rejected for s in scored_batch]
    len_w = [i.chosen_length for i in inst]
    len_l = [i.rejected_length for i in inst]
    c_w = c_l = delta = None
    if spec.needs_reference:
        if not all(i.has_reference for i in inst):
            raise ValidationError("reference log-probs required")
        c_w = [i.ref_logp_chosen for i in inst]
        c_l = [i.ref_logp_rejected for i in inst]
    if spec.needs_oracle and spec.config.delta_r_from_oracle:
        if not all(i.has_oracle for i in inst):
            raise ValidationError("oracle rewards required")
        delta = [i.oracle_gap for i in inst]
    return a_w, a_l, len_w, len_l, c_w, c_l, delta


def evaluate_scored_batch(spec: MethodSpec, scored_batch: Sequence[ScoredInstance], **kwargs) -> BatchEvaluation:
    return evaluate_batch(spec, *_unpack(scored_batch, spec), **kwargs)


# --- per-instance public surface -----------------------------------------


def _single(spec: MethodSpec, scored: ScoredInstance):
    a_w, a_l, len_w, len_l, c_w, c_l, delta = _unpack([scored], spec)
    return a_w[0], a_l[0], len_w[0], len_l[0], (c_w or [None])[0], (c_l or [None])[0], (delta or [None])[0]


def instance_score(spec: MethodSpec, scored: ScoredInstance, z_ref: float = 0.0) -> float:
    a_w, a_l, len_w, len_l, c_w, c_l, _ = _single(spec, scored)
    return score(spec, a_w, a_l, len_w, len_l, c_w, c_l, z_ref)


def instance_margin(spec: MethodSpec, scored: ScoredInstance) -> Optional[float]:
    """Margin for a method whose margin is defined per instance."""
    _, _, _, _, c_w, c_l, delta = _single(spec, scored)
    return static_margin(spec, c_w, c_l, delta)


def unified_loss(spec: MethodSpec, scored: ScoredInstance, margin: Optional[float], z_ref: float = 0.0) -> float:
    return unified_grad(spec, scored, margin, z_ref).loss


def unified_grad(spec: MethodSpec, scored: ScoredInstance, margin: Optional[float], z_ref: float = 0.0) -> LossGrad:
    a_w, a_l, len_w, len_l, c_w, c_l, _ = _single(spec, scored)
    if spec.has_margin and margin is None:
        raise ValidationError(f"{spec.name} requires a margin")
    return loss_grad(spec, a_w, a_l, margin, len_w, len_l, c_w, c_l, z_ref)
