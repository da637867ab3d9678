"""Linear-softmax policy over a finite candidate set, its frozen reference copy, and Adam."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backend
from .errors import ParseError, ValidationError
from .features import FeatureMap
from .fileio import atomic_write_text

CHECKPOINT_FORMAT = "prefmargin-checkpoint/1"


@dataclass
class PolicyModel:
    weights: np.ndarray
    feature_map: FeatureMap

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        if self.weights.shape != (self.feature_map.output_dim,):
            raise ValidationError(f"weights must have dimension {self.feature_map.output_dim}")
        if not np.all(np.isfinite(self.weights)):
            raise ValidationError("weights must be finite")

    @classmethod
    def initial(cls, feature_map: FeatureMap, rng: np.random.Generator, scale: float = 0.1) -> "PolicyModel":
        return cls(scale * rng.standard_normal(feature_map.output_dim), feature_map)

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.weights.copy(), self.feature_map)

    def freeze(self) -> "ReferenceModel":
        return ReferenceModel(self.weights, self.feature_map)


class ReferenceModel(PolicyModel):
    """A policy whose weights are read-only."""

    def __post_init__(self):
        super().__post_init__()
        self.weights.setflags(write=False)


def policy_logprob(model: PolicyModel, prompt_features, response_features, candidate_set, kernels=None) -> float:
    """``log pi(y | x)`` under a softmax over ``candidate_set``."""
    cands = np.asarray(candidate_set, dtype=np.float64)
    y = np.asarray(response_features, dtype=np.float64)
    matches = np.flatnonzero(np.all(cands == y, axis=1))
    if matches.size == 0:
        raise ValidationError("unknown candidate")
    phi = model.feature_map(prompt_features, cands)
    logp = (kernels or backend.kernels).candidate_logprobs(phi, model.weights, np.array([0, len(cands)]))
    return float(logp[matches[0]])


@dataclass
class PairTensors:
    """Feature rows of a list of instances, chosen and rejected interleaved.

    Each instance's candidate set is its own two responses, so row ``2i`` is
    the chosen response of instance ``i`` and row ``2i + 1`` the rejected one.
    """

    phi: np.ndarray
    len_w: np.ndarray
    len_l: np.ndarray

    @classmethod
    def encode(cls, feature_map: FeatureMap, instances) -> "PairTensors":
        n = len(instances)
        phi = np.empty((2 * n, feature_map.output_dim))
        for i, inst in enumerate(instances):
            phi[2 * i : 2 * i + 2] = feature_map(inst.prompt_features, [inst.chosen_features, inst.rejected_features])
        len_w = np.array([inst.chosen_length for inst in instances], dtype=np.int64)
        len_l = np.array([inst.rejected_length for inst in instances], dtype=np.int64)
        return cls(phi, len_w, len_l)

    def __len__(self) -> int:
        return self.len_w.shape[0]

    def take(self, idx) -> "PairTensors":
        idx = np.asarray(idx, dtype=np.int64)
        rows = np.empty(2 * len(idx), dtype=np.int64)
        rows[0::2] = 2 * idx
        rows[1::2] = 2 * idx + 1
        return PairTensors(self.phi[rows], self.len_w[idx], self.len_l[idx])

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(0, 2 * len(self) + 1, 2, dtype=np.int64)


def pair_logprobs(weights, pairs: PairTensors, kernels=None):
    """Return ``(logp_chosen, logp_rejected)`` arrays."""
    logp = (kernels or backend.kernels).candidate_logprobs(pairs.phi, weights, pairs.offsets)
    return logp[0::2], logp[1::2]


def pair_gradient(weights, pairs: PairTensors, d_logp_w, d_logp_l, kernels=None, logp=None) -> np.ndarray:
    """Chain rule from per-instance loss partials to scorer weights."""
    k = kernels or backend.kernels
    if logp is None:
        logp = k.candidate_logprobs(pairs.phi, weights, pairs.offsets)
    n = len(pairs)
    coefs = np.empty(2 * n)
    coefs[0::2] = d_logp_w
    coefs[1::2] = d_logp_l
    return k.policy_gradient(pairs.phi, pairs.offsets, logp, np.arange(2 * n, dtype=np.int64), coefs)


def param_gradient(model: PolicyModel, instance, d_logp_w: float, d_logp_l: float, kernels=None) -> np.ndarray:
    pairs = PairTensors.encode(model.feature_map, [instance])
    return pair_gradient(model.weights, pairs, [d_logp_w], [d_logp_l], kernels)


# --- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    params: np.ndarray
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.params = np.array(self.params, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.params)
        if self.v is None:
            self.v = np.zeros_like(self.params)


def adam_step(state: AdamState, gradient, lr: float) -> AdamState:
    """One bias-corrected Adam update; returns a new state."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.params.shape:
        raise ValidationError("gradient shape does not match parameters")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(params, m, v, t, state.beta1, state.beta2, state.eps)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float = 0.1) -> float:
    """Linear warmup over the first ``warmup_ratio`` of steps, then cosine decay to zero."""
    warmup = max(1, int(math.ceil(warmup_ratio * total_steps))) if warmup_ratio > 0 else 0
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- checkpoint -----------------------------------------------------------


@dataclass
class Checkpoint:
    weights: list
    reference_weights: list
    feature_map: dict
    config: dict
    seed: int
    format: str = CHECKPOINT_FORMAT

    def policy(self) -> PolicyModel:
        return PolicyModel(np.array(self.weights), FeatureMap.from_dict(self.feature_map))

    def reference(self) -> ReferenceModel:
        return ReferenceModel(np.array(self.reference_weights), FeatureMap.from_dict(self.feature_map))

    def dumps(self) -> str:
        payload = {
            "format": self.format,
            "seed": self.seed,
            "feature_map": self.feature_map,
            "config": self.config,
            "weights": [float(w) for w in self.weights],
            "reference_weights": [float(w) for w in self.reference_weights],
        }
        return json.dumps(payload, sort_keys=True, indent=1, allow_nan=False) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Checkpoint":
        try:
            payload = json.loads(text)
        except ValueError as exc:
            raise ParseError(f"malformed checkpoint ({exc})") from None
        expected = {"format", "seed", "feature_map", "config", "weights", "reference_weights"}
        if not isinstance(payload, dict) or set(payload) != expected:
            raise ParseError(f"checkpoint must have exactly the fields {sorted(expected)}")
        if payload["format"] != CHECKPOINT_FORMAT:
            raise ParseError(f"unsupported checkpoint format {payload['format']!r}", field="format")
        return cls(**payload)

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.loads(Path(path).read_text(encoding="utf-8"))
