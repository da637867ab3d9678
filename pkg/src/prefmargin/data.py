"""Synthetic Bradley-Terry preference data and line-delimited JSON I/O.

The generator draws a hidden unit reward vector ``v`` and scores every
candidate with ``r*(x, y) = v . phi(x, y)``. Four splits cross two prompt
sets (train/valid) with two response generators (train/valid), each one an
independently seeded random stream.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import SPLIT_TAGS, PreferenceInstance, ScoredInstance, sigmoid
from .errors import ParseError, ValidationError
from .features import FeatureMap
from .fileio import atomic_write_text

DATASET_REQUIRED = (
    "id",
    "prompt_features",
    "chosen_features",
    "rejected_features",
    "chosen_length",
    "rejected_length",
    "split_tag",
)
DATASET_FIELDS = (
    "id",
    "prompt_features",
    "chosen_features",
    "rejected_features",
    "chosen_length",
    "rejected_length",
    "ref_logp_chosen",
    "ref_logp_rejected",
    "oracle_reward_chosen",
    "oracle_reward_rejected",
    "split_tag",
)
DUMP_REQUIRED = ("id", "logp_policy_chosen", "logp_policy_rejected", "chosen_length", "rejected_length")
DUMP_FIELDS = (
    "id",
    "logp_policy_chosen",
    "logp_policy_rejected",
    "logp_ref_chosen",
    "logp_ref_rejected",
    "chosen_length",
    "rejected_length",
)

# (prompt set, response generator) behind each split tag.
SPLIT_SOURCES = {
    "id": ("train", "train"),
    "prompt_ood": ("valid", "train"),
    "response_ood": ("train", "valid"),
    "mutual_ood": ("valid", "valid"),
}
_PROMPT_SET_CODE = {"train": 0, "valid": 1}


@dataclass(frozen=True)
class GeneratorConfig:
    n_prompts_train: int = 200
    n_prompts_valid: int = 50
    candidates_per_prompt: int = 4
    feature_dim: int = 16
    reward_vector_seed: int = 0
    prompt_seed_train: int = 1
    prompt_seed_valid: int = 2
    response_seed_train: int = 3
    response_seed_valid: int = 4
    preference_noise: bool = False
    length_range: tuple = (5, 50)

    @classmethod
    def from_seed(cls, seed: int, **overrides) -> "GeneratorConfig":
        """Derive five distinct stream seeds from one master seed."""
        states = np.random.SeedSequence(seed).generate_state(5, dtype=np.uint32).tolist()
        keys = (
            "reward_vector_seed",
            "prompt_seed_train",
            "prompt_seed_valid",
            "response_seed_train",
            "response_seed_valid",
        )
        return cls(**{**dict(zip(keys, states)), **overrides})

    def validate(self) -> None:
        if self.candidates_per_prompt < 2:
            raise ValidationError("need at least two candidates")
        if self.n_prompts_train < 1 or self.n_prompts_valid < 1:
            raise ValidationError("prompt counts must be positive")
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be positive")
        if self.prompt_seed_train == self.prompt_seed_valid:
            raise ValidationError("train and valid prompt seeds must differ")
        if self.response_seed_train == self.response_seed_valid:
            raise ValidationError("train and valid response seeds must differ")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValidationError("length_range must satisfy 1 ≤ lo ≤ hi")


@dataclass
class SplitDataset:
    id: list
    prompt_ood: list
    response_ood: list
    mutual_ood: list
    reward_vector: Optional[np.ndarray] = None
    feature_map: Optional[FeatureMap] = None
    metadata: dict = field(default_factory=dict)

    def split(self, tag: str) -> list:
        if tag not in SPLIT_TAGS:
            raise ValidationError(f"unknown split_tag {tag!r}")
        return getattr(self, tag)

    def all(self) -> list:
        return [inst for tag in SPLIT_TAGS for inst in self.split(tag)]

    @classmethod
    def from_instances(cls, instances: Iterable[PreferenceInstance]) -> "SplitDataset":
        parts = {tag: [] for tag in SPLIT_TAGS}
        for inst in instances:
            parts[inst.split_tag].append(inst)
        return cls(**parts)


def bt_prefers_first(r_a: float, r_b: float, rng: np.random.Generator) -> bool:
    """Sample a Bradley-Terry label: True with probability ``sigmoid(r_a - r_b)``."""
    return bool(rng.random() < sigmoid(r_a - r_b))


def _prompts(seed: int, n: int, dim: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, dim))


def generate(config: GeneratorConfig) -> SplitDataset:
    config.validate()
    dim = config.feature_dim
    k = config.candidates_per_prompt
    fmap = FeatureMap(input_dim=dim)
    v = np.random.default_rng(config.reward_vector_seed).standard_normal(fmap.output_dim)
    v /= np.linalg.norm(v)

    prompts = {
        "train": _prompts(config.prompt_seed_train, config.n_prompts_train, dim),
        "valid": _prompts(config.prompt_seed_valid, config.n_prompts_valid, dim),
    }
    response_seeds = {"train": config.response_seed_train, "valid": config.response_seed_valid}
    prompt_seeds = {"train": config.prompt_seed_train, "valid": config.prompt_seed_valid}
    lo, hi = config.length_range

    splits = {}
    metadata = {}
    for tag in SPLIT_TAGS:
        prompt_set, generator = SPLIT_SOURCES[tag]
        x_all = prompts[prompt_set]
        rng = np.random.default_rng([response_seeds[generator], _PROMPT_SET_CODE[prompt_set]])
        responses = rng.standard_normal((len(x_all), k, dim))
        lengths = rng.integers(lo, hi + 1, size=(len(x_all), k))
        label_rng = np.random.default_rng([response_seeds[generator], _PROMPT_SET_CODE[prompt_set], 1])
        instances = []
        for p, x in enumerate(x_all):
            rewards = fmap(x, responses[p]) @ v
            if config.preference_noise and tag == "id":
                i, j = label_rng.choice(k, size=2, replace=False)
                w, l = (i, j) if bt_prefers_first(rewards[i], rewards[j], label_rng) else (j, i)
            else:
                w, l = int(np.argmax(rewards)), int(np.argmin(rewards))
            instances.append(
                PreferenceInstance(
                    id=f"{tag}-{p:05d}",
                    prompt_features=x.tolist(),
                    chosen_features=responses[p, w].tolist(),
                    rejected_features=responses[p, l].tolist(),
                    chosen_length=int(lengths[p, w]),
                    rejected_length=int(lengths[p, l]),
                    oracle_reward_chosen=float(rewards[w]),
                    oracle_reward_rejected=float(rewards[l]),
                    split_tag=tag,
                )
            )
        splits[tag] = instances
        metadata[tag] = {
            "prompt_set": prompt_set,
            "prompt_seed": prompt_seeds[prompt_set],
            "response_generator": generator,
            "response_seed": response_seeds[generator],
        }
    return SplitDataset(**splits, reward_vector=v, feature_map=fmap, metadata=metadata)


# --- line-delimited records ----------------------------------------------


def _reject_constant(name):
    raise ValueError(f"non-finite number {name}")


def _records(text: str):
    for lineno, line in enumerate(io.StringIO(text), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line, parse_constant=_reject_constant)
        except ValueError as exc:
            raise ParseError(f"malformed JSON ({exc})", line=lineno) from None
        if not isinstance(record, dict):
            raise ParseError("record must be a JSON object", line=lineno)
        yield lineno, record


def _check_fields(record, lineno, required, allowed):
    for name in record:
        if name not in allowed:
            raise ParseError("unknown field", line=lineno, field=name)
    for name in required:
        if name not in record:
            raise ParseError("missing required field", line=lineno, field=name)


def _number(record, name, lineno, optional=False):
    value = record.get(name)
    if value is None:
        if optional:
            return None
        raise ParseError("missing required field", line=lineno, field=name)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError("expected a number", line=lineno, field=name)
    return float(value)


def _integer(record, name, lineno):
    value = record[name]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError("expected an integer", line=lineno, field=name)
    if value < 1:
        raise ParseError("length must be ≥ 1", line=lineno, field=name)
    return value


def _vector(record, name, lineno):
    value = record[name]
    if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
        raise ParseError("expected a list of numbers", line=lineno, field=name)
    return [float(v) for v in value]


def _string(record, name, lineno):
    value = record[name]
    if not isinstance(value, str):
        raise ParseError("expected a string", line=lineno, field=name)
    return value


def parse_dataset(text: str) -> list:
    out = []
    for lineno, rec in _records(text):
        _check_fields(rec, lineno, DATASET_REQUIRED, DATASET_FIELDS)
        kwargs = {
            "id": _string(rec, "id", lineno),
            "prompt_features": _vector(rec, "prompt_features", lineno),
            "chosen_features": _vector(rec, "chosen_features", lineno),
            "rejected_features": _vector(rec, "rejected_features", lineno),
            "chosen_length": _integer(rec, "chosen_length", lineno),
            "rejected_length": _integer(rec, "rejected_length", lineno),
            "split_tag": _string(rec, "split_tag", lineno),
        }
        for name in ("ref_logp_chosen", "ref_logp_rejected", "oracle_reward_chosen", "oracle_reward_rejected"):
            kwargs[name] = _number(rec, name, lineno, optional=True)
        try:
            out.append(PreferenceInstance(**kwargs))
        except ValidationError as exc:
            raise ParseError(str(exc), line=lineno) from None
    return out


def format_dataset(instances: Iterable[PreferenceInstance]) -> str:
    lines = []
    for inst in instances:
        rec = {}
        for name in DATASET_FIELDS:
            value = getattr(inst, name)
            if value is None:
                continue
            rec[name] = list(value) if isinstance(value, tuple) else value
        lines.append(json.dumps(rec, allow_nan=False) + "\n")
    return "".join(lines)


def read_dataset(path) -> list:
    return parse_dataset(Path(path).read_text(encoding="utf-8"))


def write_dataset(path, instances: Iterable[PreferenceInstance]) -> None:
    atomic_write_text(path, format_dataset(instances))


def parse_logp_dump(text: str) -> list:
    out = []
    for lineno, rec in _records(text):
        _check_fields(rec, lineno, DUMP_REQUIRED, DUMP_FIELDS)
        values = {}
        for name in ("logp_policy_chosen", "logp_policy_rejected", "logp_ref_chosen", "logp_ref_rejected"):
            value = _number(rec, name, lineno, optional=name.startswith("logp_ref"))
            if value is not None and value > 0.0:
                raise ParseError("log-probability must be ≤ 0", line=lineno, field=name)
            values[name] = value
        try:
            inst = PreferenceInstance(
                id=_string(rec, "id", lineno),
                prompt_features=(),
                chosen_features=(),
                rejected_features=(),
                chosen_length=_integer(rec, "chosen_length", lineno),
                rejected_length=_integer(rec, "rejected_length", lineno),
                ref_logp_chosen=values["logp_ref_chosen"],
                ref_logp_rejected=values["logp_ref_rejected"],
            )
            out.append(ScoredInstance(inst, values["logp_policy_chosen"], values["logp_policy_rejected"]))
        except ValidationError as exc:
            raise ParseError(str(exc), line=lineno) from None
    return out


def format_logp_dump(scored: Iterable[ScoredInstance]) -> str:
    lines = []
    for s in scored:
        inst = s.instance
        rec = {
            "id": inst.id,
            "logp_policy_chosen": s.logp_chosen,
            "logp_policy_rejected": s.logp_rejected,
            "logp_ref_chosen": inst.ref_logp_chosen,
            "logp_ref_rejected": inst.ref_logp_rejected,
            "chosen_length": inst.chosen_length,
            "rejected_length": inst.rejected_length,
        }
        rec = {k: v for k, v in rec.items() if v is not None}
        lines.append(json.dumps(rec, allow_nan=False) + "\n")
    return "".join(lines)


def read_logp_dump(path) -> list:
    return parse_logp_dump(Path(path).read_text(encoding="utf-8"))


def write_logp_dump(path, scored: Iterable[ScoredInstance]) -> None:
    atomic_write_text(path, format_logp_dump(scored))


def check_split_disjointness(dataset: SplitDataset) -> list:
    """Return a list of violated disjointness conditions (empty when all hold)."""
    problems = []
    meta = dataset.metadata
    if meta:
        if meta["id"]["prompt_seed"] == meta["prompt_ood"]["prompt_seed"]:
            problems.append("id and prompt_ood share a prompt seed")
        if meta["id"]["response_seed"] == meta["response_ood"]["response_seed"]:
            problems.append("id and response_ood share a response seed")
        if meta["mutual_ood"]["prompt_seed"] == meta["id"]["prompt_seed"]:
            problems.append("mutual_ood shares the train prompt seed")
        if meta["mutual_ood"]["response_seed"] == meta["id"]["response_seed"]:
            problems.append("mutual_ood shares the train response seed")
    id_prompts = {i.prompt_features for i in dataset.id}
    for tag in ("prompt_ood", "mutual_ood"):
        if id_prompts & {i.prompt_features for i in dataset.split(tag)}:
            problems.append(f"id and {tag} share prompt features")
    id_responses = {f for i in dataset.id for f in (i.chosen_features, i.rejected_features)}
    for tag in ("response_ood", "mutual_ood"):
        if id_responses & {f for i in dataset.split(tag) for f in (i.chosen_features, i.rejected_features)}:
            problems.append(f"id and {tag} share response features")
    return problems

