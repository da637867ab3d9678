"""Joint prompt/response feature map shared by the generator and the policy."""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class FeatureMap:
    """``phi(x, y) = [x * y, y]``: elementwise interaction plus a response-only block."""

    kind: str = "hadamard+response"
    input_dim: int = 16

    def __post_init__(self):
        if self.kind != "hadamard+response":
            raise ValidationError(f"unknown feature map {self.kind!r}")
        if self.input_dim < 1:
            raise ValidationError("input_dim must be ≥ 1")

    @property
    def output_dim(self) -> int:
        return 2 * self.input_dim

    def __call__(self, prompt, responses):
        """Map one prompt and a response vector (or a stack of them)."""
        x = np.asarray(prompt, dtype=np.float64)
        y = np.asarray(responses, dtype=np.float64)
        if x.shape[-1] != self.input_dim or y.shape[-1] != self.input_dim:
            raise ValidationError(f"feature dimension must be {self.input_dim}")
        return np.concatenate([x * y, y], axis=-1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim}

    @classmethod
    def from_dict(cls, d) -> "FeatureMap":
        return cls(kind=d["kind"], input_dim=int(d["input_dim"]))
