"""Gradient reversal and the scanner-domain classifier branch."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


def grl(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lam."""
    if lam < 0:
        raise ValueError(f"GRL coefficient must be >= 0, got {lam}")
    return dc.scale_grad(x, -float(lam))


@dataclass
class GrlCoeff:
    """Reversal strength: constant, or the DANN ramp 2/(1+exp(-gamma*p)) - 1."""

    value: float = 1.0
    schedule: str = "constant"
    gamma: float = 10.0

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("GRL lambda must be >= 0")
        if self.schedule not in ("constant", "dann_ramp"):
            raise ValueError(f"unknown GRL schedule {self.schedule!r}")

    def at(self, progress: float) -> float:
        if self.schedule == "constant":
            return self.value
        p = min(max(progress, 0.0), 1.0)
        return 2.0 / (1.0 + math.exp(-self.gamma * p)) - 1.0


class DomainHead:
    """embed_dim -> hidden -> num_domains with GELU in between."""

    def __init__(self, in_dim: int, num_domains: int, hidden: int = 64, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1_w = Tensor(rng.normal(0, 1 / math.sqrt(in_dim), (in_dim, hidden)), name="domain_head.fc1.w")
        self.fc1_b = Tensor(np.zeros(hidden), name="domain_head.fc1.b")
        self.fc2_w = Tensor(rng.normal(0, 0.1 / math.sqrt(hidden), (hidden, num_domains)), name="domain_head.fc2.w")
        self.fc2_b = Tensor(np.zeros(num_domains), name="domain_head.fc2.b")

    @property
    def num_domains(self) -> int:
        return self.fc2_b.shape[0]

    def params(self) -> list[Tensor]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def __call__(self, feature: Tensor) -> Tensor:
        h = dc.gelu(feature @ self.fc1_w + self.fc1_b)
        return h @ self.fc2_w + self.fc2_b


def domain_logits(shared_feature: Tensor, head: DomainHead, lam: float) -> Tensor:
    return head(grl(shared_feature, lam))
