"""Test-time augmentation: D4 geometric transforms crossed with stain pipelines."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import stain
from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)

D4 = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip", "transpose", "antitranspose")
STAINS = ("identity", "macenko", "vahadane")
INVERSE = {
    "identity": "identity",
    "rot90": "rot270",
    "rot180": "rot180",
    "rot270": "rot90",
    "hflip": "hflip",
    "vflip": "vflip",
    "transpose": "transpose",
    "antitranspose": "antitranspose",
}


def d4_apply(p: np.ndarray, t: str) -> np.ndarray:
    """Exact pixel permutation of a square (H, W, C) patch."""
    if p.shape[0] != p.shape[1]:
        raise ValueError(f"d4_apply needs a square patch, got {p.shape[:2]}")
    if t == "identity":
        out = p
    elif t == "rot90":
        out = np.rot90(p, 1)
    elif t == "rot180":
        out = np.rot90(p, 2)
    elif t == "rot270":
        out = np.rot90(p, 3)
    elif t == "hflip":
        out = p[:, ::-1]
    elif t == "vflip":
        out = p[::-1]
    elif t == "transpose":
        out = np.swapaxes(p, 0, 1)
    elif t == "antitranspose":
        out = np.rot90(np.swapaxes(p, 0, 1), 2)
    else:
        raise ValueError(f"unknown D4 transform {t!r}")
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class TtaPlan:
    geo: tuple = D4
    stains: tuple = STAINS

    def __post_init__(self):
        if not self.geo or not self.stains:
            raise ConfigError("TTA plan needs at least one geometric transform and one stain pipeline")
        for g in self.geo:
            if g not in D4:
                raise ConfigError(f"unknown D4 transform {g!r}")
        for s in self.stains:
            if s not in STAINS:
                raise ConfigError(f"unknown stain pipeline {s!r}")
        # fixed reduction order
        object.__setattr__(self, "geo", tuple(sorted(set(self.geo), key=D4.index)))
        object.__setattr__(self, "stains", tuple(sorted(set(self.stains), key=STAINS.index)))

    @property
    def n_passes(self) -> int:
        return len(self.geo) * len(self.stains)

    @classmethod
    def preset(cls, name: str) -> "TtaPlan":
        presets = {
            "off": (("identity",), ("identity",)),
            "geo": (D4, ("identity",)),
            "stain": (("identity",), STAINS),
            "full": (D4, STAINS),
        }
        if name not in presets:
            raise ConfigError(f"unknown TTA preset {name!r}; choose from {sorted(presets)}")
        geo, stains = presets[name]
        return cls(geo, stains)


def stain_variants(p: np.ndarray, stains: Sequence[str],
                   targets: Mapping[str, stain.StainModel]) -> tuple[list, int]:
    """Normalise ``p`` once per stain pipeline; failures fall back to the raw patch."""
    out, fallbacks = [], 0
    for s in stains:
        if s == "identity":
            out.append(p)
            continue
        if s not in targets:
            raise ConfigError(f"no reference target for stain pipeline {s!r}")
        try:
            out.append(stain.normalize(p, s, targets[s]))
        except NumericError as exc:
            log.debug("stain %s failed (%s); using identity", s, exc)
            out.append(p)
            fallbacks += 1
    return out, fallbacks


def tta_batch(p: np.ndarray, plan: TtaPlan,
              targets: Optional[Mapping[str, stain.StainModel]] = None) -> tuple[np.ndarray, int]:
    """All variants of ``p`` in (stain, geo) order, plus the fallback count.

    Normalisation runs before the geometric transform, so each estimator
    sees the patch once.
    """
    colored, fallbacks = stain_variants(p, plan.stains, targets or {})
    batch = [d4_apply(c, g) for c in colored for g in plan.geo]
    return np.stack(batch), fallbacks


def predict_tta(model, p: np.ndarray, plan: TtaPlan,
                targets: Optional[Mapping[str, stain.StainModel]] = None,
                positive: int = 1) -> tuple[float, int]:
    """Mean of softmax[positive] over every plan variant; returns (probability, n_fallbacks)."""
    batch, fallbacks = tta_batch(p, plan, targets)
    probs = model.predict_proba(batch)[:, positive]
    return float(np.mean(probs)), fallbacks


def predict_many(model, patches: Sequence[np.ndarray], plan: TtaPlan,
                 targets: Optional[Mapping[str, stain.StainModel]] = None,
                 positive: int = 1) -> tuple[np.ndarray, np.ndarray]:
    probs = np.empty(len(patches))
    fb = np.zeros(len(patches), dtype=int)
    for i, p in enumerate(patches):
        probs[i], fb[i] = predict_tta(model, p, plan, targets, positive)
    return probs, fb
