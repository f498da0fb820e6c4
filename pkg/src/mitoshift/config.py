"""Flat ``key=value`` run configuration shared by every CLI command."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

from .backbone import ViTConfig
from .data import SynthConfig
from .domain_adapt import GrlCoeff
from .errors import ConfigError
from .train import TrainConfig
from .tta import D4, STAINS, TtaPlan

DEFAULTS: dict[str, str] = {
    # backbone
    "image_side": "64",
    "patch_size": "8",
    "embed_dim": "64",
    "num_layers": "4",
    "num_heads": "4",
    "mlp_ratio": "4",
    "num_classes": "2",
    "prompt_len": "4",
    "lora_rank": "4",
    # training
    "adaptation": "vpt",
    "epochs": "10",
    "batch_size": "32",
    "learning_rate": "0.001",
    "seed": "0",
    "grl": "on",
    "grl_lambda": "1.0",
    "grl_schedule": "constant",
    "grl_gamma": "10.0",
    "class_weights": "none",
    "domain_loss_weight": "1.0",
    "stain": "off",
    "geo_augment": "true",
    "train_frac": "0.8",
    # inference / evaluation
    "tta_geo": ",".join(D4),
    "tta_stains": ",".join(STAINS),
    "threshold": "0.5",
    "reference": "",
    # synthetic data
    "n_per_class_per_domain": "100",
    "domains": "0:0,1:15",
    "noise_sigma": "0",
    "difficulty": "easy",
}

_BOOL = {"true": True, "on": True, "yes": True, "1": True,
         "false": False, "off": False, "no": False, "0": False}


class RunConfig:
    """Resolved configuration: defaults overlaid by a file and then by overrides."""

    def __init__(self, values: Optional[dict] = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = str(value).strip()

    @classmethod
    def parse(cls, text: str, source="<config>") -> "RunConfig":
        cfg = cls()
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected key=value, got {raw!r}")
            k, v = line.split("=", 1)
            try:
                cfg.set(k, v)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{n}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.parse(p.read_text(), p)

    def to_text(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in DEFAULTS)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    # -- typed accessors ----------------------------------------------------
    def _int(self, k):
        try:
            return int(self.values[k])
        except ValueError:
            raise ConfigError(f"{k} must be an integer, got {self.values[k]!r}") from None

    def _float(self, k):
        try:
            return float(self.values[k])
        except ValueError:
            raise ConfigError(f"{k} must be a number, got {self.values[k]!r}") from None

    def _bool(self, k):
        v = self.values[k].lower()
        if v not in _BOOL:
            raise ConfigError(f"{k} must be true/false, got {self.values[k]!r}")
        return _BOOL[v]

    def _list(self, k):
        return tuple(s.strip() for s in self.values[k].split(",") if s.strip())

    def vit(self) -> ViTConfig:
        cfg = ViTConfig(**{k: self._int(k) for k in (
            "image_side", "patch_size", "embed_dim", "num_layers", "num_heads",
            "mlp_ratio", "num_classes", "prompt_len", "lora_rank")})
        cfg.validate()
        return cfg

    def train(self) -> TrainConfig:
        cw = self.values["class_weights"].lower()
        weights = None
        if cw not in ("", "none"):
            try:
                weights = tuple(float(x) for x in cw.split(","))
            except ValueError:
                raise ConfigError(f"class_weights must be 'none' or 'a,b', got {cw!r}") from None
        try:
            grl = GrlCoeff(self._float("grl_lambda"), self.values["grl_schedule"], self._float("grl_gamma"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg = TrainConfig(
            adaptation=self.values["adaptation"],
            epochs=self._int("epochs"),
            batch_size=self._int("batch_size"),
            learning_rate=self._float("learning_rate"),
            seed=self._int("seed"),
            grl=grl,
            grl_enabled=self._bool("grl"),
            class_weights=weights,
            domain_loss_weight=self._float("domain_loss_weight"),
            train_stain=self.values["stain"],
            geo_augment=self._bool("geo_augment"),
            train_frac=self._float("train_frac"),
        )
        cfg.validate()
        return cfg

    def tta_plan(self) -> TtaPlan:
        return TtaPlan(self._list("tta_geo"), self._list("tta_stains"))

    def threshold(self) -> float:
        t = self._float("threshold")
        if not 0.0 <= t <= 1.0:
            raise ConfigError("threshold must be in [0, 1]")
        return t

    def synth(self) -> SynthConfig:
        doms = []
        for item in self._list("domains"):
            try:
                seed, angle = item.split(":")
                doms.append((int(seed), float(angle)))
            except ValueError:
                raise ConfigError(f"domains entries must be seed:angle, got {item!r}") from None
        cfg = SynthConfig(
            n_per_class_per_domain=self._int("n_per_class_per_domain"),
            domains=doms,
            noise_sigma=self._float("noise_sigma"),
            side=self._int("image_side"),
            difficulty=self.values["difficulty"],
            seed=self._int("seed"),
        )
        cfg.validate()
        return cfg
