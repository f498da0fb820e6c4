"""Loss assembly, Adam, freeze-policy enforcement and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import diffcore as dc
from . import metrics, stain
from .backbone import save_checkpoint
from .data import PatchRecord, stratified_split
from .domain_adapt import GrlCoeff
from .errors import ConfigError, NumericError, UndefinedMetricError
from .tta import D4, d4_apply

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "train_loss", "val_balanced_accuracy", "val_auc"]
TRAIN_STAIN = ("off", "macenko", "vahadane", "mix")


@dataclass
class TrainConfig:
    adaptation: str = "vpt"
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    grl: GrlCoeff = field(default_factory=GrlCoeff)
    grl_enabled: bool = True
    class_weights: Optional[tuple] = None
    domain_loss_weight: float = 1.0
    train_stain: str = "off"
    geo_augment: bool = True
    train_frac: float = 0.8

    def validate(self) -> None:
        if self.adaptation not in ("vpt", "lora", "head_only"):
            raise ConfigError(f"adaptation must be vpt, lora or head_only, not {self.adaptation!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.domain_loss_weight < 0:
            raise ConfigError("domain_loss_weight must be >= 0")
        if self.train_stain not in TRAIN_STAIN:
            raise ConfigError(f"train_stain must be one of {TRAIN_STAIN}")
        if self.class_weights is not None and len(self.class_weights) != 2:
            raise ConfigError("class_weights needs exactly two values")
        if not 0 < self.train_frac <= 1:
            raise ConfigError("train_frac must be in (0, 1]")


def total_loss(logits_cls, y, logits_dom, d, w_d: float, class_weights=None):
    """CE(class) + w_d * CE(domain). The reversal lives inside ``logits_dom``'s graph."""
    loss = dc.cross_entropy(logits_cls, y, class_weights)
    if logits_dom is None or w_d == 0:
        return loss
    return loss + dc.cross_entropy(logits_dom, d) * float(w_d)


class Adam:
    """Adam with beta = (0.9, 0.999), eps = 1e-8; state keyed by parameter position."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: Sequence[dc.Tensor]) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        sgd_adam_step(params, grads, self, self.lr)


def sgd_adam_step(params, grads, state: Adam, lr: float) -> None:
    """One Adam update in place. ``state.t`` must already count this step."""
    t = state.t
    c1 = 1.0 - state.b1 ** t
    c2 = 1.0 - state.b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not p.requires_grad:
            raise ValueError(f"frozen parameter {p.name!r} passed to the optimizer")
        m = state.m.get(i, 0.0) * state.b1 + (1 - state.b1) * g
        v = state.v.get(i, 0.0) * state.b2 + (1 - state.b2) * g * g
        state.m[i], state.v[i] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainResult:
    log: list
    frozen_checksum: str
    domains: list
    train_idx: list
    val_idx: list
    checkpoint: Optional[Path] = None


def _stain_cache(images: np.ndarray, which: Sequence[str], targets: Mapping[str, stain.StainModel]):
    cache = {"off": images}
    n_fail = 0
    for est in which:
        out = np.empty_like(images)
        for i, im in enumerate(images):
            try:
                out[i] = stain.normalize(im, est, targets[est])
            except NumericError:
                out[i] = im
                n_fail += 1
        cache[est] = out
    if n_fail:
        log.info("stain preprocessing fell back to raw pixels for %d patches", n_fail)
    return cache


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["epoch"]] + [f"{r[k]:.17g}" for k in LOG_HEADER[1:]])


def train_loop(model, inputs, records: Sequence[PatchRecord], cfg: TrainConfig,
               out_dir=None, targets: Optional[Mapping[str, stain.StainModel]] = None,
               domains: Optional[Sequence[str]] = None) -> TrainResult:
    """Train ``model`` on ``inputs`` (uint8 images or embedding vectors) in place.

    Writes ``checkpoint.bin`` and ``metrics.csv`` into ``out_dir`` when given.
    """
    cfg.validate()
    if len(records) == 0:
        raise ConfigError("training set is empty")
    inputs = np.asarray(inputs)
    domains = sorted({r.domain for r in records}) if domains is None else list(domains)
    dom_index = {d: i for i, d in enumerate(domains)}
    y_all = np.array([r.label for r in records])
    d_all = np.array([dom_index[r.domain] for r in records])

    model.set_policy(cfg.adaptation if inputs.ndim == 4 else "head_only")
    if model.domain_head.num_domains < len(domains):
        raise ConfigError(f"domain head has {model.domain_head.num_domains} outputs, data has {len(domains)} domains")

    train_idx, val_idx = stratified_split(records, cfg.train_frac, cfg.seed)
    if cfg.train_frac >= 1.0:
        train_idx, val_idx = list(range(len(records))), []

    w_d = cfg.domain_loss_weight if cfg.grl_enabled else 0.0
    if w_d > 0 and len(set(d_all[train_idx].tolist())) < 2:
        warnings.warn("fewer than 2 scanner domains in the training data; domain branch disabled")
        w_d = 0.0

    images = inputs.ndim == 4
    variants = {"off": inputs}
    if images and cfg.train_stain != "off":
        which = ("macenko", "vahadane") if cfg.train_stain == "mix" else (cfg.train_stain,)
        if targets is None or any(w not in targets for w in which):
            raise ConfigError(f"train_stain={cfg.train_stain} needs reference targets for {which}")
        variants = _stain_cache(inputs, which, targets)
    pool = list(variants) if cfg.train_stain == "mix" else [cfg.train_stain if images else "off"]
    val_variant = "off" if cfg.train_stain == "mix" else pool[0]

    rng = np.random.default_rng([cfg.seed, 7])
    opt = Adam(cfg.learning_rate)
    params = model.trainable()
    checksum = model.frozen_checksum()
    steps_per_epoch = max(1, math.ceil(len(train_idx) / cfg.batch_size))
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    step = 0
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(np.asarray(train_idx))
        losses, weights = [], []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            src = [pool[k] for k in rng.integers(0, len(pool), size=len(idx))]
            x = np.stack([variants[s][i] for s, i in zip(src, idx)])
            if images and cfg.geo_augment:
                ts = rng.integers(0, len(D4), size=len(idx))
                x = np.stack([d4_apply(im, D4[t]) for im, t in zip(x, ts)])
            lam = cfg.grl.at(step / total_steps)
            for p in params:
                p.grad = None
            with dc.Tape() as tape:
                logits, feat = model.forward(x)
                dom = model.domain_logits(feat, lam) if w_d > 0 else None
                loss = total_loss(logits, y_all[idx], dom, d_all[idx], w_d, cfg.class_weights)
            if not np.isfinite(loss.data).all():
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            dc.backward(loss, tape)
            opt.step(params)
            losses.append(float(loss.data))
            weights.append(len(idx))
            step += 1
        if model.frozen_checksum() != checksum:
            raise RuntimeError("freeze contract violated: frozen parameters changed")
        ba, auc = math.nan, math.nan
        if val_idx:
            probs = model.predict_proba(variants[val_variant][val_idx])[:, 1]
            yv = y_all[val_idx]
            try:
                ba = metrics.balanced_accuracy(metrics.confusion(yv, probs >= 0.5))
                auc = metrics.roc_auc(probs, yv)
            except UndefinedMetricError:
                pass
        row = {"epoch": epoch, "train_loss": float(np.average(losses, weights=weights)),
               "val_balanced_accuracy": ba, "val_auc": auc}
        log.info("epoch %d loss %.4f val BA %.4f AUC %.4f", epoch, row["train_loss"], ba, auc)
        rows.append(row)

    result = TrainResult(rows, checksum, domains, list(train_idx), list(val_idx))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_log(out / "metrics.csv", rows)
        save_checkpoint(model, out / "checkpoint.bin")
        result.checkpoint = out / "checkpoint.bin"
    return result
