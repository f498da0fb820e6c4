"""Toy pre-norm ViT with deep visual prompt tuning and LoRA on the QKV projections.

The backbone stands in for a large pathology foundation model: its weights
are random and frozen, and adaptation happens only through prompt tokens,
LoRA factors, the class token and the heads, per the freeze policy.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .domain_adapt import DomainHead, domain_logits
from .errors import ConfigError, DataError, ShapeError

CKPT_MAGIC = b"MSHIFT01"
POLICIES = ("vpt", "lora", "head_only")


@dataclass
class ViTConfig:
    image_side: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 2
    prompt_len: int = 4
    lora_rank: int = 4

    def validate(self) -> None:
        if self.image_side % self.patch_size:
            raise ConfigError("image_side must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.prompt_len < 0 or self.lora_rank < 0:
            raise ConfigError("prompt_len and lora_rank must be >= 0")
        if min(self.image_side, self.patch_size, self.embed_dim, self.num_layers,
               self.num_heads, self.mlp_ratio, self.num_classes) < 1:
            raise ConfigError("ViT dimensions must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2


def patchify(images, patch_size: int) -> np.ndarray:
    """uint8 [B, S, S, 3] -> float [B, T, p*p*3], pixels scaled to [0, 1]."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    b, h, w, c = x.shape
    g = h // patch_size
    x = x.astype(np.float64) / 255.0
    x = x.reshape(b, g, patch_size, g, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch_size * patch_size * c)


class VptViT:
    def __init__(self, cfg: ViTConfig, num_domains: int = 2, seed: int = 0,
                 adaptation: str = "vpt"):
        cfg.validate()
        if adaptation not in POLICIES:
            raise ConfigError(f"adaptation must be one of {POLICIES}, not {adaptation!r}")
        self.cfg = cfg
        self.adaptation = adaptation
        self.seed = seed
        rng = np.random.default_rng(seed)
        D, P = cfg.embed_dim, cfg.patch_size
        pin = P * P * 3
        hid = cfg.embed_dim * cfg.mlp_ratio
        p: dict[str, Tensor] = {}

        def add(name, value):
            p[name] = Tensor(value, name=name)

        add("patch_embed.w", rng.normal(0, 1 / math.sqrt(pin), (pin, D)))
        # centres mid-grey at zero: same tokens as feeding x - 0.5
        add("patch_embed.b", -0.5 * p["patch_embed.w"].data.sum(axis=0))
        add("pos_embed", rng.normal(0, 0.1, (cfg.num_patches, D)))
        add("cls_token", rng.normal(0, 0.1, (1, D)))
        for l in range(cfg.num_layers):
            add(f"blocks.{l}.ln1.g", np.ones(D))
            add(f"blocks.{l}.ln1.b", np.zeros(D))
            add(f"blocks.{l}.qkv.w", rng.normal(0, 1 / math.sqrt(D), (D, 3 * D)))
            add(f"blocks.{l}.qkv.b", np.zeros(3 * D))
            add(f"blocks.{l}.proj.w", rng.normal(0, 1 / math.sqrt(D), (D, D)))
            add(f"blocks.{l}.proj.b", np.zeros(D))
            add(f"blocks.{l}.ln2.g", np.ones(D))
            add(f"blocks.{l}.ln2.b", np.zeros(D))
            add(f"blocks.{l}.fc1.w", rng.normal(0, 1 / math.sqrt(D), (D, hid)))
            add(f"blocks.{l}.fc1.b", np.zeros(hid))
            add(f"blocks.{l}.fc2.w", rng.normal(0, 1 / math.sqrt(hid), (hid, D)))
            add(f"blocks.{l}.fc2.b", np.zeros(D))
        add("ln_f.g", np.ones(D))
        add("ln_f.b", np.zeros(D))
        # adaptation parameters: drawn from a separate stream so the frozen
        # backbone is identical whatever prompt_len / lora_rank are
        arng = np.random.default_rng([seed, 1])
        for l in range(cfg.num_layers):
            if cfg.prompt_len:
                add(f"prompts.{l}", arng.uniform(-0.5, 0.5, (cfg.prompt_len, D)) / math.sqrt(D))
        for l in range(cfg.num_layers):
            if cfg.lora_rank:
                add(f"lora.{l}.A", arng.normal(0, 1 / math.sqrt(D), (D, cfg.lora_rank)))
                add(f"lora.{l}.B", np.zeros((cfg.lora_rank, 3 * D)))
        add("head.w", arng.normal(0, 0.1 / math.sqrt(D), (D, cfg.num_classes)))
        add("head.b", np.zeros(cfg.num_classes))
        self.domain_head = DomainHead(D, num_domains, rng=arng)
        for t in self.domain_head.params():
            p[t.name] = t
        self.params = p
        self.set_policy(adaptation)

    # -- freeze policy -----------------------------------------------------
    def trainable_names(self, policy: Optional[str] = None) -> list[str]:
        policy = policy or self.adaptation
        heads = ("head.", "domain_head.")
        if policy == "vpt":
            keep = ("prompts.", "cls_token") + heads
        elif policy == "lora":
            keep = ("lora.",) + heads
        elif policy == "head_only":
            keep = heads
        else:
            raise ConfigError(f"unknown policy {policy!r}")
        return [n for n in self.params if n.startswith(keep)]

    def set_policy(self, policy: str) -> None:
        trainable = set(self.trainable_names(policy))
        self.adaptation = policy
        for name, t in self.params.items():
            t.requires_grad = name in trainable
            t.grad = None

    def trainable(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def frozen(self) -> list[Tensor]:
        return [t for t in self.params.values() if not t.requires_grad]

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            if not t.requires_grad:
                h.update(name.encode())
                h.update(t.data.tobytes())
        return h.hexdigest()

    # -- forward -----------------------------------------------------------
    def patch_embed(self, images, with_pos: bool = True) -> Tensor:
        S = self.cfg.image_side
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1:] != (S, S, 3):
            raise ShapeError("patch_embed", arr.shape, (S, S, 3))
        x = Tensor(patchify(arr, self.cfg.patch_size))
        e = x @ self.params["patch_embed.w"] + self.params["patch_embed.b"]
        return e + self.params["pos_embed"] if with_pos else e

    def _qkv_weight(self, l: int, lora: bool) -> Tensor:
        w = self.params[f"blocks.{l}.qkv.w"]
        if lora:
            return w + self.params[f"lora.{l}.A"] @ self.params[f"lora.{l}.B"]
        return w

    def _block(self, x: Tensor, l: int, lora: bool) -> Tensor:
        cfg = self.cfg
        p = self.params
        B, T, D = x.shape
        H = cfg.num_heads
        dh = D // H
        h = dc.layer_norm(x, p[f"blocks.{l}.ln1.g"], p[f"blocks.{l}.ln1.b"])
        qkv = h @ self._qkv_weight(l, lora) + p[f"blocks.{l}.qkv.b"]
        qkv = qkv.reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q = dc.take(qkv, 0, 1, axis=0).reshape(B, H, T, dh)
        k = dc.take(qkv, 1, 2, axis=0).reshape(B, H, T, dh)
        v = dc.take(qkv, 2, 3, axis=0).reshape(B, H, T, dh)
        att = dc.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)))
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        x = x + (o @ p[f"blocks.{l}.proj.w"] + p[f"blocks.{l}.proj.b"])
        h = dc.layer_norm(x, p[f"blocks.{l}.ln2.g"], p[f"blocks.{l}.ln2.b"])
        h = dc.gelu(h @ p[f"blocks.{l}.fc1.w"] + p[f"blocks.{l}.fc1.b"])
        return x + (h @ p[f"blocks.{l}.fc2.w"] + p[f"blocks.{l}.fc2.b"])

    def _encode(self, tokens: Tensor, prompts: bool, lora: bool, trace: Optional[list]):
        B = tokens.shape[0]
        D = self.cfg.embed_dim
        if tokens.ndim != 3 or tokens.shape[2] != D:
            raise ShapeError("encode", tokens.shape, (B, self.cfg.num_patches, D))
        cls = dc.broadcast_to(self.params["cls_token"], (B, 1, D))
        x = dc.concat([cls, tokens], axis=1)
        L = self.cfg.prompt_len if prompts else 0
        for l in range(self.cfg.num_layers):
            if L:
                pr = dc.broadcast_to(self.params[f"prompts.{l}"], (B, L, D))
                n = x.shape[1]
                x = dc.concat([dc.take(x, 0, 1), pr, dc.take(x, 1, n)], axis=1)
            seen = x.shape[1]
            y = self._block(x, l, lora)
            if L:
                n = y.shape[1]
                y = dc.concat([dc.take(y, 0, 1), dc.take(y, 1 + L, n)], axis=1)
            if trace is not None:
                trace.append((seen, y.shape[1]))
            x = y
        x = dc.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        feature = dc.take(x, 0, 1).reshape(B, D)
        logits = feature @ self.params["head.w"] + self.params["head.b"]
        return logits, feature

    def forward_plain(self, tokens: Tensor, trace=None):
        return self._encode(tokens, prompts=False, lora=False, trace=trace)

    def forward_vpt(self, tokens: Tensor, trace=None):
        """Per-layer prompts sit between the class token and the patch tokens
        for the duration of one block and are dropped afterwards."""
        return self._encode(tokens, prompts=True, lora=False, trace=trace)

    def forward_lora(self, tokens: Tensor, trace=None):
        if not self.cfg.lora_rank:
            raise ConfigError("forward_lora needs lora_rank > 0")
        return self._encode(tokens, prompts=False, lora=True, trace=trace)

    def forward_tokens(self, tokens: Tensor):
        if self.adaptation == "vpt" and self.cfg.prompt_len:
            return self.forward_vpt(tokens)
        if self.adaptation == "lora":
            return self.forward_lora(tokens)
        return self.forward_plain(tokens)

    def forward(self, images):
        """(class logits, shared feature) for a batch of uint8 images."""
        return self.forward_tokens(self.patch_embed(images))

    def domain_logits(self, feature: Tensor, lam: float) -> Tensor:
        return domain_logits(feature, self.domain_head, lam)

    def predict_proba(self, images, batch_size: int = 64) -> np.ndarray:
        """Softmax class probabilities, [B, num_classes]."""
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        out = []
        for i in range(0, arr.shape[0], batch_size):
            logits, _ = self.forward(arr[i:i + batch_size])
            out.append(_softmax_np(logits.data))
        return np.concatenate(out)


class EmbeddingHeads:
    """Class and domain heads over precomputed embeddings from an external frozen encoder."""

    adaptation = "head_only"

    def __init__(self, in_dim: int, num_classes: int = 2, num_domains: int = 2, seed: int = 0):
        rng = np.random.default_rng([seed, 1])
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.seed = seed
        self.params = {
            "head.w": Tensor(rng.normal(0, 0.1 / math.sqrt(in_dim), (in_dim, num_classes)), name="head.w"),
            "head.b": Tensor(np.zeros(num_classes), name="head.b"),
        }
        self.domain_head = DomainHead(in_dim, num_domains, rng=rng)
        for t in self.domain_head.params():
            self.params[t.name] = t
        self.set_policy("head_only")

    def set_policy(self, policy: str) -> None:
        for t in self.params.values():
            t.requires_grad = True
            t.grad = None

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def frozen_checksum(self) -> str:
        return hashlib.sha256(b"").hexdigest()

    def forward(self, vectors):
        feature = Tensor(np.asarray(vectors, dtype=np.float64))
        return feature @ self.params["head.w"] + self.params["head.b"], feature

    def domain_logits(self, feature: Tensor, lam: float) -> Tensor:
        return domain_logits(feature, self.domain_head, lam)

    def predict_proba(self, vectors, batch_size: int = 256) -> np.ndarray:
        logits, _ = self.forward(vectors)
        return _softmax_np(logits.data)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

def save_checkpoint(model, path) -> None:
    """MSHIFT01 | u32 len + key=value config text | u32 n | per tensor:
    u16 name len, name, u8 ndim, u32 dims..., float64 LE data."""
    if isinstance(model, EmbeddingHeads):
        meta = {"kind": "embedding", "in_dim": model.in_dim, "num_classes": model.num_classes}
    else:
        meta = {"kind": "vit", **asdict(model.cfg)}
    meta.update(adaptation=model.adaptation, seed=model.seed,
                num_domains=model.domain_head.num_domains)
    text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise DataError("checkpoint not found", path)
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataError("bad magic, not an MSHIFT01 checkpoint", path)
    try:
        off = 8
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        meta = dict(line.split("=", 1) for line in raw[off:off + n].decode().splitlines() if line)
        off += n
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + ln].decode()
            off += ln
            (nd,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", raw, off)
            off += 4 * nd
            size = int(np.prod(shape)) if nd else 1
            if off + 8 * size > len(raw):
                raise DataError(f"truncated tensor {name}", path)
            tensors[name] = np.frombuffer(raw, "<f8", size, off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}", path) from None

    if meta.get("kind") == "embedding":
        model = EmbeddingHeads(int(meta["in_dim"]), int(meta["num_classes"]),
                               int(meta["num_domains"]), int(meta["seed"]))
    else:
        cfg = ViTConfig(**{f.name: int(meta[f.name]) for f in fields(ViTConfig)})
        model = VptViT(cfg, int(meta["num_domains"]), int(meta["seed"]), meta["adaptation"])
    if set(tensors) != set(model.params):
        raise DataError("checkpoint tensors do not match the model layout", path)
    for name, arr in tensors.items():
        if arr.shape != model.params[name].shape:
            raise DataError(f"shape mismatch for {name}: {arr.shape}", path)
        model.params[name].data = arr
    model.set_policy(meta["adaptation"])
    return model
