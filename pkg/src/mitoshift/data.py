"""Patch manifests, external-embedding files and the synthetic H&E generator."""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .stain import RUIFROK_HE, StainModel, od_to_rgb

MANIFEST_HEADER = ["image_path", "label", "domain"]
EMB_MAGIC = b"MSEMB01"


@dataclass(frozen=True)
class PatchRecord:
    image_path: str
    label: int  # 0 normal, 1 atypical
    domain: str


def read_image(path, side: Optional[int] = None) -> np.ndarray:
    """Decode a square 8-bit RGB image as an (H, W, 3) uint8 array."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode != "RGB" else im, dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image: {exc}", path) from None
    if arr.shape[0] != arr.shape[1]:
        raise DataError(f"image is not square: {arr.shape[1]}x{arr.shape[0]}", path)
    if side is not None and arr.shape[0] != side:
        raise DataError(f"image side {arr.shape[0]} != configured {side}", path)
    return arr


def write_image(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def _parse_rows(lines: Sequence[str], source, base: Optional[Path], check_images: bool, side):
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("manifest is empty (missing header)", source, 1) from None
    if [h.strip() for h in header] != MANIFEST_HEADER:
        raise DataError(f"bad header {header!r}, expected {','.join(MANIFEST_HEADER)}", source, 1)
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DataError(f"expected 3 fields, found {len(row)}", source, lineno)
        img, label, domain = (c.strip() for c in row)
        if label not in ("0", "1"):
            raise DataError(f"label must be 0 or 1, found {label!r}", source, lineno)
        if not domain:
            raise DataError("empty domain", source, lineno)
        if check_images:
            p = Path(img) if base is None or Path(img).is_absolute() else base / img
            if not p.is_file():
                raise DataError(f"image not found: {img}", source, lineno)
            try:
                read_image(p, side)
            except DataError as exc:
                raise DataError(f"unreadable image {img}: {exc}", source, lineno) from None
        records.append(PatchRecord(img, int(label), domain))
    return records


def load_manifest(path, side: Optional[int] = None, check_images: bool = True) -> list[PatchRecord]:
    """Read ``image_path,label,domain`` rows; image paths are relative to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise DataError("manifest not found", path)
    lines = path.read_text().splitlines()
    return _parse_rows(lines, path, path.parent, check_images, side)


def write_manifest(path, records: Sequence[PatchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.image_path, r.label, r.domain])


def resolve(manifest_path, record: PatchRecord) -> Path:
    p = Path(record.image_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def load_images(manifest_path, records: Sequence[PatchRecord], side: Optional[int] = None) -> np.ndarray:
    return np.stack([read_image(resolve(manifest_path, r), side) for r in records])


# ---------------------------------------------------------------------------
# embeddings file
# ---------------------------------------------------------------------------

def write_embeddings(path, vectors, records: Sequence[PatchRecord]) -> None:
    """MSEMB01 | count u64 | dim u64 | count*dim f64 (LE, row-major) | manifest CSV."""
    v = np.ascontiguousarray(vectors, dtype="<f8")
    if v.ndim != 2 or v.shape[0] != len(records):
        raise DataError(f"embeddings shape {v.shape} does not match {len(records)} records", path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in records:
        w.writerow([r.image_path, r.label, r.domain])
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<QQ", v.shape[0], v.shape[1]))
        fh.write(v.tobytes())
        fh.write(buf.getvalue().encode("utf-8"))


def load_embeddings(path) -> tuple[np.ndarray, list[PatchRecord]]:
    path = Path(path)
    if not path.is_file():
        raise DataError("embeddings file not found", path)
    raw = path.read_bytes()
    if raw[: len(EMB_MAGIC)] != EMB_MAGIC:
        raise DataError("bad magic, not an MSEMB01 embeddings file", path)
    off = len(EMB_MAGIC)
    if len(raw) < off + 16:
        raise DataError("size mismatch: truncated header", path)
    count, dim = struct.unpack_from("<QQ", raw, off)
    off += 16
    nbytes = count * dim * 8
    if len(raw) < off + nbytes:
        raise DataError(f"size mismatch: payload needs {nbytes} bytes, found {len(raw) - off}", path)
    vectors = np.frombuffer(raw, dtype="<f8", count=count * dim, offset=off).reshape(count, dim)
    text = raw[off + nbytes:].decode("utf-8")
    records = _parse_rows(text.splitlines(), path, None, False, None)
    if len(records) != count:
        raise DataError(f"size mismatch: {count} vectors but {len(records)} manifest rows", path)
    return vectors.astype(np.float64), records


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_per_class_per_domain: int = 100
    # (seed, perturbation angle in degrees); even seeds rotate +angle, odd seeds -angle
    domains: list = field(default_factory=lambda: [(0, 0.0), (1, 15.0)])
    noise_sigma: float = 0.0
    side: int = 64
    difficulty: str = "easy"
    seed: int = 0  # run seed, mixed into every patch's random stream

    def validate(self) -> None:
        if self.n_per_class_per_domain < 1:
            raise ConfigError("n_per_class_per_domain must be >= 1")
        if not self.domains:
            raise ConfigError("at least one domain is required")
        for seed, angle in self.domains:
            if not 0.0 <= float(angle) <= 25.0:
                raise ConfigError(f"domain perturbation angle {angle} outside [0, 25] degrees")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.difficulty not in ("easy", "hard"):
            raise ConfigError(f"difficulty must be easy or hard, not {self.difficulty!r}")
        if self.side < 16:
            raise ConfigError("side must be >= 16")


def _rotate(v: np.ndarray, axis: np.ndarray, theta: float) -> np.ndarray:
    # Rodrigues
    k = axis / np.linalg.norm(axis)
    return v * math.cos(theta) + np.cross(k, v) * math.sin(theta) + k * (k @ v) * (1 - math.cos(theta))


def domain_stain_matrix(seed: int, angle_deg: float) -> np.ndarray:
    """Ruifrok columns rotated about their bisector, kept in the nonnegative octant."""
    theta = math.radians(angle_deg) * (1 if seed % 2 == 0 else -1)
    h, e = RUIFROK_HE[:, 0], RUIFROK_HE[:, 1]
    axis = h + e
    cols = []
    for v in (h, e):
        r = np.maximum(_rotate(v, axis, theta), 0.0)
        cols.append(r / np.linalg.norm(r))
    return np.stack(cols, axis=1)


def domain_intensity(seed: int) -> float:
    return float(np.random.default_rng([seed, 991]).uniform(0.85, 1.15))


def _smooth_field(rng, side: int, cells: int = 4) -> np.ndarray:
    """Bilinearly upsampled coarse noise in [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    t = np.linspace(0, cells, side)
    i0 = np.minimum(np.floor(t).astype(int), cells - 1)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _blob(yy, xx, cy, cx, r, aspect, angle, lobes=0, depth=0.0, phase=0.0, soft=1.2):
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = (dx * ca + dy * sa) / aspect
    w = -dx * sa + dy * ca
    rad = np.hypot(u, w)
    boundary = r
    if lobes:
        boundary = r * (1.0 + depth * np.cos(lobes * np.arctan2(w, u) + phase))
    return 1.0 / (1.0 + np.exp(-(boundary - rad) / soft))


def render_concentrations(rng, side: int, label: int, difficulty: str = "easy"):
    """Return (C [side, side, 2], background mask) for one patch."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    h = 0.3 + 0.1 * _smooth_field(rng, side) + 0.04 * rng.standard_normal((side, side))
    e = 1.3 + 0.35 * _smooth_field(rng, side) + 0.05 * rng.standard_normal((side, side))
    h, e = np.maximum(h, 0.0), np.maximum(e, 0.0)
    nucleus = np.zeros((side, side))
    c = side / 2.0
    if label == 0:
        r = side * rng.uniform(0.15, 0.19)
        nucleus = _blob(yy, xx, c + rng.uniform(-3, 3), c + rng.uniform(-3, 3),
                        r, rng.uniform(1.0, 1.4), rng.uniform(0, math.pi))
    else:
        k = int(rng.integers(2, 4))
        base = side * (rng.uniform(0.14, 0.17) if difficulty == "easy" else rng.uniform(0.09, 0.11))
        start = rng.uniform(0, 2 * math.pi)
        for j in range(k):
            a = start + 2 * math.pi * j / k + rng.uniform(-0.4, 0.4)
            off = side * rng.uniform(0.10, 0.16)
            lobe = _blob(yy, xx, c + off * math.sin(a), c + off * math.cos(a), base,
                         rng.uniform(1.0, 1.3), rng.uniform(0, math.pi),
                         lobes=int(rng.integers(3, 6)), depth=rng.uniform(0.25, 0.4),
                         phase=rng.uniform(0, 2 * math.pi))
            nucleus = np.maximum(nucleus, lobe)
    if difficulty == "hard":
        # scattered small interphase nuclei shared by both classes
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(4, side - 4, size=2)
            if math.hypot(cy - c, cx - c) > side * 0.3:
                nucleus = np.maximum(nucleus, 0.7 * _blob(yy, xx, cy, cx, side * 0.05, 1.0, 0.0))
    h = h + 1.2 * nucleus
    e = e * (1.0 - 0.85 * nucleus)
    # a white lumen in a random corner for half the patches
    background = np.zeros((side, side), dtype=bool)
    if rng.uniform() < 0.5:
        cy, cx = rng.choice([0.0, side - 1.0], size=2)
        background = np.hypot(yy - cy, xx - cx) < side * rng.uniform(0.18, 0.26)
        h = np.where(background, 0.0, h)
        e = np.where(background, 0.0, e)
    return np.stack([h, e], axis=-1), background


def render_patch(C: np.ndarray, stain_matrix: np.ndarray, intensity: float = 1.0,
                 noise_sigma: float = 0.0, rng=None) -> np.ndarray:
    od = (C * intensity) @ np.asarray(stain_matrix).T
    if noise_sigma > 0:
        i = 255.0 * np.power(10.0, -od) + rng.normal(0.0, noise_sigma, size=od.shape)
        return np.clip(np.floor(i + 0.5), 0, 255).astype(np.uint8)
    return od_to_rgb(od)


def synth_patch(seed: int, angle: float, label: int, index: int, side: int = 64,
                difficulty: str = "easy", noise_sigma: float = 0.0, run_seed: int = 0):
    """One deterministic patch: (rgb, C, background mask).

    ``seed`` is the domain seed (stain matrix and intensity); ``run_seed``
    varies the tissue content only.
    """
    rng = np.random.default_rng([run_seed, seed, label, index])
    C, bg = render_concentrations(rng, side, label, difficulty)
    S = domain_stain_matrix(seed, angle)
    rgb = render_patch(C, S, domain_intensity(seed), noise_sigma, rng)
    return rgb, C * domain_intensity(seed), bg


def gen_synth(cfg: SynthConfig, out_dir) -> list[PatchRecord]:
    """Write images/, manifest.csv and the per-domain ground-truth sidecar domains.txt."""
    cfg.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory: {exc}", out) from None
    records = []
    sidecar = []
    for k, (seed, angle) in enumerate(cfg.domains):
        dom = f"d{k}"
        S = domain_stain_matrix(int(seed), float(angle))
        concs = []
        for label in (0, 1):
            for i in range(cfg.n_per_class_per_domain):
                rgb, C, _ = synth_patch(int(seed), float(angle), label, i, cfg.side,
                                        cfg.difficulty, cfg.noise_sigma, cfg.seed)
                name = f"images/{dom}_c{label}_{i:04d}.png"
                try:
                    write_image(out / name, rgb)
                except OSError as exc:
                    raise DataError(f"cannot write image: {exc}", out / name) from None
                records.append(PatchRecord(name, label, dom))
                concs.append(C.reshape(-1, 2))
        max_conc = np.percentile(np.concatenate(concs), 99, axis=0)
        sidecar.append(f"{dom} " + StainModel(S, max_conc).to_text())
    write_manifest(out / "manifest.csv", records)
    (out / "domains.txt").write_text("".join(sidecar))
    return records


def load_sidecar(path) -> dict[str, StainModel]:
    models = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            name, rest = line.split(None, 1)
            models[name] = StainModel.from_text(rest, path)
    return models


def stratified_split(records: Sequence[PatchRecord], frac: float, seed: int):
    """Index split stratified by (label, domain); returns (train_idx, val_idx)."""
    rng = np.random.default_rng(seed)
    groups: dict = {}
    for i, r in enumerate(records):
        groups.setdefault((r.label, r.domain), []).append(i)
    train, val = [], []
    for key in sorted(groups):
        idx = np.array(groups[key])
        rng.shuffle(idx)
        n_val = int(round(len(idx) * (1 - frac)))
        if len(idx) >= 2:
            n_val = min(max(n_val, 1), len(idx) - 1)
        else:
            n_val = 0
        val.extend(idx[:n_val].tolist())
        train.extend(idx[n_val:].tolist())
    return sorted(train), sorted(val)
