"""Beer-Lambert optical density and H&E stain-matrix estimation.

Two estimators are provided: Macenko (extreme angles in the top-2
eigenplane of the OD scatter) and Vahadane (sparse nonnegative dictionary
learning, initialised from Macenko). Both return a :class:`StainModel`
whose columns are unit OD vectors, hematoxylin first.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import kernels
from .errors import DataError, DegenerateStainPlaneError, InsufficientTissueError, NumericError

# Ruifrok & Johnston H&E optical densities, columns normalised below.
RUIFROK_HE = np.array([[0.65, 0.07], [0.70, 0.99], [0.29, 0.11]])
RUIFROK_HE = RUIFROK_HE / np.linalg.norm(RUIFROK_HE, axis=0)

BETA = 0.15
ALPHA_PCT = 1.0
MIN_TISSUE_PIXELS = 100
# eigenvalue ratio below which the OD scatter is treated as rank one
PLANE_RATIO_TOL = 1e-4

Estimator = Literal["macenko", "vahadane"]


def rgb_to_od(rgb) -> np.ndarray:
    """OD = -log10((I + 1) / 255), floored at 0 (I = 254 and 255 both map to 0)."""
    i = np.asarray(rgb, dtype=np.float64)
    od = -np.log10((i + 1.0) / 255.0)
    return np.maximum(od, 0.0)


def od_to_rgb(od) -> np.ndarray:
    """I = clamp(round(255 * 10^-OD), 0, 255) with round-half-up, as uint8."""
    i = np.floor(255.0 * np.power(10.0, -np.asarray(od, dtype=np.float64)) + 0.5)
    return np.clip(i, 0, 255).astype(np.uint8)


@dataclass
class StainModel:
    """3x2 stain matrix (columns H, E as unit OD vectors) and 99th-pct concentrations."""

    stain_matrix: np.ndarray
    max_conc: np.ndarray = field(default_factory=lambda: np.ones(2))

    def __post_init__(self):
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64).reshape(3, 2)
        self.max_conc = np.asarray(self.max_conc, dtype=np.float64).reshape(2)

    def check(self, tol: float = 1e-9) -> None:
        norms = np.linalg.norm(self.stain_matrix, axis=0)
        if np.any(np.abs(norms - 1.0) > tol) or np.any(self.stain_matrix < 0):
            raise NumericError(f"invalid stain matrix {self.stain_matrix.tolist()}")
        if self.stain_matrix[0, 0] < self.stain_matrix[0, 1]:
            raise NumericError("stain matrix columns not in hematoxylin-first order")

    def to_text(self) -> str:
        vals = list(self.stain_matrix.reshape(-1)) + list(self.max_conc)
        return " ".join(f"{v:.17g}" for v in vals) + "\n"

    @classmethod
    def from_text(cls, text: str, source=None) -> "StainModel":
        parts = text.split()
        if len(parts) != 8:
            raise DataError(f"expected 8 values in stain model, found {len(parts)}", source)
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise DataError(f"bad stain model value: {exc}", source) from None
        return cls(np.array(vals[:6]).reshape(3, 2), np.array(vals[6:]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "StainModel":
        p = Path(path)
        if not p.is_file():
            raise DataError("stain model file not found", p)
        return cls.from_text(p.read_text(), p)


# A reference target is a stain model fitted once on a chosen reference patch.
ReferenceTarget = StainModel


def _flat(od) -> np.ndarray:
    od = np.asarray(od, dtype=np.float64)
    return od.reshape(-1, 3)


def tissue_pixels(od, beta: float = BETA, min_pixels: int = MIN_TISSUE_PIXELS) -> np.ndarray:
    """Rows whose three OD components all exceed ``beta``, in lexicographic order.

    Sorting makes every downstream statistic independent of pixel order.
    """
    flat = _flat(od)
    t = flat[np.all(flat > beta, axis=1)]
    if t.shape[0] < min_pixels:
        raise InsufficientTissueError(t.shape[0], min_pixels)
    order = np.lexsort((t[:, 2], t[:, 1], t[:, 0]))
    return t[order]


def _stain_plane(t: np.ndarray) -> np.ndarray:
    scatter = t.T @ t / t.shape[0]
    vals, vecs = np.linalg.eigh(scatter)
    if not vals[2] > 0 or vals[1] / vals[2] < PLANE_RATIO_TOL:
        raise DegenerateStainPlaneError(
            f"degenerate stain plane: eigenvalue ratio {vals[1] / max(vals[2], 1e-300):.3g}"
        )
    plane = vecs[:, [2, 1]].copy()
    if plane[:, 0].sum() < 0:
        plane[:, 0] *= -1
    if plane[0, 1] < 0:
        plane[:, 1] *= -1
    return plane


def _unit_nonneg(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    v = np.maximum(v, 0.0)
    n = np.linalg.norm(v)
    if n == 0:
        raise DegenerateStainPlaneError("degenerate stain plane: stain vector vanished")
    return v / n


def _order_he(m: np.ndarray) -> tuple[np.ndarray, bool]:
    """Hematoxylin first: the column with the larger red OD."""
    if m[0, 0] >= m[0, 1]:
        return m, False
    return m[:, ::-1].copy(), True


def concentrations(od, model: StainModel) -> np.ndarray:
    """Per-pixel nonnegative least-squares concentrations, shape 2 x N."""
    return kernels.nnls2(_flat(od), model.stain_matrix).T


def _max_conc(od, stain_matrix: np.ndarray) -> np.ndarray:
    c = kernels.nnls2(_flat(od), stain_matrix)
    return np.percentile(c, 99, axis=0)


def estimate_macenko(od, beta: float = BETA, alpha_pct: float = ALPHA_PCT) -> StainModel:
    t = tissue_pixels(od, beta)
    m = _macenko_matrix(t, alpha_pct)
    return StainModel(m, _max_conc(od, m))


def _macenko_matrix(t: np.ndarray, alpha_pct: float) -> np.ndarray:
    plane = _stain_plane(t)
    proj = t @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha_pct, 100.0 - alpha_pct])
    if hi - lo < 1e-6:
        raise DegenerateStainPlaneError("degenerate stain plane: no angular spread")
    v1 = _unit_nonneg(plane @ np.array([np.cos(lo), np.sin(lo)]))
    v2 = _unit_nonneg(plane @ np.array([np.cos(hi), np.sin(hi)]))
    m, _ = _order_he(np.stack([v1, v2], axis=1))
    return m


@dataclass
class VahadaneFit:
    model: StainModel
    objective: list  # value after each W/H alternation, starting at the initial point
    init: str  # "macenko" or "ruifrok"


def vahadane_objective(V: np.ndarray, W: np.ndarray, H: np.ndarray, lam: float) -> float:
    r = V - H @ W.T
    return float(np.sum(r * r) + lam * H.sum())


def _project_columns(W: np.ndarray) -> np.ndarray:
    W = np.maximum(W, 0.0)
    n = np.linalg.norm(W, axis=0)
    return W / np.maximum(n, 1.0)


def fit_vahadane(
    od,
    lambda_sparse: float = 0.1,
    iters: int = 50,
    beta: float = BETA,
    inner_iters: int = 20,
    w_steps: int = 5,
) -> VahadaneFit:
    """Alternating minimisation of ||V - W H||_F^2 + lambda * sum(H), W, H >= 0.

    H-step: coordinate-descent nonnegative lasso (warm started). W-step:
    projected gradient with step 1/L onto {W >= 0, ||w_k|| <= 1}. Both steps
    never increase the objective. Columns are rescaled to unit norm at the end.
    """
    V = tissue_pixels(od, beta)
    _stain_plane(V)  # same degeneracy contract as Macenko
    try:
        W = _macenko_matrix(V, ALPHA_PCT)
        init = "macenko"
    except NumericError:
        W = RUIFROK_HE.copy()
        init = "ruifrok"
    H = kernels.nnls2(V, W)
    history = [vahadane_objective(V, W, H, lambda_sparse)]
    for _ in range(int(iters)):
        H = kernels.lasso_cd(V, W, H, lambda_sparse, inner_iters)
        HtH = H.T @ H
        VtH = V.T @ H
        L = 2.0 * np.linalg.eigvalsh(HtH)[-1]
        if L > 0:
            for _ in range(w_steps):
                grad = 2.0 * (W @ HtH - VtH)
                W = _project_columns(W - grad / L)
        history.append(vahadane_objective(V, W, H, lambda_sparse))
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0):
        raise DegenerateStainPlaneError("degenerate stain plane: dictionary column collapsed")
    W, _ = _order_he(W / norms)
    return VahadaneFit(StainModel(W, _max_conc(od, W)), history, init)


def estimate_vahadane(od, lambda_sparse: float = 0.1, iters: int = 50) -> StainModel:
    return fit_vahadane(od, lambda_sparse, iters).model


def estimate(od, estimator: Estimator) -> StainModel:
    if estimator == "macenko":
        return estimate_macenko(od)
    if estimator == "vahadane":
        return estimate_vahadane(od)
    raise ValueError(f"unknown stain estimator {estimator!r}")


def fit_reference(rgb, estimator: Estimator) -> StainModel:
    return estimate(rgb_to_od(rgb), estimator)


def normalize(rgb, estimator: Estimator, target: StainModel) -> np.ndarray:
    """Re-render ``rgb`` under the target stain matrix with per-stain max-concentration scaling."""
    rgb = np.asarray(rgb)
    od = rgb_to_od(rgb)
    source = estimate(od, estimator)
    c = kernels.nnls2(_flat(od), source.stain_matrix)
    scale = target.max_conc / np.where(source.max_conc > 0, source.max_conc, 1.0)
    od_new = (c * scale) @ target.stain_matrix.T
    return od_to_rgb(od_new).reshape(rgb.shape)
