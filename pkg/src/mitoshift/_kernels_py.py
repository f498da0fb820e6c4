"""Pure numpy implementations of the per-pixel stain kernels.

Each pixel is independent, so the loops of the compiled versions are
vectorised across pixels here. The arithmetic per pixel is written in the
same order as in ``_ckernels.pyx`` so both backends agree bit-for-bit.
"""
import numpy as np


def _pos(x):
    return np.where(x > 0.0, x, 0.0)


def _gram(S):
    s = np.asarray(S, dtype=np.float64)
    g00 = s[0, 0] * s[0, 0] + s[1, 0] * s[1, 0] + s[2, 0] * s[2, 0]
    g01 = s[0, 0] * s[0, 1] + s[1, 0] * s[1, 1] + s[2, 0] * s[2, 1]
    g11 = s[0, 1] * s[0, 1] + s[1, 1] * s[1, 1] + s[2, 1] * s[2, 1]
    return s, g00, g01, g11


def _proj(od, s):
    v0, v1, v2 = od[:, 0], od[:, 1], od[:, 2]
    b0 = s[0, 0] * v0 + s[1, 0] * v1 + s[2, 0] * v2
    b1 = s[0, 1] * v0 + s[1, 1] * v1 + s[2, 1] * v2
    return b0, b1


def nnls2(od, S):
    """argmin_{c >= 0} ||od_px - S c|| for every row of ``od`` (n x 3); S is 3 x 2."""
    od = np.ascontiguousarray(od, dtype=np.float64)
    s, g00, g01, g11 = _gram(S)
    b0, b1 = _proj(od, s)
    det = g00 * g11 - g01 * g01
    c0 = (g11 * b0 - g01 * b1) / det
    c1 = (g00 * b1 - g01 * b0) / det
    inside = (c0 >= 0.0) & (c1 >= 0.0)
    # boundary candidates: (a, 0) and (0, b)
    a = _pos(b0 / g00)
    b = _pos(b1 / g11)
    fa = g00 * a * a - 2.0 * b0 * a
    fb = g11 * b * b - 2.0 * b1 * b
    first = fa <= fb
    out = np.empty((od.shape[0], 2))
    out[:, 0] = np.where(inside, c0, np.where(first, a, 0.0))
    out[:, 1] = np.where(inside, c1, np.where(first, 0.0, b))
    return out


def lasso_cd(od, W, H0, lam, n_iter):
    """Nonnegative lasso by cyclic coordinate descent, one 2-vector per pixel.

    Minimises ||od_px - W h||^2 + lam * (h0 + h1) over h >= 0, warm-started at H0.
    """
    od = np.ascontiguousarray(od, dtype=np.float64)
    s, g00, g01, g11 = _gram(W)
    b0, b1 = _proj(od, s)
    h0 = np.array(H0[:, 0], dtype=np.float64)
    h1 = np.array(H0[:, 1], dtype=np.float64)
    half = 0.5 * lam
    for _ in range(int(n_iter)):
        if g00 > 0.0:
            h0 = _pos((b0 - g01 * h1 - half) / g00)
        else:
            h0 = np.zeros_like(h0)
        if g11 > 0.0:
            h1 = _pos((b1 - g01 * h0 - half) / g11)
        else:
            h1 = np.zeros_like(h1)
    return np.stack([h0, h1], axis=1)
