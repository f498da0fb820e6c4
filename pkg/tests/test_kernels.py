import numpy as np
import pytest
from scipy.optimize import nnls

from mitoshift import _kernels_py, kernels
from mitoshift.stain import RUIFROK_HE

try:
    from mitoshift import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def od_pixels(n, seed=0):
    r = np.random.default_rng(seed)
    return np.abs(r.normal(size=(n, 2)) @ RUIFROK_HE.T + 0.05 * r.normal(size=(n, 3)))


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_nnls2_matches_scipy():
    od = od_pixels(300, 1)
    got = _kernels_py.nnls2(od, RUIFROK_HE)
    ref = np.array([nnls(RUIFROK_HE, px)[0] for px in od])
    assert np.max(np.abs(got - ref)) < 1e-10


def test_lasso_cd_matches_objective_minimum():
    # a long CD run reaches the lasso optimum found by projected coordinate search
    od = od_pixels(50, 2)
    H0 = _kernels_py.nnls2(od, RUIFROK_HE)
    H = _kernels_py.lasso_cd(od, RUIFROK_HE, H0, 0.1, 500)
    assert (H >= 0).all()
    G = RUIFROK_HE.T @ RUIFROK_HE
    grad = 2 * (H @ G - od @ RUIFROK_HE) + 0.1
    # KKT: zero gradient on the support, nonnegative gradient at the bound
    assert np.max(np.abs(grad[H > 0])) < 1e-8
    assert grad[H == 0].min(initial=0.0) > -1e-8


@needs_ext
def test_nnls2_backends_bit_identical():
    od = od_pixels(5000, 3)
    assert np.array_equal(_ckernels.nnls2(od, RUIFROK_HE), _kernels_py.nnls2(od, RUIFROK_HE))


@needs_ext
@pytest.mark.parametrize("lam", [0.0, 0.1, 1.0])
def test_lasso_cd_backends_bit_identical(lam):
    od = od_pixels(5000, 4)
    H0 = _kernels_py.nnls2(od, RUIFROK_HE)
    a = _ckernels.lasso_cd(od, RUIFROK_HE, H0, lam, 20)
    b = _kernels_py.lasso_cd(od, RUIFROK_HE, H0, lam, 20)
    assert np.array_equal(a, b)
