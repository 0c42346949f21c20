import os
import subprocess
import sys

import numpy as np
import pytest

from groundview import _accel

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")

SHAPES = [(2, 12, 12, 3, 5, 2, 4, 4), (1, 9, 9, 4, 5, 1, 5, 5), (3, 6, 6, 2, 1, 1, 6, 6)]


@pytest.mark.parametrize("n,hp,wp,c,k,s,ho,wo", SHAPES)
def test_im2col_backends_bit_identical(n, hp, wp, c, k, s, ho, wo):
    xp = np.random.default_rng(0).standard_normal((n, hp, wp, c)).astype(np.float32)
    a = _accel.get_kernels("numpy")[0](xp, k, s, ho, wo)
    b = _accel.get_kernels("numba")[0](xp, k, s, ho, wo)
    assert a.shape == (n, ho, wo, k, k, c)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("n,hp,wp,c,k,s,ho,wo", SHAPES)
def test_col2im_backends_agree(n, hp, wp, c, k, s, ho, wo):
    cols = np.random.default_rng(1).standard_normal((n, ho, wo, k, k, c))
    a = _accel.get_kernels("numpy")[1](cols, hp, wp, s)
    b = _accel.get_kernels("numba")[1](cols, hp, wp, s)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_im2col_loop_oracle():
    xp = np.arange(2 * 7 * 7 * 2, dtype=np.float64).reshape(2, 7, 7, 2)
    cols = _accel.im2col(xp, 3, 2, 3, 3)
    for b in range(2):
        for y in range(3):
            for x in range(3):
                np.testing.assert_array_equal(cols[b, y, x], xp[b, 2 * y : 2 * y + 3, 2 * x : 2 * x + 3])


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(2)
    xp = rng.standard_normal((2, 11, 11, 3))
    cols = rng.standard_normal((2, 4, 4, 5, 5, 3))
    for backend in ("numpy", "numba"):
        im2col, col2im = _accel.get_kernels(backend)
        lhs = (im2col(xp, 5, 2, 4, 4) * cols).sum()
        rhs = (xp * col2im(cols, 11, 11, 2)).sum()
        assert abs(lhs - rhs) < 1e-9


def _backend_in_subprocess(value):
    env = dict(os.environ, GROUNDVIEW_BACKEND=value)
    return subprocess.run([sys.executable, "-c", "from groundview import _accel; print(_accel.BACKEND)"],
                          env=env, capture_output=True, text=True)


@pytest.mark.parametrize("value", ["numpy", "numba"])
def test_env_flag_selects_backend(value):
    res = _backend_in_subprocess(value)
    assert res.returncode == 0, res.stderr
    assert res.stdout.strip() == value


def test_env_flag_rejects_unknown():
    res = _backend_in_subprocess("cuda")
    assert res.returncode != 0 and "GROUNDVIEW_BACKEND" in res.stderr


def test_unknown_backend_name():
    with pytest.raises(ValueError):
        _accel.get_kernels("fortran")
