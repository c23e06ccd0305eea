import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from manet import _kernels_py, kernels

try:
    from manet import _kernels as _ext
except ImportError:  # pragma: no cover - extension not built
    _ext = None

needs_ext = pytest.mark.skipif(_ext is None, reason="compiled extension not built")


@st.composite
def conv_geometry(draw):
    k = draw(st.integers(1, 4))
    stride = draw(st.integers(1, 3))
    pad = draw(st.integers(0, 2))
    h = draw(st.integers(max(1, k - 2 * pad), 9))
    w = draw(st.integers(max(1, k - 2 * pad), 9))
    h += (-(h + 2 * pad - k)) % stride
    w += (-(w + 2 * pad - k)) % stride
    n, c = draw(st.integers(1, 2)), draw(st.integers(1, 3))
    return n, c, h, w, k, stride, pad


@needs_ext
@given(conv_geometry(), st.integers(0, 2 ** 31 - 1))
def test_im2col_backends_agree(geom, seed):
    n, c, h, w, k, stride, pad = geom
    x = np.random.default_rng(seed).standard_normal((n, c, h, w)).astype(np.float32)
    np.testing.assert_array_equal(_ext.im2col(x, k, stride, pad), _kernels_py.im2col(x, k, stride, pad))


@needs_ext
@given(conv_geometry(), st.integers(0, 2 ** 31 - 1))
def test_col2im_backends_agree(geom, seed):
    n, c, h, w, k, stride, pad = geom
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    cols = np.random.default_rng(seed).standard_normal((n, c * k * k, ho * wo)).astype(np.float32)
    np.testing.assert_allclose(_ext.col2im(cols, c, h, w, k, stride, pad),
                               _kernels_py.col2im(cols, c, h, w, k, stride, pad), rtol=1e-6, atol=1e-6)


@given(conv_geometry(), st.integers(0, 2 ** 31 - 1))
def test_col2im_is_adjoint_of_im2col(geom, seed):
    # <im2col(x), y> == <x, col2im(y)>
    n, c, h, w, k, stride, pad = geom
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    cols = kernels.im2col(x, k, stride, pad)
    y = rng.standard_normal(cols.shape).astype(np.float32)
    lhs = float(np.dot(cols.ravel().astype(np.float64), y.ravel()))
    rhs = float(np.dot(x.ravel().astype(np.float64), kernels.col2im(y, x.shape, k, stride, pad).ravel()))
    assert lhs == pytest.approx(rhs, rel=1e-4, abs=1e-4)


def test_fast_path_matches_general_path(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(kernels.im2col(x, 4, 4, 0), _kernels_py.im2col(x, 4, 4, 0))
    cols = rng.standard_normal((2, 3 * 16, 4)).astype(np.float32)
    np.testing.assert_array_equal(kernels.col2im(cols, (2, 3, 8, 8), 4, 4, 0),
                                  _kernels_py.col2im(cols, 3, 8, 8, 4, 4, 0))


@pytest.mark.parametrize("impl", [_kernels_py, _ext], ids=["python", "cython"])
def test_confusion_backends(impl, rng):
    if impl is None:
        pytest.skip("compiled extension not built")
    t = rng.integers(0, 4, 50)
    p = rng.integers(0, 4, 50)
    cm = impl.confusion(t, p, 4)
    assert cm.sum() == 50
    expected = np.zeros((4, 4), dtype=np.int64)
    np.add.at(expected, (t, p), 1)
    np.testing.assert_array_equal(cm, expected)
    with pytest.raises(ValueError):
        impl.confusion(np.array([0, 4]), np.array([0, 1]), 4)


def test_confusion_size_mismatch():
    with pytest.raises(ValueError, match="sizes differ"):
        kernels.confusion(np.zeros(3, int), np.zeros(4, int), 2)


def test_pure_python_switch():
    env = dict(os.environ, MANET_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import manet.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_ext
def test_default_backend_is_compiled():
    assert kernels.BACKEND == "cython"
