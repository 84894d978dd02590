"""The compiled kernels and the NumPy fallback must agree."""

import importlib
import os
import subprocess
import sys

import numpy as np
import pytest

from tbcnn import kernels
from tbcnn.kernels import _numpy

compiled = pytest.importorskip("tbcnn.kernels._compiled")
rng = np.random.default_rng(7)


def close(a, b):
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("shape,kernel", [((2, 5, 4, 3), (2, 3, 3)), ((1, 6, 7, 2), (3, 1, 3)),
                                          ((3, 4, 4, 1), (1, 5, 1))])
def test_conv(shape, kernel):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((kernel[0], kernel[1], kernel[2], shape[-1]))
    b = rng.standard_normal(kernel[0])
    (o1, c1), (o2, c2) = _numpy.conv2d_forward(x, w, b), compiled.conv2d_forward(x, w, b)
    close(o1, o2)
    g = rng.standard_normal(o1.shape)
    for r1, r2 in zip(_numpy.conv2d_backward(c1, x.shape, w, g),
                      compiled.conv2d_backward(c2, x.shape, w, g)):
        close(r1, r2)
    gx, gw, gb = compiled.conv2d_backward(c2, x.shape, w, g, False)
    assert gx is None
    close(gw, _numpy.conv2d_backward(c1, x.shape, w, g)[1])


@pytest.mark.parametrize("shape,k", [((2, 5, 4, 3), (3, 3)), ((1, 6, 2, 2), (5, 3)), ((2, 3, 3, 4), (1, 1))])
def test_depthwise(shape, k):
    x = rng.standard_normal(shape)
    w, b = rng.standard_normal((shape[-1],) + k), rng.standard_normal(shape[-1])
    close(_numpy.depthwise_forward(x, w, b), compiled.depthwise_forward(x, w, b))
    g = rng.standard_normal(shape)
    for r1, r2 in zip(_numpy.depthwise_backward(x, w, g), compiled.depthwise_backward(x, w, g)):
        close(r1, r2)


def test_maxpool_and_relu():
    x = rng.standard_normal((2, 7, 8, 3))
    (o1, w1), (o2, w2) = _numpy.maxpool2d_forward(x, 2, 3), compiled.maxpool2d_forward(x, 2, 3)
    close(o1, o2)
    np.testing.assert_array_equal(w1, w2)
    g = rng.standard_normal(o1.shape)
    close(_numpy.maxpool2d_backward(g, w1, x.shape), compiled.maxpool2d_backward(g, w2, x.shape))
    flat = x.reshape(-1)
    close(_numpy.relu_backward(flat, np.maximum(flat, 0)), compiled.relu_backward(flat, np.maximum(flat, 0)))


@pytest.mark.parametrize("view", [(2, 1, 5, 12), (3, 4, 6, 2), (2, 9, 4, 1)])
def test_squeeze_excite_passes(view):
    z = rng.standard_normal(view)
    (h1, d1), (h2, d2) = _numpy.relu_squeeze(z), compiled.relu_squeeze(z)
    close(h1, h2)
    close(d1, d2)
    g = rng.standard_normal(view)
    a, gd = rng.random((view[0], view[2])), rng.standard_normal((view[0], view[2]))
    close(_numpy.scale_grad(g, h1), compiled.scale_grad(g, h1))
    close(_numpy.relu_squeeze_scale_grad(g, h1, a, gd), compiled.relu_squeeze_scale_grad(g, h1, a, gd))


def test_adam_update():
    n = 1000
    p0 = rng.standard_normal(n)
    a = [p0.copy(), np.zeros(n), np.zeros(n)]
    b = [p0.copy(), np.zeros(n), np.zeros(n)]
    for t in range(1, 6):
        g = rng.standard_normal(n)
        _numpy.adam_update(a[0], g, a[1], a[2], 1e-3, 0.9, 0.999, 1e-8, t)
        compiled.adam_update(b[0], g, b[1], b[2], 1e-3, 0.9, 0.999, 1e-8, t)
    for u, v in zip(a, b):
        close(u, v)


def test_backend_selection_env():
    code = "from tbcnn import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, TBCNN_KERNELS="numpy")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "numpy"
    env["TBCNN_KERNELS"] = "bogus"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.returncode != 0 and "TBCNN_KERNELS" in out.stderr
    assert kernels.BACKEND == "compiled"
