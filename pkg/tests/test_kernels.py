import numpy as np
import pytest

from a2fm import _kernels
from a2fm._kernels import pykernels

try:
    from a2fm._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def naive_conv(x, w, b):
    B, T, W, H, _ = x.shape
    kt, kw, kh, _, Co = w.shape
    pad = np.pad(x, ((0, 0), (kt // 2,) * 2, (kw // 2,) * 2, (kh // 2,) * 2, (0, 0)))
    out = np.zeros((B, T, W, H, Co))
    for n in range(B):
        for t in range(T):
            for i in range(W):
                for j in range(H):
                    patch = pad[n, t : t + kt, i : i + kw, j : j + kh]
                    out[n, t, i, j] = np.einsum("abcd,abcdo->o", patch, w) + b
    return out


def case(rng, k=(3, 3, 3)):
    x = rng.normal(size=(2, 4, 5, 3, 2))
    w = rng.normal(size=k + (2, 3))
    return x, w, rng.normal(size=3)


@pytest.mark.parametrize("k", [(3, 3, 3), (1, 3, 3), (3, 1, 1), (1, 1, 1), (5, 3, 1)])
def test_python_forward_matches_loops(rng, k):
    x, w, b = case(rng, k)
    np.testing.assert_allclose(pykernels.conv3d_forward(x, w, b), naive_conv(x, w, b), rtol=1e-12, atol=1e-12)


def test_python_backward_is_adjoint_of_forward(rng):
    # <conv(x), g> is linear in x and w, so its gradients follow from the forward map
    x, w, b = case(rng)
    g = rng.normal(size=x.shape[:4] + (3,))
    gx, gw, gb = pykernels.conv3d_backward(x, w, g, True, True)
    zero = np.zeros(3)
    assert np.sum(gx * x) == pytest.approx(np.sum(naive_conv(x, w, zero) * g), rel=1e-10)
    assert np.sum(gw * w) == pytest.approx(np.sum(naive_conv(x, w, zero) * g), rel=1e-10)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 1, 2, 3)))


@needs_ext
@pytest.mark.parametrize("k", [(3, 3, 3), (1, 3, 3), (3, 1, 1)])
def test_backends_agree(rng, k):
    x, w, b = case(rng, k)
    g = rng.normal(size=x.shape[:4] + (3,))
    np.testing.assert_allclose(_ckernels.conv3d_forward(x, w, b), pykernels.conv3d_forward(x, w, b), rtol=1e-12, atol=1e-12)
    for c, p in zip(_ckernels.conv3d_backward(x, w, g, True, True), pykernels.conv3d_backward(x, w, g, True, True)):
        np.testing.assert_allclose(c, p, rtol=1e-12, atol=1e-12)


@needs_ext
def test_backward_skips_unrequested_gradients(rng):
    x, w, _ = case(rng)
    g = rng.normal(size=x.shape[:4] + (3,))
    for impl in (_ckernels, pykernels):
        gx, gw, gb = impl.conv3d_backward(x, w, g, False, True)
        assert gx is None and gw is not None and gb is not None
        gx, gw, gb = impl.conv3d_backward(x, w, g, True, False)
        assert gx is not None and gw is None and gb is None


def test_dispatch_reports_backend():
    assert _kernels.BACKEND in ("cython", "python")
    if _ckernels is not None:
        assert _kernels.BACKEND == "cython"


def test_fallback_is_selected_by_environment():
    import os
    import subprocess
    import sys

    env = dict(os.environ, A2FM_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "from a2fm import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
