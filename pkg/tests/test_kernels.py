"""Both kernel backends must agree; the numpy path is always importable."""
import os
import subprocess
import sys

import numpy as np
import pytest

from siesta import kernels

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba backend not active")


def data(seed=0, n=700, k=37, d=5):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)), rng.standard_normal((k, d))


def test_numpy_nearest_matches_direct():
    x, c = data()
    idx, d2 = kernels.nearest_centroid_numpy(x, c)
    full = ((x[:, None] - c[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(idx, full.argmin(1))
    np.testing.assert_allclose(d2, full.min(1), rtol=1e-12)


@needs_numba
def test_backends_agree():
    x, c = data(1)
    i1, d1 = kernels.nearest_centroid_numba(x, c)
    i2, d2 = kernels.nearest_centroid_numpy(x, c)
    np.testing.assert_array_equal(i1, i2)
    np.testing.assert_allclose(d1, d2, rtol=1e-12)

    books = np.random.default_rng(2).standard_normal((4, 16, 3))
    xx = np.random.default_rng(3).standard_normal((200, 12))
    c1 = kernels.pq_encode_numba(xx, books)
    np.testing.assert_array_equal(c1, kernels.pq_encode_numpy(xx, books))
    np.testing.assert_array_equal(kernels.pq_decode_numba(c1, books), kernels.pq_decode_numpy(c1, books))

    labels = np.random.default_rng(4).integers(0, 9, len(x))
    s1, n1 = kernels.lloyd_update_numba(x, labels, 9)
    s2, n2 = kernels.lloyd_update_numpy(x, labels, 9)
    np.testing.assert_array_equal(n1, n2)
    np.testing.assert_allclose(s1, s2, rtol=1e-12, atol=1e-12)

    a = np.full(len(x), np.inf)
    b = a.copy()
    kernels.min_sq_dist_update_numba(x, c[0], a)
    kernels.min_sq_dist_update_numpy(x, c[0], b)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, SIESTA_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "from siesta import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_fit_identical_across_backends(tmp_path):
    """A PQ fit is bit-identical with SIESTA_NUMBA=0 and =1."""
    script = (
        "import numpy as np, sys; from siesta import pq\n"
        "x = np.random.default_rng(0).standard_normal((500, 8))\n"
        "c = pq.fit(x, 4, 16, seed=3)\n"
        "sys.stdout.write(c.to_bytes().hex())\n"
    )
    outs = []
    for flag in ("0", "1"):
        env = dict(os.environ, SIESTA_NUMBA=flag)
        outs.append(subprocess.run([sys.executable, "-c", script], env=env, capture_output=True,
                                   text=True, check=True).stdout)
    assert outs[0] == outs[1]
