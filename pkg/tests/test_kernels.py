import numpy as np
import pytest

from soundlm import kernels


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(7)


def test_assign_nearest_matches_bruteforce(rng):
    points = rng.normal(size=(200, 8))
    centers = rng.normal(size=(16, 8))
    idx, d2 = kernels.assign_nearest(points, centers)
    # brute force oracle with explicit distances
    full = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assert np.array_equal(idx, np.argmin(full, axis=1))
    assert np.allclose(d2, full[np.arange(200), idx], rtol=1e-12, atol=1e-12)


def test_assign_nearest_tie_breaks_to_smallest_index():
    points = np.array([[0.0, 0.0]])
    centers = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    idx, _ = kernels.assign_nearest(points, centers)
    assert idx[0] == 0


def test_backends_agree(rng):
    points = rng.normal(size=(300, 6))
    centers = rng.normal(size=(20, 6))
    i_np, d_np = kernels.assign_nearest_np(points, centers)
    if kernels.NUMBA_AVAILABLE:
        i_nb, d_nb = kernels.assign_nearest_numba(points, centers)
        assert np.array_equal(i_np, i_nb)
        assert np.allclose(d_np, d_nb, rtol=1e-10)


def test_rvq_encode_backends_agree(rng):
    frames = rng.normal(size=(64, 4))
    books = rng.normal(size=(3, 8, 4))
    c_np, r_np = kernels.rvq_encode_np(frames, books)
    if kernels.NUMBA_AVAILABLE:
        c_nb, r_nb = kernels.rvq_encode_numba(frames, books)
        assert np.array_equal(c_np, c_nb)
        assert np.allclose(r_np, r_nb, rtol=1e-12, atol=1e-12)


def test_env_flag_selects_numpy_fallback():
    import subprocess
    import sys

    code = (
        "import os; os.environ['SOUNDLM_NUMBA']='0';"
        "from soundlm import kernels;"
        "assert not kernels.USE_NUMBA;"
        "import numpy as np;"
        "i,d = kernels.assign_nearest(np.zeros((2,3)), np.ones((4,3)));"
        "print('ok', i.tolist())"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert "ok" in out.stdout


def test_gelu_kernels_match_numpy(rng):
    x = rng.normal(size=1000).astype(np.float32)
    dm = rng.normal(size=1000).astype(np.float32)
    y_np, t_np = kernels.gelu_fwd_np(x)
    if kernels.NUMBA_AVAILABLE:
        y_nb, t_nb = kernels.gelu_fwd_numba(x)
        assert np.allclose(y_np, y_nb, atol=1e-6)
        g_np = kernels.gelu_bwd_np(x, t_np, dm)
        g_nb = kernels.gelu_bwd_numba(x, t_nb, dm)
        assert np.allclose(g_np, g_nb, atol=1e-5)


def test_rvq_encode_is_stagewise_greedy(rng):
    frames = rng.normal(size=(32, 5))
    books = rng.normal(size=(2, 6, 5))
    codes, resid = kernels.rvq_encode(frames, books)
    r = frames.copy()
    for n in range(2):
        d = ((r[:, None, :] - books[n][None, :, :]) ** 2).sum(axis=2)
        assert np.array_equal(codes[n], np.argmin(d, axis=1))
        r = r - books[n][codes[n]]
    assert np.allclose(resid, r, atol=1e-12)
