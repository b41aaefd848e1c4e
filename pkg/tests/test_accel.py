"""The numba and numpy variants of every kernel must agree."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xaiews import _accel

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 3), d=st.integers(1, 4),
       cin=st.integers(1, 5), cout=st.integers(1, 5))
def test_zplus_conv_paths_agree(seed, K, d, cin, cout):
    rng = np.random.default_rng(seed)
    a = rng.random((2, 7, cin))
    w = rng.normal(size=(K, cin, cout))
    r = rng.random((2, 7, cout))
    np.testing.assert_allclose(_accel.zplus_conv_loops(a, w, d, r, 1e-12),
                               _accel.zplus_conv_numpy(a, w, d, r, 1e-12), rtol=1e-12, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 60), m=st.integers(1, 60))
def test_pair_auroc_paths_agree(seed, n, m):
    rng = np.random.default_rng(seed)
    pos = rng.integers(0, 5, n).astype(float)
    neg = rng.integers(0, 5, m).astype(float)
    assert _accel.pair_auroc_loops(pos, neg) == pytest.approx(_accel.pair_auroc_numpy(pos, neg), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 80), d=st.integers(1, 4))
def test_best_split_paths_agree(seed, n, d):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 6, size=(n, d)).astype(float)
    target = rng.normal(size=n)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable"))
    mask = rng.random(n) < 0.8
    f1, t1, g1 = _accel.best_split_loops(X, target, order, mask)
    f2, t2, g2 = _accel.best_split_numpy(X, target, order, mask)
    assert f1 == f2
    assert t1 == t2
    assert g1 == pytest.approx(g2, rel=1e-9, abs=1e-12)


def test_bucket_paths_agree():
    rng = np.random.default_rng(0)
    bins = rng.integers(0, 24, 500)
    codes = rng.integers(0, 34, 500)
    vals = rng.normal(size=500)
    s1, c1 = _accel.bucket_loops(bins, codes, vals, 24, 34)
    s2, c2 = _accel.bucket_numpy(bins, codes, vals, 24, 34)
    np.testing.assert_allclose(s1, s2, atol=1e-12)
    assert np.array_equal(c1, c2)


def test_env_flag_selects_numpy(monkeypatch):
    import subprocess
    import sys
    code = "import xaiews._accel as a; print(a.USE_NUMBA)"
    out = subprocess.run([sys.executable, "-c", code], env={"XAIEWS_NUMBA": "0", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
