import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from scorealign import kernels


def _mixture(rng, k, d):
    w = rng.dirichlet(np.ones(k))
    means = rng.normal(size=(k, d)) * 2
    L = rng.normal(size=(k, d, d)) * 0.4
    covs = L @ L.transpose(0, 2, 1) + 0.3 * np.eye(d)
    return w, means, covs


def _scipy_logpdf(x, a, b, w, means, covs):
    out = np.empty(len(x))
    d = x.shape[1]
    for i in range(len(x)):
        comps = [np.log(w[k]) + multivariate_normal(a[i] * means[k], a[i] ** 2 * covs[k] + b[i] ** 2 * np.eye(d)).logpdf(x[i])
                 for k in range(len(w))]
        out[i] = np.logaddexp.reduce(comps)
    return out


@pytest.mark.parametrize("d,k", [(1, 1), (1, 3), (2, 2), (3, 4)])
def test_gmm_eval_matches_scipy_on_both_backends(d, k):
    rng = np.random.default_rng(d * 10 + k)
    w, means, covs = _mixture(rng, k, d)
    x = rng.normal(size=(25, d)) * 2
    a, b = rng.uniform(0.5, 1.0, 25), rng.uniform(0.0, 2.0, 25)
    ref = _scipy_logpdf(x, a, b, w, means, covs)
    for backend in ("numpy", "numba"):
        lp = kernels.gmm_eval(x, a, b, w, means, covs, backend=backend)[0]
        assert np.allclose(lp, ref, rtol=1e-10, atol=1e-10), backend


def test_backends_agree_including_hessian():
    rng = np.random.default_rng(1)
    w, means, covs = _mixture(rng, 3, 2)
    x = rng.normal(size=(200, 2)) * 3
    a, b = np.ones(200), rng.uniform(0.05, 4.0, 200)
    A = kernels.gmm_eval(x, a, b, w, means, covs, True, backend="numpy")
    B = kernels.gmm_eval(x, a, b, w, means, covs, True, backend="numba")
    for u, v in zip(A, B):
        assert np.allclose(u, v, rtol=1e-10, atol=1e-12)


def test_score_and_hessian_are_derivatives():
    rng = np.random.default_rng(2)
    w, means, covs = _mixture(rng, 2, 2)
    x = rng.normal(size=(6, 2))
    a, b = np.ones(6), np.full(6, 0.7)
    _, s, H, _ = kernels.gmm_eval(x, a, b, w, means, covs, True)
    h = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        lp_p = kernels.gmm_eval(x + e, a, b, w, means, covs)[0]
        lp_m = kernels.gmm_eval(x - e, a, b, w, means, covs)[0]
        assert np.allclose((lp_p - lp_m) / (2 * h), s[:, j], rtol=1e-6, atol=1e-8)
        s_p = kernels.gmm_eval(x + e, a, b, w, means, covs)[1]
        s_m = kernels.gmm_eval(x - e, a, b, w, means, covs)[1]
        assert np.allclose((s_p - s_m) / (2 * h), H[:, :, j], rtol=1e-6, atol=1e-8)


def test_far_tail_is_finite():
    w, means, covs = np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([[[0.01]], [[0.01]]])
    lp, s, _, r = kernels.gmm_eval(np.array([[60.0]]), np.ones(1), np.zeros(1), w, means, covs)
    assert np.all(np.isfinite(lp)) and np.all(np.isfinite(s)) and np.isclose(r.sum(), 1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.integers(1, 3), st.integers(0, 10_000))
def test_energy_distance_backends_agree(n, m, d, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, d)), rng.normal(size=(m, d)) + 0.5
    a = kernels.energy_distance(x, y, backend="numpy")
    b = kernels.energy_distance(x, y, backend="numba")
    assert np.isclose(a, b, rtol=1e-10, atol=1e-12)


def test_energy_distance_matches_direct_formula():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(30, 2)), rng.normal(size=(20, 2))
    dxy = np.linalg.norm(x[:, None] - y[None], axis=-1).mean()
    dxx = np.linalg.norm(x[:, None] - x[None], axis=-1).sum() / (30 * 29)
    dyy = np.linalg.norm(y[:, None] - y[None], axis=-1).sum() / (20 * 19)
    assert np.isclose(kernels.energy_distance(x, y), 2 * dxy - dxx - dyy)


def test_energy_distance_separates_shifted_samples():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(500, 2))
    same = kernels.energy_distance(x, rng.normal(size=(500, 2)))
    shifted = kernels.energy_distance(x, rng.normal(size=(500, 2)) + 1.0)
    assert abs(same) < 0.02 and shifted > 0.3


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.energy_distance(np.zeros((2, 1)), np.zeros((2, 1)), backend="cuda")


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba"), ("", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = {**os.environ, "SCOREALIGN_DISABLE_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", "from scorealign import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
