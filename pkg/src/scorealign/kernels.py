"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``SCOREALIGN_DISABLE_NUMBA``
is unset (or set to ``0``/``false``). Both paths compute the same values
to rounding; ``tests/test_kernels.py`` checks them against each other and
``benchmarks/bench_kernels.py`` times them.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec if not args or not callable(args[0]) else args[0]


def _env_disabled() -> bool:
    return os.environ.get("SCOREALIGN_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")


BACKEND = "numba" if NUMBA_AVAILABLE and not _env_disabled() else "numpy"

_LOG2PI = math.log(2.0 * math.pi)


def _pick(backend: str | None) -> str:
    b = backend or BACKEND
    if b not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {b!r}")
    if b == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is not importable")
    return b


# --- diffused Gaussian mixture: log-density, score, Hessian ------------------


def _gmm_eval_numpy(x, alpha, beta, log_w, means, covs, want_hess):
    n, d = x.shape
    eye = np.eye(d)
    # (n, K, d, d) per-row diffused covariances
    c = alpha[:, None, None, None] ** 2 * covs[None] + (beta[:, None, None, None] ** 2) * eye
    chol = np.linalg.cholesky(c)
    r = x[:, None, :] - alpha[:, None, None] * means[None]
    prec = np.linalg.inv(c)
    u = np.einsum("nkij,nkj->nki", prec, r)
    quad = np.einsum("nki,nki->nk", r, u)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    logn = log_w[None] - 0.5 * (quad + logdet + d * _LOG2PI)
    m = logn.max(axis=1, keepdims=True)
    logp = (np.log(np.exp(logn - m).sum(axis=1, keepdims=True)) + m)[:, 0]
    resp = np.exp(logn - logp[:, None])
    comp = -u
    score = np.einsum("nk,nki->ni", resp, comp)
    if want_hess:
        hess = (
            np.einsum("nk,nkij->nij", resp, -prec)
            + np.einsum("nk,nki,nkj->nij", resp, comp, comp)
            - score[:, :, None] * score[:, None, :]
        )
    else:
        hess = np.zeros((n, d, d))
    return logp, score, hess, resp


@njit(cache=True)
def _gmm_eval_numba(x, alpha, beta, log_w, means, covs, want_hess):
    n, d = x.shape
    K = means.shape[0]
    logp = np.empty(n)
    score = np.zeros((n, d))
    hess = np.zeros((n, d, d))
    resp = np.empty((n, K))
    logn = np.empty(K)
    comp = np.empty((K, d))
    prec = np.empty((K, d, d))
    c = np.empty((d, d))
    L = np.empty((d, d))
    r = np.empty(d)
    y = np.empty(d)
    log2pi = math.log(2.0 * math.pi)
    for i in range(n):
        a2 = alpha[i] * alpha[i]
        b2 = beta[i] * beta[i]
        for k in range(K):
            for p in range(d):
                for q in range(d):
                    c[p, q] = a2 * covs[k, p, q]
                c[p, p] += b2
            # Cholesky
            for p in range(d):
                for q in range(p + 1):
                    s = c[p, q]
                    for j in range(q):
                        s -= L[p, j] * L[q, j]
                    if p == q:
                        L[p, p] = math.sqrt(s)
                    else:
                        L[p, q] = s / L[q, q]
                for q in range(p + 1, d):
                    L[p, q] = 0.0
            logdet = 0.0
            for p in range(d):
                logdet += 2.0 * math.log(L[p, p])
                r[p] = x[i, p] - alpha[i] * means[k, p]
            # precision = L^-T L^-1, built column by column
            for col in range(d):
                for p in range(d):
                    s = 1.0 if p == col else 0.0
                    for j in range(p):
                        s -= L[p, j] * y[j]
                    y[p] = s / L[p, p]
                for p in range(d - 1, -1, -1):
                    s = y[p]
                    for j in range(p + 1, d):
                        s -= L[j, p] * prec[k, j, col]
                    prec[k, p, col] = s / L[p, p]
            quad = 0.0
            for p in range(d):
                s = 0.0
                for q in range(d):
                    s += prec[k, p, q] * r[q]
                comp[k, p] = -s
                quad += r[p] * s
            logn[k] = log_w[k] - 0.5 * (quad + logdet + d * log2pi)
        m = logn[0]
        for k in range(1, K):
            if logn[k] > m:
                m = logn[k]
        tot = 0.0
        for k in range(K):
            tot += math.exp(logn[k] - m)
        lp = m + math.log(tot)
        logp[i] = lp
        for k in range(K):
            rk = math.exp(logn[k] - lp)
            resp[i, k] = rk
            for p in range(d):
                score[i, p] += rk * comp[k, p]
        if want_hess:
            for k in range(K):
                rk = resp[i, k]
                for p in range(d):
                    for q in range(d):
                        hess[i, p, q] += rk * (comp[k, p] * comp[k, q] - prec[k, p, q])
            for p in range(d):
                for q in range(d):
                    hess[i, p, q] -= score[i, p] * score[i, q]
    return logp, score, hess, resp


def gmm_eval(x, alpha, beta, weights, means, covs, want_hess: bool = False, backend: str | None = None):
    """Evaluate the mixture diffused row-wise to ``N(alpha*mu_k, alpha^2 Sigma_k + beta^2 I)``.

    ``alpha`` and ``beta`` are per-row scales, shape ``(n,)``. Returns
    ``(logpdf (n,), score (n, d), hessian of log-density (n, d, d), responsibilities (n, K))``.
    The Hessian is zeros unless ``want_hess``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    alpha = np.ascontiguousarray(np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,)))
    beta = np.ascontiguousarray(np.broadcast_to(np.asarray(beta, dtype=np.float64), (n,)))
    log_w = np.log(np.asarray(weights, dtype=np.float64))
    means = np.ascontiguousarray(means, dtype=np.float64)
    covs = np.ascontiguousarray(covs, dtype=np.float64)
    if _pick(backend) == "numba":
        return _gmm_eval_numba(x, alpha, beta, log_w, means, covs, bool(want_hess))
    return _gmm_eval_numpy(x, alpha, beta, log_w, means, covs, bool(want_hess))


# --- two-sample distances ---------------------------------------------------


def _mean_pdist_numpy(x, y, exclude_diag, chunk=1024):
    total = 0.0
    for s in range(0, x.shape[0], chunk):
        blk = x[s : s + chunk]
        dist = np.sqrt(((blk[:, None, :] - y[None, :, :]) ** 2).sum(-1))
        total += dist.sum()
    n, m = x.shape[0], y.shape[0]
    return total / (n * (n - 1) if exclude_diag else n * m)


@njit(cache=True)
def _mean_pdist_numba(x, y, exclude_diag):
    n, d = x.shape
    m = y.shape[0]
    total = 0.0
    for i in range(n):
        acc = 0.0
        for j in range(m):
            s = 0.0
            for p in range(d):
                diff = x[i, p] - y[j, p]
                s += diff * diff
            acc += math.sqrt(s)
        total += acc
    if exclude_diag:
        return total / (n * (n - 1))
    return total / (n * m)


def mean_pairwise_distance(x, y, same: bool = False, backend: str | None = None) -> float:
    """Mean Euclidean distance over all pairs; ``same`` drops the zero diagonal of x vs x."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
        y = y[:, None]
    if _pick(backend) == "numba":
        return float(_mean_pdist_numba(x, y, bool(same)))
    return float(_mean_pdist_numpy(x, y, same))


def energy_distance(x, y, backend: str | None = None) -> float:
    """``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` with unbiased within-sample terms."""
    exy = mean_pairwise_distance(x, y, backend=backend)
    exx = mean_pairwise_distance(x, x, same=True, backend=backend)
    eyy = mean_pairwise_distance(y, y, same=True, backend=backend)
    return 2.0 * exy - exx - eyy
