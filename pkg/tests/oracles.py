"""Brute-force reference implementations used as test oracles.

These deliberately avoid the library: explicit loops for the kernel,
explicit inverses for GP algebra, and scipy densities for likelihoods.
"""

import math

import numpy as np
from scipy import stats

SQRT3 = math.sqrt(3.0)


def matern32(x, x2, o, ls):
    r = math.sqrt(sum(((a - b) / l) ** 2 for a, b, l in zip(x, x2, ls)))
    return o * o * (1.0 + SQRT3 * r) * math.exp(-SQRT3 * r)


def sq_exp(x, x2, o, ls):
    r2 = sum(((a - b) / l) ** 2 for a, b, l in zip(x, x2, ls))
    return o * o * math.exp(-0.5 * r2)


def gram_loop(X, X2, o, ls, fn=matern32):
    return np.array([[fn(a, b, o, ls) for b in X2] for a in X])


def exact_dense(K, Ks, kss, y, s2):
    """Exact posterior mean / variance with an explicit inverse."""
    Kinv = np.linalg.inv(K + s2 * np.eye(len(y)))
    mean = Ks @ Kinv @ y
    var = kss - np.einsum("ij,jk,ik->i", Ks, Kinv, Ks)
    return mean, var


def nll_dense(K, y, s2):
    n = len(y)
    return -stats.multivariate_normal(np.zeros(n), K + s2 * np.eye(n)).logpdf(y)


def cagp_dense(K, Ks, kss, y, s2, S):
    """CaGP posterior with C = S (S' Khat S)^-1 S' formed explicitly."""
    Khat = K + s2 * np.eye(len(y))
    C = S @ np.linalg.inv(S.T @ Khat @ S) @ S.T
    mean = Ks @ C @ y
    var = kss - np.einsum("ij,jk,ik->i", Ks, C, Ks)
    return mean, var


def projected_nll_dense(K, y, s2, S):
    """-log N(Q'y; 0, Q' Khat Q) with Q an orthonormal basis of span(S)."""
    Q, _ = np.linalg.qr(S)
    Khat = K + s2 * np.eye(len(y))
    cov = Q.T @ Khat @ Q
    return -stats.multivariate_normal(np.zeros(Q.shape[1]), cov).logpdf(Q.T @ y)


def elbo_dense(K, y, s2, S):
    """Expected negative log-likelihood under q plus KL(q || prior)."""
    n = len(y)
    Khat = K + s2 * np.eye(n)
    C = S @ np.linalg.inv(S.T @ Khat @ S) @ S.T
    m = K @ C @ y
    V = K - K @ C @ K
    V = 0.5 * (V + V.T)
    ell = 0.5 * n * math.log(2 * math.pi * s2) + 0.5 * (np.sum((y - m) ** 2) + np.trace(V)) / s2
    Kinv = np.linalg.inv(K)
    kl = 0.5 * (np.trace(Kinv @ V) + m @ Kinv @ m - n + np.linalg.slogdet(K)[1] - np.linalg.slogdet(V)[1])
    return ell + kl


def central_diff(f, x, h):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def random_problem(rng, n, d=2, noise=None):
    X = rng.uniform(size=(n, d))
    o = rng.uniform(0.5, 2.0)
    ls = rng.uniform(0.15, 0.6, size=d)
    sigma = noise if noise is not None else rng.uniform(0.1, 0.5)
    y = rng.standard_normal(n)
    return X, y, o, ls, sigma
