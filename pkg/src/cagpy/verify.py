"""Property suites run by ``cagpy verify``.

Every check compares the library against an independent dense
computation (explicit n x n matrices, eigendecompositions, finite
differences) on small random problems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .actions import (ActionMatrix, actions_cg, actions_eigen_oracle, actions_random, actions_sparse_init,
                      mutual_information)
from .cagp import fit_batch, fit_via_projected_observation, predict_cagp
from .exact_gp import fit_exact, khat_dense, nll_exact, predict_exact
from .kernels import HyperParams, KernelSpec
from .losses import loss_and_grad, loss_elbo, loss_projected_nll, loss_value
from .metrics import grassmann_distance

SPEC = KernelSpec()


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str


def random_instance(rng, n, d=2, noise=None):
    """Random inputs, hyperparameters and targets for a property check."""
    X = rng.uniform(size=(n, d))
    params = HyperParams(
        math.log(rng.uniform(0.5, 2.0)),
        np.log(rng.uniform(0.15, 0.6, size=d)),
        math.log(noise if noise is not None else rng.uniform(0.1, 0.5)),
    )
    y = rng.standard_normal(n)
    return X, y, params


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))) if a.size else 0.0


def close(a, b, rtol, atol=0.0):
    return bool(np.all(np.abs(np.asarray(a) - np.asarray(b)) <= atol + rtol * np.abs(np.asarray(b))))


def dense_elbo(spec, params, X, y, S):
    """-E_q[log p(y | f)] + KL(q || prior) with explicit n x n matrices."""
    n = y.size
    s2 = params.noise_var
    K = kernels.gram(spec, params, X)
    Sd = S.dense()
    C = Sd @ np.linalg.solve(Sd.T @ (K + s2 * np.eye(n)) @ Sd, Sd.T)
    mu = K @ C @ y
    Ki = K - K @ C @ K
    Ki = 0.5 * (Ki + Ki.T)
    ell = 0.5 * (np.sum((y - mu) ** 2) / s2 + np.trace(Ki) / s2 + n * math.log(s2) + n * math.log(2 * math.pi))
    Kinv_mu = np.linalg.solve(K, mu)
    _, ld_K = np.linalg.slogdet(K)
    _, ld_Ki = np.linalg.slogdet(Ki)
    kl = 0.5 * (mu @ Kinv_mu + np.trace(np.linalg.solve(K, Ki)) - n + ld_K - ld_Ki)
    return ell + kl


def suite_exactness(rng):
    out = []
    for t in range(3):
        n = int(rng.integers(20, 80))
        X, y, p = random_instance(rng, n)
        Xs = rng.uniform(size=(50, X.shape[1]))
        S = ActionMatrix.dense_from(np.eye(n))
        m, v, _ = predict_cagp(fit_batch(SPEC, p, X, y, S), Xs)
        me, ve = predict_exact(fit_exact(SPEC, p, X, y), Xs)
        nll = nll_exact(SPEC, p, X, y)
        ok = close(m, me, 1e-7, 1e-12) and close(v, ve, 1e-7, 1e-12)
        ok &= close(loss_elbo(SPEC, p, X, y, S).total, nll, 1e-8)
        ok &= close(loss_projected_nll(SPEC, p, X, y, S).total, nll, 1e-8)
        out.append(("full-rank recovery", ok, f"n={n} mean rel err {rel_err(m, me):.2e}"))
    return out


def suite_projected_observation(rng):
    out = []
    for t in range(10):
        n = int(rng.integers(10, 100))
        X, y, p = random_instance(rng, n)
        i = int(rng.integers(1, min(n, 20) + 1))
        S = actions_random(n, i, int(rng.integers(1 << 31)))
        Xs = rng.uniform(size=(15, X.shape[1]))
        m, v, _ = predict_cagp(fit_batch(SPEC, p, X, y, S), Xs)
        mo, vo, _ = fit_via_projected_observation(SPEC, p, X, y, S).predict(Xs)
        ok = close(m, mo, 1e-8, 1e-12) and close(v, vo, 1e-8, 1e-12)
        out.append((f"instance {t}", ok, f"n={n} i={i} var rel err {rel_err(v, vo):.2e}"))
    return out


def suite_monotonicity(rng):
    out = []
    for t in range(5):
        n = 200
        X, y, p = random_instance(rng, n)
        Xs = rng.uniform(size=(20, X.shape[1]))
        S = actions_random(n, 16, int(rng.integers(1 << 31))).dense()
        _, ve = predict_exact(fit_exact(SPEC, p, X, y), Xs)
        prev = None
        ok = True
        for i in (1, 2, 4, 8, 16):
            _, v, _ = predict_cagp(fit_batch(SPEC, p, X, y, ActionMatrix.dense_from(S[:, :i])), Xs)
            ok &= bool(np.all(v >= ve - 1e-10))
            if prev is not None:
                ok &= bool(np.all(prev >= v - 1e-10))
            prev = v
        out.append((f"seed {t}", ok, "nested prefixes 1,2,4,8,16"))
    return out


def _invertible(rng, i, kind):
    if kind == "permutation":
        return np.eye(i)[rng.permutation(i)]
    if kind == "diagonal":
        return np.diag(rng.uniform(0.1, 10.0, size=i))
    while True:
        W = rng.standard_normal((i, i))
        if np.linalg.cond(W) < 1e3:
            return W


def suite_invariance(rng):
    out = []
    for t in range(20):
        n = int(rng.integers(20, 80))
        X, y, p = random_instance(rng, n)
        i = int(rng.integers(1, 10))
        S = actions_random(n, i, int(rng.integers(1 << 31)))
        kind = ("permutation", "diagonal", "general")[t % 3]
        SW = ActionMatrix.dense_from(S.cols @ _invertible(rng, i, kind))
        Xs = rng.uniform(size=(10, X.shape[1]))
        a = predict_cagp(fit_batch(SPEC, p, X, y, S), Xs)
        b = predict_cagp(fit_batch(SPEC, p, X, y, SW), Xs)
        ok = close(b[0], a[0], 1e-8, 1e-12) and close(b[1], a[1], 1e-8, 1e-12)
        ok &= close(loss_elbo(SPEC, p, X, y, SW).total, loss_elbo(SPEC, p, X, y, S).total, 1e-8)
        ok &= close(loss_projected_nll(SPEC, p, X, y, SW).total, loss_projected_nll(SPEC, p, X, y, S).total, 1e-8)
        out.append((f"W {kind} #{t}", ok, f"n={n} i={i}"))
    return out


def suite_elbo_oracle(rng):
    out = []
    for t in range(20):
        n = int(rng.integers(20, 200))
        X, y, p = random_instance(rng, n)
        i = int(rng.integers(1, 16))
        S = actions_sparse_init(n, i, t) if t % 2 else actions_random(n, i, t)
        got = loss_elbo(SPEC, p, X, y, S).total
        ref = dense_elbo(SPEC, p, X, y, S)
        out.append((f"config {t}", close(got, ref, 1e-8), f"n={n} i={i} rel err {rel_err(got, ref):.2e}"))
    return out


def suite_info_policy(rng):
    out = []
    for t in range(3):
        n = int(rng.integers(10, 41))
        X, y, p = random_instance(rng, n)
        lam = np.sort(np.linalg.eigvalsh(khat_dense(SPEC, p, X)))[::-1]
        for i in (1, 2, 3):
            U = actions_eigen_oracle(SPEC, p, X, i)
            mi = mutual_information(SPEC, p, X, U)
            ref = 0.5 * (np.sum(np.log(lam[:i])) - i * math.log(p.noise_var))
            dominated = all(mutual_information(SPEC, p, X, actions_random(n, i, int(rng.integers(1 << 31)))) <= mi + 1e-10
                            for _ in range(200))
            out.append((f"n={n} i={i}", abs(mi - ref) <= 1e-10 and dominated, f"MI {mi:.6f} vs {ref:.6f}"))
    return out


def suite_cg_span(rng):
    out = []
    for t in range(3):
        n = int(rng.integers(20, 61))
        X, y, p = random_instance(rng, n, noise=0.5)
        i = 5
        S = actions_cg(SPEC, p, X, y, i, tol=0.0)
        Khat = khat_dense(SPEC, p, X)
        cols = [y.copy()]
        for _ in range(S.i - 1):
            cols.append(Khat @ cols[-1])
        Kry = np.column_stack(cols)
        dist = grassmann_distance(Kry, S.cols)
        Xs = rng.uniform(size=(10, X.shape[1]))
        a = predict_cagp(fit_batch(SPEC, p, X, y, S), Xs)
        b = predict_cagp(fit_batch(SPEC, p, X, y, ActionMatrix.dense_from(Kry)), Xs)
        ok = dist < 1e-6 and close(b[0], a[0], 1e-7, 1e-10) and close(b[1], a[1], 1e-7, 1e-10)
        out.append((f"n={n} i={S.i}", ok, f"grassmann {dist:.2e}"))
    return out


def suite_worst_case(rng):
    out = []
    n = 40
    X, _, p = random_instance(rng, n)
    Khat = khat_dense(SPEC, p, X)
    Xs = rng.uniform(size=(20, X.shape[1]))
    Ks = kernels.gram(SPEC, p, Xs, X)
    for i in (2, 8, 20):
        S = actions_random(n, i, i)
        Sd = S.dense()
        C = Sd @ np.linalg.solve(Sd.T @ Khat @ Sd, Sd.T)
        _, var, pvar = predict_cagp(fit_batch(SPEC, p, X, np.zeros(n), S), Xs)
        worst = 0.0
        ok = True
        for _ in range(100):
            a = rng.standard_normal(n)
            a *= rng.uniform(0, 1) / math.sqrt(a @ Khat @ a)
            err = (Ks @ a - Ks @ C @ (Khat @ a)) ** 2
            worst = max(worst, float(np.max(err / pvar)))
            ok &= bool(np.all(err <= pvar + 1e-8))
        out.append((f"i={i}", ok, f"max err / bound {worst:.3f}"))
    return out


def suite_gradients(rng):
    out = []
    for t in range(3):
        n, d, i = 80, 2, 8
        X, y, p = random_instance(rng, n, d)
        S = actions_sparse_init(n, i, t)
        for kind in ("elbo", "projected_nll"):
            _, g = loss_and_grad(kind, SPEC, p, X, y, S)
            fd = _fd_grad(kind, p, X, y, S)
            ok = close(g.flat(), fd, 1e-4, 1e-7)
            out.append((f"seed {t} {kind}", ok, f"max abs diff {np.max(np.abs(g.flat() - fd)):.2e}"))
    return out


def _fd_grad(kind, p, X, y, S, h=1e-4):
    th = p.to_vector()
    vals = S.trainable()
    res = []
    for k in range(th.size):
        e = np.zeros_like(th)
        e[k] = h
        f = [loss_value(kind, SPEC, HyperParams.from_vector(th + s * e), X, y, S).total for s in (1, -1)]
        res.append((f[0] - f[1]) / (2 * h))
    for k in range(vals.size):
        e = np.zeros_like(vals)
        e[k] = h
        f = [loss_value(kind, SPEC, p, X, y, S.with_values(vals + s * e)).total for s in (1, -1)]
        res.append((f[0] - f[1]) / (2 * h))
    return np.array(res)


SUITES = {
    "exactness": suite_exactness,
    "lemma-s1": suite_projected_observation,
    "prop-s1-monotonicity": suite_monotonicity,
    "lemma-s2-invariance": suite_invariance,
    "elbo-oracle": suite_elbo_oracle,
    "info-policy": suite_info_policy,
    "cg-lanczos-span": suite_cg_span,
    "worst-case-error": suite_worst_case,
    "gradient-check": suite_gradients,
}


def run_suite(name: str, seed: int = 0) -> list:
    """Run one suite (or ``all``); returns a list of CheckResult."""
    names = list(SUITES) if name == "all" else [name]
    results = []
    for nm in names:
        if nm not in SUITES:
            raise KeyError(nm)
        rng = np.random.default_rng(seed)
        for check, ok, detail in SUITES[nm](rng):
            results.append(CheckResult(nm, check, bool(ok), detail))
    return results
