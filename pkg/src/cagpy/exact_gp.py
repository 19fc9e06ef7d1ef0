"""Exact Cholesky-based GP regression.

Used directly for small problems and as the reference every
computation-aware result is checked against.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractViolation, OracleTooLarge
from .kernels import HyperParams, KernelSpec
from .linalg import cho_solve, chol_logdet, jitter_cholesky, tri_solve

log = logging.getLogger(__name__)

EXACT_CAP = 5000
LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ExactPosterior:
    spec: KernelSpec
    params: HyperParams
    X_train: np.ndarray
    chol_Khat: np.ndarray
    representer_weights: np.ndarray
    mean: float = 0.0
    jitter: float = 0.0


def _prepare(spec, params, X, y, cap):
    X = kernels._as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size or y.size < 1:
        raise ContractViolation(f"X has {X.shape[0]} rows but y has {y.size} entries")
    if X.shape[0] > cap:
        raise OracleTooLarge(f"n={X.shape[0]} exceeds the exact-GP cap {cap}")
    return X, y


def khat_dense(spec, params, X):
    K = kernels.gram(spec, params, X)
    K[np.diag_indices_from(K)] += params.noise_var
    return K


def fit_exact(spec: KernelSpec, params: HyperParams, X, y, mean: float = 0.0, cap: int = EXACT_CAP) -> ExactPosterior:
    X, y = _prepare(spec, params, X, y, cap)
    L, jitter = jitter_cholesky(khat_dense(spec, params, X))
    v = cho_solve(L, y - mean)
    return ExactPosterior(spec, params, X, L, v, mean, jitter)


def clamp_variance(var, who="posterior"):
    if np.any(var < -1e-10):
        log.warning("%s variance below zero (min %.3g); clamping", who, float(var.min()))
    return np.maximum(var, 0.0)


def predict_exact(post: ExactPosterior, Xstar):
    """Posterior mean and latent variance at ``Xstar``."""
    Xstar = kernels._as_2d(Xstar, post.X_train.shape[1])
    if Xstar.shape[1] != post.X_train.shape[1]:
        raise ContractViolation(f"test inputs have dimension {Xstar.shape[1]}, expected {post.X_train.shape[1]}")
    Ks = kernels.gram(post.spec, post.params, Xstar, post.X_train)
    mean = post.mean + Ks @ post.representer_weights
    W = tri_solve(post.chol_Khat, Ks.T)
    var = kernels.gram_diag(post.spec, post.params, Xstar) - np.sum(W * W, axis=0)
    return mean, clamp_variance(var, "exact")


def nll_exact(spec: KernelSpec, params: HyperParams, X, y, mean: float = 0.0, cap: int = EXACT_CAP) -> float:
    """Negative log marginal likelihood via Cholesky."""
    post = fit_exact(spec, params, X, y, mean, cap)
    r = np.asarray(y, dtype=float).ravel() - mean
    n = r.size
    return 0.5 * (float(r @ post.representer_weights) + chol_logdet(post.chol_Khat) + n * LOG2PI)


def nll_exact_grad(spec: KernelSpec, params: HyperParams, X, y, mean: float = 0.0, cap: int = EXACT_CAP):
    """NLL and its gradient w.r.t. ``params.to_vector()``."""
    X, y = _prepare(spec, params, X, y, cap)
    K, g, parts = kernels.tile_values(spec, params, X, X, with_grad=True)
    Khat = K.copy()
    Khat[np.diag_indices_from(Khat)] += params.noise_var
    L, _ = jitter_cholesky(Khat)
    r = y - mean
    a = cho_solve(L, r)
    value = 0.5 * (float(r @ a) + chol_logdet(L) + r.size * LOG2PI)
    Q = cho_solve(L, np.eye(r.size)) - np.outer(a, a)
    grads = [np.sum(Q * K)]  # dK/dlog o = 2K, halved
    dl = [0.5 * np.sum(Q * g * p) for p in parts]
    if not spec.ard:
        dl = [sum(dl)]
    grads += dl
    grads.append(np.trace(Q) * params.noise_var)
    return value, np.array(grads, dtype=float)
