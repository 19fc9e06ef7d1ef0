"""Model-selection objectives for computation-aware GPs and their gradients.

Both losses depend on the kernel only through Z = K S (n x i) and the
constant diagonal of K. Gradients are assembled in two stages: an
adjoint pass through the small i x i / n x i algebra yields dL/dZ, and a
tiled pass over kernel blocks pushes dL/dZ onto the lengthscales and the
action entries, so no n x n array is ever held.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .actions import ActionMatrix, check_full_rank, kernel_times_actions
from .errors import ContractViolation, NonFiniteGradient
from .exact_gp import nll_exact, nll_exact_grad
from .kernels import HyperParams, KernelSpec
from .linalg import cho_solve, chol_logdet, symmetrize
from .cagp import factor_projected

LOG2PI = math.log(2.0 * math.pi)

PART_NAMES = ("quadratic_fit", "complexity", "trace_term", "logdet_StKhatS", "logdet_StS", "constant")


class LossKind(str, enum.Enum):
    ELBO = "elbo"
    PROJECTED_NLL = "projected_nll"
    EXACT_NLL = "exact_nll"


@dataclass(frozen=True)
class LossValue:
    """Loss total and its additive parts (``total == sum(parts.values())``).

    ELBO parts:
      quadratic_fit   ||y - mu_i(X)||^2 / (2 sigma^2)
      trace_term      (sum_j k_i(x_j, x_j) / sigma^2 - tr((S'Khat S)^-1 S'K S)) / 2
      complexity      (v~' S'K S v~ + (n - i) log sigma^2) / 2
      logdet_StKhatS  logdet(S'Khat S) / 2
      logdet_StS      -logdet(S'S) / 2
      constant        n log(2 pi) / 2

    Projected NLL uses quadratic_fit = (y - mu)' S (S'Khat S)^-1 S'(y - mu) / 2,
    constant = i log(2 pi) / 2, and zero complexity / trace_term.
    """

    total: float
    parts: dict


@dataclass(frozen=True)
class GradientBundle:
    d_hyper: np.ndarray
    d_actions: np.ndarray | None = None

    def flat(self) -> np.ndarray:
        if self.d_actions is None:
            return self.d_hyper
        return np.r_[self.d_hyper, self.d_actions]


def _value(parts) -> LossValue:
    return LossValue(float(sum(parts.values())), {k: float(parts.get(k, 0.0)) for k in PART_NAMES})


def _prepare(spec, params, X, y, S):
    X = kernels._as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ContractViolation(f"X has {X.shape[0]} rows but y has {y.size} entries")
    if S.n != y.size:
        raise ContractViolation(f"actions have {S.n} rows, expected {y.size}")
    kernels._check_dims(spec, params, X.shape[1])
    return X, y


def _core(kind, S: ActionMatrix, Z, r, s2, o2, need_grad):
    """Loss from (S, Z = K S, r = y - mu) and, optionally, its adjoints.

    Returns (LossValue, adjoints) with adjoints = (dZ, dS, ds2, do2), the
    partial derivatives of the loss holding the other inputs fixed.
    """
    n, i = Z.shape
    Sd = S.dense()
    Gs = S.gram()
    M = symmetrize(Sd.T @ Z)
    A = M + s2 * Gs
    L, _ = factor_projected(A)
    B = cho_solve(L, np.eye(i))
    B = symmetrize(B)
    ytil = Sd.T @ r
    vt = B @ ytil
    logdetA = chol_logdet(L)
    logdetG = S.logdet_gram()

    if kind is LossKind.PROJECTED_NLL:
        parts = {
            "quadratic_fit": 0.5 * float(ytil @ vt),
            "logdet_StKhatS": 0.5 * logdetA,
            "logdet_StS": -0.5 * logdetG,
            "constant": 0.5 * i * LOG2PI,
        }
        if not need_grad:
            return _value(parts), None
        # adjoints of F = 2 * loss
        ytil_bar = 2.0 * vt
        A_bar = B - np.outer(vt, vt)
        Z_bar = np.zeros_like(Z)
        M_bar = np.zeros((i, i))
        s2_bar = 0.0
        o2_bar = 0.0
    else:
        m = Z @ vt
        e = r - m
        P = Z.T @ Z
        trBP = float(np.sum(B * P))
        trBM = float(np.sum(B * M))
        ee = float(e @ e)
        parts = {
            "quadratic_fit": 0.5 * ee / s2,
            "trace_term": 0.5 * ((n * o2 - trBP) / s2 - trBM),
            "complexity": 0.5 * (float(vt @ M @ vt) + (n - i) * math.log(s2)),
            "logdet_StKhatS": 0.5 * logdetA,
            "logdet_StS": -0.5 * logdetG,
            "constant": 0.5 * n * LOG2PI,
        }
        if not need_grad:
            return _value(parts), None
        e_bar = 2.0 * e / s2
        Z_bar = -np.outer(e_bar, vt) - (2.0 / s2) * (Z @ B)
        vt_bar = -(Z.T @ e_bar) + 2.0 * (M @ vt)
        M_bar = np.outer(vt, vt) - B
        BPB = B @ P @ B
        A_bar = BPB / s2 + B @ M @ B + B
        ytil_bar = B @ vt_bar
        A_bar = A_bar - B @ np.outer(vt_bar, vt)
        s2_bar = -(ee + n * o2 - trBP) / s2 ** 2 + (n - i) / s2
        o2_bar = n / s2

    A_bar = symmetrize(A_bar)
    M_bar = symmetrize(M_bar + A_bar)
    s2_bar += float(np.sum(A_bar * Gs))
    G_bar = s2 * A_bar - _gram_inverse(S, Gs)
    Z_bar = Z_bar + Sd @ M_bar
    S_bar = Z @ M_bar + 2.0 * Sd @ symmetrize(G_bar) + np.outer(r, ytil_bar)
    half = 0.5
    return _value(parts), (half * Z_bar, half * S_bar, half * s2_bar, half * o2_bar)


def _gram_inverse(S: ActionMatrix, Gs):
    if S.is_sparse:
        return np.diag(1.0 / np.diag(Gs))
    return np.linalg.inv(Gs)


def _empty_elbo(r, s2, o2, need_grad):
    n = r.size
    rr = float(r @ r)
    parts = {
        "quadratic_fit": 0.5 * rr / s2,
        "trace_term": 0.5 * n * o2 / s2,
        "complexity": 0.5 * n * math.log(s2),
        "constant": 0.5 * n * LOG2PI,
    }
    if not need_grad:
        return _value(parts), None
    return _value(parts), (None, None, 0.5 * (-(rr + n * o2) / s2 ** 2 + n / s2), 0.5 * n / s2)


def _evaluate(kind, spec, params, X, y, S, mean, need_grad, wrt_actions):
    kind = LossKind(kind)
    X, y = _prepare(spec, params, X, y, S)
    r = y - mean
    s2 = params.noise_var
    o2 = params.outputscale ** 2
    if S.is_empty:
        if kind is LossKind.ELBO:
            value, adj = _empty_elbo(r, s2, o2, need_grad)
        else:
            value, adj = _value({}), (None, None, 0.0, 0.0)
        if not need_grad:
            return value, None
        _, _, s2_bar, o2_bar = adj
        d = np.zeros(params.size)
        d[0] = o2_bar * 2.0 * o2
        d[-1] = s2_bar * 2.0 * s2
        return value, GradientBundle(d, np.zeros(0) if wrt_actions else None)
    check_full_rank(S)
    Z = kernel_times_actions(S, spec, params, X)
    value, adj = _core(kind, S, Z, r, s2, o2, need_grad)
    if not need_grad:
        return value, None
    Z_bar, S_bar, s2_bar, o2_bar = adj
    dl, KZ = _kernel_backward(S, spec, params, X, Z_bar, wrt_actions)
    d_hyper = np.r_[2.0 * float(np.sum(Z_bar * Z)) + o2_bar * 2.0 * o2, dl, s2_bar * 2.0 * s2]
    d_actions = None
    if wrt_actions:
        if S.is_sparse:
            owner = np.repeat(np.arange(S.i), np.diff(S.bounds))
            d_actions = KZ + S_bar[np.arange(S.n), owner]
        else:
            d_actions = (KZ + S_bar).ravel()
    bundle = GradientBundle(d_hyper, d_actions)
    _check_finite(bundle.flat())
    return value, bundle


def _kernel_backward(S, spec, params, X, Z_bar, wrt_actions, budget=kernels.TILE_ENTRIES):
    """Push dL/dZ through Z = K S.

    Returns (dL/dlog lengthscales, K Z_bar restricted to S's pattern).
    """
    d = X.shape[1]
    dl = np.zeros(d)
    if S.is_sparse:
        KZ = np.zeros(S.n) if wrt_actions else None
        for j, (supp, s) in enumerate(S.blocks):
            Xc = X[supp.start:supp.stop]
            for rs in kernels.row_chunks(S.n, len(supp), budget):
                K, g, parts = kernels.tile_values(spec, params, X[rs], Xc, with_grad=True)
                zb = Z_bar[rs, j]
                for q, p in enumerate(parts):
                    dl[q] += zb @ ((g * p) @ s)
                if wrt_actions:
                    KZ[supp.start:supp.stop] += zb @ K
    else:
        KZ = np.zeros_like(S.cols) if wrt_actions else None
        for rs, cs in kernels.iter_tiles(S.n, S.n, budget):
            K, g, parts = kernels.tile_values(spec, params, X[rs], X[cs], with_grad=True)
            W = Z_bar[rs] @ S.cols[cs].T
            gW = g * W
            for q, p in enumerate(parts):
                dl[q] += float(np.sum(gW * p))
            if wrt_actions:
                KZ[cs] += K.T @ Z_bar[rs]
    if not spec.ard:
        dl = np.array([dl.sum()])
    return dl, KZ


def _check_finite(vec):
    bad = np.flatnonzero(~np.isfinite(vec))
    if bad.size:
        raise NonFiniteGradient(int(bad[0]), float(vec[bad[0]]))


def loss_projected_nll(spec: KernelSpec, params: HyperParams, X, y, S: ActionMatrix, mean: float = 0.0) -> LossValue:
    return _evaluate(LossKind.PROJECTED_NLL, spec, params, X, y, S, mean, False, False)[0]


def loss_elbo(spec: KernelSpec, params: HyperParams, X, y, S: ActionMatrix, mean: float = 0.0) -> LossValue:
    return _evaluate(LossKind.ELBO, spec, params, X, y, S, mean, False, False)[0]


def loss_and_grad(kind, spec: KernelSpec, params: HyperParams, X, y, S: ActionMatrix | None = None,
                  mean: float = 0.0, wrt_actions: bool | None = None):
    """(LossValue, GradientBundle) for one of the three losses.

    Action gradients are returned for block-sparse actions by default;
    pass ``wrt_actions=True`` to get them for dense actions too.
    """
    kind = LossKind(kind)
    if kind is LossKind.EXACT_NLL:
        value, grad = nll_exact_grad(spec, params, X, y, mean)
        _check_finite(grad)
        return _value({"quadratic_fit": value}), GradientBundle(grad)
    if S is None:
        raise ContractViolation(f"{kind.value} needs an action matrix")
    if wrt_actions is None:
        wrt_actions = S.is_sparse
    return _evaluate(kind, spec, params, X, y, S, mean, True, wrt_actions)


def loss_grad(kind, spec: KernelSpec, params: HyperParams, X, y, S: ActionMatrix | None = None,
              mean: float = 0.0, wrt_actions: bool | None = None) -> GradientBundle:
    return loss_and_grad(kind, spec, params, X, y, S, mean, wrt_actions)[1]


def loss_value(kind, spec: KernelSpec, params: HyperParams, X, y, S: ActionMatrix | None = None,
               mean: float = 0.0) -> LossValue:
    kind = LossKind(kind)
    if kind is LossKind.EXACT_NLL:
        return _value({"quadratic_fit": nll_exact(spec, params, X, y, mean)})
    return _evaluate(kind, spec, params, X, y, S, mean, False, False)[0]
