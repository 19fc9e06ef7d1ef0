"""Computation-aware GP posterior, batch and iterative forms.

The batch form projects the data with a fixed action matrix S and needs
only K S (n x i) and the i x i Cholesky factor of S^T Khat S. The
iterative form consumes one action at a time with rank-1 updates of the
precision approximation; with the same actions it yields the same
posterior.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .actions import ActionMatrix, action_products, check_full_rank, kernel_times_actions, orthonormalize
from .errors import ContractViolation, NotPositiveDefinite
from .exact_gp import clamp_variance
from .kernels import HyperParams, KernelSpec
from .linalg import cho_solve, jitter_cholesky, tri_solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CagpState:
    spec: KernelSpec
    params: HyperParams
    X_train: np.ndarray
    S: ActionMatrix
    chol_StKhatS: np.ndarray
    vtilde: np.ndarray
    mean: float = 0.0
    jitter: float = 0.0

    @property
    def i(self) -> int:
        return self.S.i


def _prepare(X, y, S):
    X = kernels._as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ContractViolation(f"X has {X.shape[0]} rows but y has {y.size} entries")
    if S is not None and S.n != y.size:
        raise ContractViolation(f"actions have {S.n} rows, expected {y.size}")
    return X, y


def factor_projected(A):
    """Cholesky of S^T Khat S with jitter scaled by its mean diagonal."""
    try:
        return jitter_cholesky(A)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(
            f"S^T Khat S not positive definite (condition {exc.condition:.3g})",
            jitter=exc.jitter,
            condition=exc.condition,
        ) from exc


def fit_batch(spec: KernelSpec, params: HyperParams, X, y, S: ActionMatrix, mean: float = 0.0) -> CagpState:
    X, y = _prepare(X, y, S)
    if S.is_empty:
        return CagpState(spec, params, X, S, np.zeros((0, 0)), np.zeros(0), mean)
    check_full_rank(S)
    ytilde = S.transpose_times(y - mean)
    A, _, _ = action_products(S, spec, params, X)
    L, jitter = factor_projected(A)
    vtilde = cho_solve(L, ytilde)
    return CagpState(spec, params, X, S, L, vtilde, mean, jitter)


def predict_cagp(state: CagpState, Xstar):
    """Return (mean, latent variance, predictive variance) at ``Xstar``."""
    Xstar = kernels._as_2d(Xstar, state.X_train.shape[1])
    if Xstar.shape[1] != state.X_train.shape[1]:
        raise ContractViolation(f"test inputs have dimension {Xstar.shape[1]}, expected {state.X_train.shape[1]}")
    prior = kernels.gram_diag(state.spec, state.params, Xstar)
    if state.S.is_empty:
        mean = np.full(Xstar.shape[0], state.mean)
        return mean, prior, prior + state.params.noise_var
    KsS = kernel_times_actions(state.S, state.spec, state.params, state.X_train, Xrows=Xstar)
    mean = state.mean + KsS @ state.vtilde
    W = tri_solve(state.chol_StKhatS, KsS.T)
    var = clamp_variance(prior - np.sum(W * W, axis=0), "CaGP")
    return mean, var, var + state.params.noise_var


# -- iterative form ---------------------------------------------------------


@dataclass
class IterState:
    """Running state of the iterative solver.

    ``C`` is kept as the factor pair (D, eta) with C = D diag(1/eta) D^T.
    """

    v: np.ndarray
    directions: list = field(default_factory=list)
    etas: list = field(default_factory=list)
    residual: np.ndarray | None = None
    actions: list = field(default_factory=list)

    @property
    def i(self) -> int:
        return len(self.etas)

    def C_times(self, z):
        if not self.etas:
            return np.zeros_like(z)
        D = np.column_stack(self.directions)
        return D @ ((D.T @ z) / np.asarray(self.etas))

    def C_dense(self) -> np.ndarray:
        n = self.v.size
        if not self.etas:
            return np.zeros((n, n))
        D = np.column_stack(self.directions)
        return (D / np.asarray(self.etas)) @ D.T


@dataclass(frozen=True)
class IterPosterior:
    spec: KernelSpec
    params: HyperParams
    X_train: np.ndarray
    state: IterState
    mean: float = 0.0

    def predict(self, Xstar):
        Xstar = kernels._as_2d(Xstar, self.X_train.shape[1])
        prior = kernels.gram_diag(self.spec, self.params, Xstar)
        m = self.mean + kernels.gram_matmul(self.spec, self.params, Xstar, self.state.v, self.X_train)
        if self.state.etas:
            D = np.column_stack(self.state.directions)
            KD = kernels.gram_matmul(self.spec, self.params, Xstar, D, self.X_train)
            var = prior - np.sum(KD * KD / np.asarray(self.state.etas), axis=1)
        else:
            var = prior
        var = clamp_variance(var, "CaGP")
        return m, var, var + self.params.noise_var

    def actions(self) -> ActionMatrix:
        n = self.X_train.shape[0]
        if not self.state.actions:
            return ActionMatrix.empty(n)
        return ActionMatrix.dense_from(np.column_stack(self.state.actions))


Policy = Callable[[int, np.ndarray, IterState], "np.ndarray | None"]


def residual_policy() -> Policy:
    """s_i = r_{i-1}: the conjugate-gradient / residual policy."""
    return lambda step, r, state: r.copy()


def fixed_policy(S: ActionMatrix) -> Policy:
    """Replay the columns of a given action matrix; stop when exhausted."""
    Sd = S.dense()

    def policy(step, r, state):
        return Sd[:, step].copy() if step < Sd.shape[1] else None

    return policy


def fit_iterative(spec: KernelSpec, params: HyperParams, X, y, policy: Policy, max_i: int,
                  tol: float = 0.0, mean: float = 0.0):
    """Iterative CaGP with zero initial precision approximation."""
    X, y = _prepare(X, y, None)
    b = y - mean
    bnorm = float(np.linalg.norm(b))
    nv = params.noise_var

    def khat(v):
        return kernels.gram_matmul(spec, params, X, v) + nv * v

    st = IterState(v=np.zeros_like(b))
    step = 0
    while st.i < max_i:
        r = b - khat(st.v)
        st.residual = r
        if bnorm == 0.0 or np.linalg.norm(r) / bnorm < tol:
            break
        s = policy(step, r, st)
        step += 1
        if s is None:
            break
        alpha = float(s @ r)
        z = khat(s)
        d = s - st.C_times(z)
        eta = float(z @ d)
        if eta <= 1e-14 * np.linalg.norm(z) * np.linalg.norm(d):
            log.warning("skipping degenerate action at step %d (eta=%.3g)", step, eta)
            continue
        st.directions.append(d)
        st.etas.append(eta)
        st.actions.append(s)
        st.v = st.v + (alpha / eta) * d
    else:
        st.residual = b - khat(st.v)
    return st, IterPosterior(spec, params, X, st, mean)


# -- projected-observation oracle ---------------------------------------------


@dataclass(frozen=True)
class ProjectedObservationPosterior:
    """Exact GP conditioned on S'^T y under y~ | f ~ N(S'^T f(X), sigma^2 I)."""

    spec: KernelSpec
    params: HyperParams
    X_train: np.ndarray
    S_orth: np.ndarray
    weights: np.ndarray
    cov_chol: np.ndarray
    mean: float

    def predict(self, Xstar):
        Xstar = kernels._as_2d(Xstar, self.X_train.shape[1])
        Kx = kernels.gram(self.spec, self.params, Xstar, self.X_train)
        B = Kx @ self.S_orth
        m = self.mean + B @ self.weights
        W = tri_solve(self.cov_chol, B.T)
        var = kernels.gram_diag(self.spec, self.params, Xstar) - np.sum(W * W, axis=0)
        return m, var, var + self.params.noise_var


def fit_via_projected_observation(spec: KernelSpec, params: HyperParams, X, y, S: ActionMatrix,
                                  mean: float = 0.0) -> ProjectedObservationPosterior:
    """Dense reference posterior (test oracle; forms the full Gram matrix)."""
    X, y = _prepare(X, y, S)
    So = orthonormalize(S).cols
    ytilde = So.T @ y
    K = kernels.gram(spec, params, X)
    cov = So.T @ K @ So + params.noise_var * np.eye(So.shape[1])
    L = np.linalg.cholesky(0.5 * (cov + cov.T))
    w = cho_solve(L, ytilde - So.T @ np.full(y.size, mean))
    return ProjectedObservationPosterior(spec, params, X, So, w, L, mean)


# -- persistence --------------------------------------------------------------

FORMAT_VERSION = 1


def save_state(state: CagpState, fh) -> None:
    """Write a posterior snapshot as an ``.npz`` container to an open file."""
    header = {
        "format": "cagpy-posterior",
        "version": FORMAT_VERSION,
        "kernel": {"family": state.spec.family.value, "ard": state.spec.ard},
        "params": state.params.to_dict(),
        "mean": state.mean,
        "jitter": state.jitter,
        "layout": state.S.layout,
        "n": state.S.n,
        "i": state.S.i,
    }
    arrays = {"X_train": state.X_train, "chol": state.chol_StKhatS, "vtilde": state.vtilde}
    if state.S.is_sparse:
        arrays.update(bounds=state.S.bounds, values=state.S.values)
    else:
        arrays.update(cols=state.S.cols)
    np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_state(fh) -> CagpState:
    with np.load(fh, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "cagpy-posterior":
            raise ValueError("not a cagpy posterior container")
        if header["layout"] == "block_sparse":
            S = ActionMatrix(header["n"], bounds=z["bounds"], values=z["values"])
        else:
            S = ActionMatrix(header["n"], cols=z["cols"].reshape(header["n"], header["i"]))
        spec = KernelSpec(header["kernel"]["family"], header["kernel"]["ard"])
        return CagpState(spec, HyperParams.from_dict(header["params"]), z["X_train"], S,
                         z["chol"], z["vtilde"], header["mean"], header["jitter"])
