"""Action matrices: the linear projections of the data that CaGP conditions on.

Two layouts exist. Dense actions are an explicit n x i array. Block-sparse
actions split the rows into i contiguous supports (the last one absorbing
the remainder of n / i) and hold one value vector per support, so the
trainable parameter count is exactly n.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ContractViolation, OracleTooLarge, RankDeficient
from .exact_gp import khat_dense
from .kernels import HyperParams, KernelSpec
from .linalg import chol_logdet, jitter_cholesky, symmetrize, tri_solve

log = logging.getLogger(__name__)

EIGEN_ORACLE_CAP = 2000
RANK_TOL = 1e-10


def block_bounds(n: int, i: int) -> np.ndarray:
    """Support boundaries for i contiguous blocks over n rows."""
    if i < 1 or i > n:
        raise ContractViolation(f"need 1 <= i <= n, got i={i}, n={n}")
    k = n // i
    bounds = np.arange(i + 1) * k
    bounds[-1] = n
    return bounds


@dataclass(frozen=True)
class ActionMatrix:
    """An n x i action matrix in either dense or block-sparse layout.

    Dense: ``cols`` holds the n x i array. Block-sparse: ``bounds`` holds
    the i + 1 support boundaries and ``values`` the n concatenated block
    entries (block j lives in ``values[bounds[j]:bounds[j+1]]``).
    """

    n: int
    cols: np.ndarray | None = None
    bounds: np.ndarray | None = None
    values: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if (self.cols is None) == (self.values is None):
            raise ContractViolation("exactly one of cols / values must be given")
        if self.cols is not None:
            cols = np.asarray(self.cols, dtype=float)
            if cols.ndim != 2 or cols.shape[0] != self.n:
                raise ContractViolation(f"dense actions must be {self.n} x i, got {cols.shape}")
            object.__setattr__(self, "cols", cols)
        else:
            values = np.asarray(self.values, dtype=float).ravel()
            bounds = np.asarray(self.bounds, dtype=np.int64)
            if values.size != self.n or bounds[0] != 0 or bounds[-1] != self.n or np.any(np.diff(bounds) < 1):
                raise ContractViolation("block supports must partition [0, n) into non-empty ranges")
            object.__setattr__(self, "values", values)
            object.__setattr__(self, "bounds", bounds)

    @classmethod
    def dense_from(cls, cols, **meta) -> "ActionMatrix":
        cols = np.asarray(cols, dtype=float)
        if cols.ndim == 1:
            cols = cols[:, None]
        return cls(cols.shape[0], cols=cols, meta=meta)

    @classmethod
    def block_sparse(cls, values, i: int, **meta) -> "ActionMatrix":
        values = np.asarray(values, dtype=float).ravel()
        return cls(values.size, bounds=block_bounds(values.size, i), values=values, meta=meta)

    @classmethod
    def empty(cls, n: int, **meta) -> "ActionMatrix":
        return cls(n, cols=np.zeros((n, 0)), meta=meta)

    @property
    def is_sparse(self) -> bool:
        return self.values is not None

    @property
    def layout(self) -> str:
        return "block_sparse" if self.is_sparse else "dense"

    @property
    def i(self) -> int:
        return self.bounds.size - 1 if self.is_sparse else self.cols.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.i == 0

    @property
    def nnz(self) -> int:
        return self.n if self.is_sparse else int(np.count_nonzero(self.cols))

    @property
    def blocks(self):
        """List of (support range, block values)."""
        if not self.is_sparse:
            raise ContractViolation("dense actions have no block structure")
        b = self.bounds
        return [(range(b[j], b[j + 1]), self.values[b[j]:b[j + 1]]) for j in range(self.i)]

    def dense(self) -> np.ndarray:
        if not self.is_sparse:
            return self.cols
        S = np.zeros((self.n, self.i))
        for j, (supp, v) in enumerate(self.blocks):
            S[supp.start:supp.stop, j] = v
        return S

    def scaled(self, t: float) -> "ActionMatrix":
        if self.is_sparse:
            return replace(self, values=self.values * t)
        return replace(self, cols=self.cols * t)

    def with_values(self, values) -> "ActionMatrix":
        """Same sparsity pattern, new trainable entries."""
        if self.is_sparse:
            return replace(self, values=np.asarray(values, dtype=float).copy())
        return replace(self, cols=np.asarray(values, dtype=float).reshape(self.cols.shape).copy())

    def trainable(self) -> np.ndarray:
        return self.values if self.is_sparse else self.cols.ravel()

    def prefix(self, j: int) -> "ActionMatrix":
        """First j columns as dense actions."""
        return ActionMatrix.dense_from(self.dense()[:, :j])

    def transpose_times(self, v) -> np.ndarray:
        """S^T v for a vector or matrix v with n rows."""
        if not self.is_sparse:
            return self.cols.T @ v
        out = np.empty((self.i,) + np.shape(v)[1:])
        for j, (supp, s) in enumerate(self.blocks):
            out[j] = s @ v[supp.start:supp.stop]
        return out

    def gram(self) -> np.ndarray:
        """S^T S."""
        if self.is_sparse:
            return np.diag([s @ s for _, s in self.blocks])
        return self.cols.T @ self.cols

    def logdet_gram(self) -> float:
        if self.is_sparse:
            return float(sum(math.log(s @ s) for _, s in self.blocks))
        L, _ = jitter_cholesky(self.gram(), ladder=(0.0,))
        return chol_logdet(L)

    def to_dict(self) -> dict:
        if self.is_sparse:
            return {"layout": "block_sparse", "n": self.n, "bounds": self.bounds.tolist(), "values": self.values.tolist()}
        return {"layout": "dense", "n": self.n, "i": self.i, "cols": self.cols.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionMatrix":
        if d["layout"] == "block_sparse":
            return cls(d["n"], bounds=np.array(d["bounds"]), values=np.array(d["values"]))
        cols = np.array(d["cols"], dtype=float).reshape(d["n"], d["i"])
        return cls(d["n"], cols=cols)


def numerical_rank(A, tol=RANK_TOL) -> int:
    """Rank of A after scaling its columns to unit norm (rank is scale-free)."""
    if A.shape[1] == 0:
        return 0
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        return int(np.sum(norms > 0) and numerical_rank(A[:, norms > 0], tol))
    s = np.linalg.svd(A / norms, compute_uv=False)
    return int(np.sum(s > tol * s[0])) if s[0] > 0 else 0


def check_full_rank(S: ActionMatrix):
    if S.is_sparse:
        if any(not np.any(v) for _, v in S.blocks):
            raise RankDeficient("block-sparse actions contain an all-zero block")
        return
    r = numerical_rank(S.cols)
    if r < S.i:
        raise RankDeficient(f"actions have numerical rank {r} < {S.i}")


# Below this many Gram entries the CG iteration caches Khat densely.
CG_CACHE_ENTRIES = 1 << 22


def _khat_matvec(spec, params, X):
    if X.shape[0] ** 2 <= CG_CACHE_ENTRIES:
        Khat = khat_dense(spec, params, X)
        return lambda v: Khat @ v

    def mv(v):
        return kernels.gram_matmul(spec, params, X, v) + params.noise_var * v
    return mv


def actions_cg(spec: KernelSpec, params: HyperParams, X, y, budget_i: int, tol: float = 1e-4,
               mean: float = 0.0, reorthogonalize: bool = True) -> ActionMatrix:
    """CG residuals r_0, ..., r_{i-1} from solving Khat v = y - mean.

    Stops early once ||r|| / ||y - mean|| < tol. An already-solved system
    (zero right-hand side) gives empty actions with ``meta['empty']`` set.
    With ``reorthogonalize`` each new residual is projected off the earlier
    ones, which is a no-op in exact arithmetic but keeps the columns
    independent when Khat is badly conditioned.
    """
    if budget_i < 1:
        raise ContractViolation("budget_i must be at least 1")
    X = kernels._as_2d(X)
    b = np.asarray(y, dtype=float).ravel() - mean
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return ActionMatrix.empty(b.size, empty=True, realized_i=0)
    mv = _khat_matvec(spec, params, X)
    cols = []
    v = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    while len(cols) < budget_i:
        if math.sqrt(rr) / bnorm < tol:
            break
        cols.append(r.copy())
        if len(cols) == budget_i:
            break
        Ap = mv(p)
        alpha = rr / float(p @ Ap)
        v += alpha * p
        r = r - alpha * Ap
        if reorthogonalize:
            Q = np.column_stack(cols)
            Q = Q / np.linalg.norm(Q, axis=0)
            for _ in range(2):
                r = r - Q @ (Q.T @ r)
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    if not cols:
        return ActionMatrix.empty(b.size, empty=True, realized_i=0)
    return ActionMatrix.dense_from(np.column_stack(cols), realized_i=len(cols), solution=v)


def actions_eigen_oracle(spec: KernelSpec, params: HyperParams, X, budget_i: int,
                         cap: int = EIGEN_ORACLE_CAP) -> ActionMatrix:
    """Top-i eigenvectors of Khat, eigenvalues descending, sign-normalized."""
    X = kernels._as_2d(X)
    n = X.shape[0]
    if n > cap:
        raise OracleTooLarge(f"n={n} exceeds the eigen-oracle cap {cap}")
    if not 1 <= budget_i <= n:
        raise ContractViolation(f"need 1 <= i <= n, got {budget_i}")
    return _top_eigvecs(khat_dense(spec, params, X), budget_i)


def _top_eigvecs(A, i):
    w, V = np.linalg.eigh(A)
    order = np.argsort(-w, kind="stable")[:i]
    U = V[:, order]
    idx = np.argmax(np.abs(U), axis=0)
    U = U * np.sign(U[idx, np.arange(i)])
    return ActionMatrix.dense_from(U, eigenvalues=w[order])


def actions_random(n: int, i: int, seed: int) -> ActionMatrix:
    if not 1 <= i <= n:
        raise ContractViolation(f"need 1 <= i <= n, got i={i}, n={n}")
    rng = np.random.default_rng(seed)
    for _ in range(2):
        S = rng.standard_normal((n, i))
        if numerical_rank(S) == i:
            return ActionMatrix.dense_from(S)
    raise RankDeficient("random actions rank-deficient twice in a row")


def actions_sparse_init(n: int, i: int, seed: int) -> ActionMatrix:
    """Block-sparse actions with N(0, 1/k) entries, k the block length."""
    bounds = block_bounds(n, i)
    rng = np.random.default_rng(seed)
    values = rng.standard_normal(n)
    for j in range(i):
        values[bounds[j]:bounds[j + 1]] /= math.sqrt(bounds[j + 1] - bounds[j])
    return ActionMatrix(n, bounds=bounds, values=values)


def kernel_times_actions(S: ActionMatrix, spec: KernelSpec, params: HyperParams, X, Xrows=None,
                         budget: int = kernels.TILE_ENTRIES) -> np.ndarray:
    """K(Xrows, X) @ S, tiled; Xrows defaults to X."""
    X = kernels._as_2d(X)
    Xrows = X if Xrows is None else kernels._as_2d(Xrows, X.shape[1])
    if S.n != X.shape[0]:
        raise ContractViolation(f"actions have {S.n} rows, data has {X.shape[0]}")
    if not S.is_sparse:
        return kernels.gram_matmul(spec, params, Xrows, S.cols, X, budget)
    out = np.empty((Xrows.shape[0], S.i))
    for j, (supp, s) in enumerate(S.blocks):
        Xc = X[supp.start:supp.stop]
        for rs in kernels.row_chunks(Xrows.shape[0], len(supp), budget):
            out[rs, j] = kernels.tile_values(spec, params, Xrows[rs], Xc) @ s
    return out


def action_products(S: ActionMatrix, spec: KernelSpec, params: HyperParams, X):
    """Return ``(S^T Khat S, K S, S^T S)`` without forming K."""
    if S.n != kernels._as_2d(X).shape[0]:
        raise ContractViolation(f"actions have {S.n} rows, data has {kernels._as_2d(X).shape[0]}")
    KS = kernel_times_actions(S, spec, params, X)
    StS = S.gram()
    StKhatS = symmetrize(S.transpose_times(KS) + params.noise_var * StS)
    return StKhatS, KS, StS


def orthonormalize(S: ActionMatrix) -> ActionMatrix:
    """S chol(S^T S)^{-T}: orthonormal columns with the same span."""
    check_full_rank(S)
    Sd = S.dense()
    try:
        L, _ = jitter_cholesky(S.gram(), ladder=(0.0,))
    except ArithmeticError as exc:
        raise RankDeficient(str(exc)) from exc
    return ActionMatrix.dense_from(tri_solve(L, Sd.T).T)


def mutual_information(spec: KernelSpec, params: HyperParams, X, S: ActionMatrix) -> float:
    """I(f(X); S^T y) = (logdet S^T Khat S - logdet S^T S - i log sigma^2) / 2."""
    A, _, _ = action_products(S, spec, params, X)
    L, _ = jitter_cholesky(A, ladder=(0.0,))
    return 0.5 * (chol_logdet(L) - S.logdet_gram() - S.i * math.log(params.noise_var))
