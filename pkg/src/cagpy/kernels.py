"""Stationary kernels, log-space hyperparameters and tiled Gram evaluation.

Nothing here needs the full n x n Gram matrix; `gram_matmul` and
`iter_tiles` walk the matrix in bounded tiles so callers can keep
memory at O(n * i).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

__all__ = [
    "Family",
    "KernelSpec",
    "HyperParams",
    "kernel_eval",
    "kernel_eval_grad",
    "gram",
    "gram_block",
    "gram_diag",
    "gram_matmul",
    "iter_tiles",
    "TILE_ENTRIES",
]

SQRT3 = math.sqrt(3.0)

# Upper bound on entries in one kernel tile (2 MiB of float64).
TILE_ENTRIES = 1 << 18


class Family(str, enum.Enum):
    MATERN32 = "matern32"
    SQUARED_EXPONENTIAL = "se"


@dataclass(frozen=True)
class KernelSpec:
    family: Family = Family.MATERN32
    ard: bool = True

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))

    def n_lengthscales(self, d: int) -> int:
        return d if self.ard else 1


@dataclass(frozen=True)
class HyperParams:
    """Outputscale o, lengthscales l and noise scale sigma, stored as logs."""

    log_outputscale: float
    log_lengthscales: np.ndarray
    log_noise: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_outputscale", float(self.log_outputscale))
        object.__setattr__(self, "log_noise", float(self.log_noise))
        vals = np.r_[self.log_outputscale, ls, self.log_noise]
        with np.errstate(over="ignore", under="ignore"):
            ev = np.exp(vals)
        if not np.all(np.isfinite(ev)) or np.any(ev <= 0):
            raise ContractViolation(f"hyperparameters must exponentiate to positive finite values: {vals}")

    @classmethod
    def default(cls, d: int, noise: float = 0.1) -> "HyperParams":
        return cls(0.0, np.zeros(d), math.log(noise))

    @classmethod
    def from_natural(cls, outputscale, lengthscales, noise) -> "HyperParams":
        return cls(math.log(outputscale), np.log(np.atleast_1d(lengthscales).astype(float)), math.log(noise))

    @property
    def outputscale(self) -> float:
        return math.exp(self.log_outputscale)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def noise(self) -> float:
        return math.exp(self.log_noise)

    @property
    def noise_var(self) -> float:
        return math.exp(2.0 * self.log_noise)

    @property
    def size(self) -> int:
        return self.log_lengthscales.size + 2

    def to_vector(self) -> np.ndarray:
        """Flatten to ``[log o, log l_1..l_d, log sigma]``."""
        return np.r_[self.log_outputscale, self.log_lengthscales, self.log_noise]

    @classmethod
    def from_vector(cls, vec) -> "HyperParams":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[0], vec[1:-1], vec[-1])

    def to_dict(self) -> dict:
        return {
            "log_outputscale": self.log_outputscale,
            "log_lengthscales": self.log_lengthscales.tolist(),
            "log_noise": self.log_noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(d["log_outputscale"], d["log_lengthscales"], d["log_noise"])


def _check_dims(spec: KernelSpec, params: HyperParams, d: int):
    if params.log_lengthscales.size != spec.n_lengthscales(d):
        raise ContractViolation(
            f"expected {spec.n_lengthscales(d)} lengthscales for input dimension {d}, "
            f"got {params.log_lengthscales.size}"
        )


def _as_2d(X, d=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if d == 1 or d is None else X[None, :]
    if X.ndim != 2:
        raise ContractViolation(f"expected a matrix of inputs, got shape {X.shape}")
    return X


def _scaled_sq_parts(spec, params, A, B):
    """Per-dimension squared scaled differences, shape (d', len(A), len(B))."""
    ls = params.lengthscales
    if not spec.ard:
        ls = np.full(A.shape[1], ls[0])
    a = A / ls
    b = B / ls
    return [(a[:, j, None] - b[None, :, j]) ** 2 for j in range(A.shape[1])]


def _from_sq(spec, o2, sq):
    if spec.family is Family.MATERN32:
        sr = SQRT3 * np.sqrt(sq)
        return o2 * (1.0 + sr) * np.exp(-sr)
    return o2 * np.exp(-0.5 * sq)


def _grad_factor(spec, o2, sq):
    """g(r) such that dK/dlog l_j = g(r) * (delta_j / l_j)^2."""
    if spec.family is Family.MATERN32:
        return 3.0 * o2 * np.exp(-SQRT3 * np.sqrt(sq))
    return o2 * np.exp(-0.5 * sq)


def tile_values(spec, params, A, B, with_grad=False):
    """Kernel tile K(A, B); with ``with_grad`` also (g(r), per-dim sq parts)."""
    parts = _scaled_sq_parts(spec, params, A, B)
    sq = parts[0].copy() if parts else np.zeros((len(A), len(B)))
    for p in parts[1:]:
        sq += p
    o2 = params.outputscale ** 2
    K = _from_sq(spec, o2, sq)
    if not with_grad:
        return K
    return K, _grad_factor(spec, o2, sq), parts


def kernel_eval(spec: KernelSpec, params: HyperParams, x, x2) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.ndim != 1:
        raise ContractViolation(f"input shapes differ: {x.shape} vs {x2.shape}")
    _check_dims(spec, params, x.size)
    return float(tile_values(spec, params, x[None, :], x2[None, :])[0, 0])


def kernel_eval_grad(spec: KernelSpec, params: HyperParams, x, x2) -> np.ndarray:
    """Gradient of `kernel_eval` w.r.t. ``params.to_vector()``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    _check_dims(spec, params, x.size)
    K, g, parts = tile_values(spec, params, x[None, :], x2[None, :], with_grad=True)
    dl = np.array([float(g[0, 0] * p[0, 0]) for p in parts])
    if not spec.ard:
        dl = np.array([dl.sum()])
    return np.r_[2.0 * K[0, 0], dl, 0.0]


def gram(spec: KernelSpec, params: HyperParams, X, X2=None) -> np.ndarray:
    X = _as_2d(X)
    X2 = X if X2 is None else _as_2d(X2, X.shape[1])
    if X.shape[1] != X2.shape[1]:
        raise ContractViolation(f"column counts differ: {X.shape[1]} vs {X2.shape[1]}")
    _check_dims(spec, params, X.shape[1])
    return tile_values(spec, params, X, X2)


def _as_range(r, n, name):
    if isinstance(r, slice):
        r = range(*r.indices(n))
    elif isinstance(r, tuple):
        r = range(*r)
    if not isinstance(r, range):
        raise ContractViolation(f"{name} must be a range, slice or (start, stop) tuple")
    if len(r) and (min(r[0], r[-1]) < 0 or max(r[0], r[-1]) >= n):
        raise ContractViolation(f"{name} {r} out of bounds for n={n}")
    return r


def gram_block(spec: KernelSpec, params: HyperParams, X, rows, cols) -> np.ndarray:
    """Submatrix ``gram(X, X)[rows, cols]`` evaluated without the full matrix."""
    X = _as_2d(X)
    n = X.shape[0]
    rows = _as_range(rows, n, "row range")
    cols = _as_range(cols, n, "column range")
    _check_dims(spec, params, X.shape[1])
    return tile_values(spec, params, X[rows.start:rows.stop:rows.step], X[cols.start:cols.stop:cols.step])


def gram_diag(spec: KernelSpec, params: HyperParams, X) -> np.ndarray:
    X = _as_2d(X)
    return np.full(X.shape[0], params.outputscale ** 2)


def iter_tiles(n_rows: int, n_cols: int, budget: int = TILE_ENTRIES):
    """Yield (row slice, col slice) pairs covering an n_rows x n_cols grid."""
    cols = max(1, min(n_cols, budget))
    rows = max(1, budget // cols)
    for c0 in range(0, n_cols, cols):
        for r0 in range(0, n_rows, rows):
            yield slice(r0, min(r0 + rows, n_rows)), slice(c0, min(c0 + cols, n_cols))


def row_chunks(n_rows: int, width: int, budget: int = TILE_ENTRIES):
    rows = max(1, budget // max(width, 1))
    for r0 in range(0, n_rows, rows):
        yield slice(r0, min(r0 + rows, n_rows))


def gram_matmul(spec: KernelSpec, params: HyperParams, X, V, X2=None, budget: int = TILE_ENTRIES) -> np.ndarray:
    """``gram(X, X2) @ V`` computed tile by tile."""
    X = _as_2d(X)
    X2 = X if X2 is None else _as_2d(X2, X.shape[1])
    _check_dims(spec, params, X.shape[1])
    V = np.asarray(V, dtype=float)
    vec = V.ndim == 1
    V2 = V[:, None] if vec else V
    if V2.shape[0] != X2.shape[0]:
        raise ContractViolation(f"V has {V2.shape[0]} rows, expected {X2.shape[0]}")
    out = np.zeros((X.shape[0], V2.shape[1]))
    for rs, cs in iter_tiles(X.shape[0], X2.shape[0], budget):
        out[rs] += tile_values(spec, params, X[rs], X2[cs]) @ V2[cs]
    return out[:, 0] if vec else out
