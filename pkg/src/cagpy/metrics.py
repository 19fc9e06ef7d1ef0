"""Predictive metrics and subspace distances."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg as la
from scipy.special import ndtri

from .errors import ContractViolation, RankDeficient

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class EvalReport:
    test_nll: float
    test_rmse: float
    coverage_error_95: float
    n_test: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check(mean, var, y):
    mean = np.asarray(mean, dtype=float).ravel()
    var = np.asarray(var, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if not (mean.size == var.size == y.size):
        raise ContractViolation(f"length mismatch: {mean.size}, {var.size}, {y.size}")
    if np.any(~(var > 0)):
        raise ContractViolation("predictive variances must be strictly positive")
    return mean, var, y


def coverage_error(mean, predictive_var, y_test, alpha: float = 0.95) -> float:
    """|alpha - fraction of targets inside the central alpha-interval|."""
    if not 0.0 < alpha < 1.0:
        raise ContractViolation(f"alpha must lie in (0, 1), got {alpha}")
    mean, var, y = _check(mean, predictive_var, y_test)
    z = ndtri(0.5 * (1.0 + alpha))
    inside = np.abs(y - mean) <= z * np.sqrt(var)
    return abs(alpha - float(np.mean(inside)))


def eval_predictive(mean, predictive_var, y_test, target_mean: float = 0.0, target_std: float = 1.0,
                    alpha: float = 0.95) -> EvalReport:
    """Mean per-point Gaussian NLL, RMSE and coverage error.

    Inputs in standardized units are mapped back with ``target_mean`` /
    ``target_std`` before scoring.
    """
    mean, var, y = _check(mean, predictive_var, y_test)
    mean = target_mean + target_std * mean
    y = target_mean + target_std * y
    var = var * target_std ** 2
    resid = y - mean
    nll = float(np.mean(0.5 * (LOG2PI + np.log(var) + resid ** 2 / var)))
    rmse = float(np.sqrt(np.mean(resid ** 2)))
    return EvalReport(nll, rmse, coverage_error(mean, var, y, alpha), int(y.size))


def _full_rank(A, name):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    # the span ignores column scale, so judge rank on unit columns
    norms = np.linalg.norm(A, axis=0)
    if A.shape[1] == 0 or np.any(norms == 0):
        raise RankDeficient(f"{name} is rank deficient")
    A = A / norms
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[-1] <= 1e-10 * s[0]:
        raise RankDeficient(f"{name} is rank deficient")
    return A


def grassmann_distance(A, B) -> float:
    """2-norm of the principal angles between span(A) and span(B)."""
    A = _full_rank(A, "A")
    B = _full_rank(B, "B")
    if A.shape[0] != B.shape[0]:
        raise ContractViolation("subspaces live in different ambient dimensions")
    theta = la.subspace_angles(A, B)
    return float(np.linalg.norm(theta))
