"""Cholesky with a jitter ladder and a few triangular helpers."""

from __future__ import annotations

import numpy as np
import scipy.linalg as la

from .errors import NotPositiveDefinite

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


def jitter_cholesky(A, ladder=JITTER_LADDER):
    """Lower Cholesky factor of symmetric ``A``, escalating diagonal jitter.

    Jitter is ``delta * mean(diag(A))`` for each delta of the ladder.
    Returns ``(L, jitter)``; raises NotPositiveDefinite after the last rung.
    """
    A = np.asarray(A, dtype=float)
    scale = float(np.mean(np.diag(A))) if A.size else 0.0
    jitter = 0.0
    for delta in ladder:
        jitter = delta * scale
        try:
            L = la.cholesky(A + jitter * np.eye(A.shape[0]) if jitter else A, lower=True)
        except la.LinAlgError:
            continue
        if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
            return L, jitter
    try:
        cond = float(np.linalg.cond(A))
    except np.linalg.LinAlgError:
        cond = float("inf")
    raise NotPositiveDefinite(
        f"Cholesky failed after jitter {jitter:.3g} (condition number {cond:.3g})",
        jitter=jitter,
        condition=cond,
    )


def cho_solve(L, b):
    return la.cho_solve((L, True), b, check_finite=False)


def tri_solve(L, b, trans=False):
    return la.solve_triangular(L, b, lower=True, trans=1 if trans else 0, check_finite=False)


def chol_logdet(L) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def symmetrize(A):
    return 0.5 * (A + A.T)
