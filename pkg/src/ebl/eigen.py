"""Sturm-sequence bisection eigensolver for symmetric tridiagonal matrices.

Used for the bottom of the spectrum of the weighted generalized problem
A phi = tau W phi after the similarity transform B = W^(-1/2) A W^(-1/2).
Eigenvalues come from bisection on the Sturm count (number of negative
pivots of the shifted LDL^T factorization); eigenvectors from inverse
iteration with a Rayleigh-quotient polish.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

from .errors import BisectionBracketFailure

__all__ = ["sturm_counts", "bottom_eigenvalues", "bottom_eigenpairs_sym"]


def sturm_counts(d, e, shifts):
    """Number of eigenvalues of tridiag(d, e) strictly below each shift.

    Vectorized over shifts; the recurrence guards zero pivots by nudging
    them to a tiny negative value, which at worst moves the count by one
    at a shift that bisection never holds onto.
    """
    d = np.asarray(d, dtype=float)
    e = np.asarray(e, dtype=float)
    shifts = np.atleast_1d(np.asarray(shifts, dtype=float))
    q = d[0] - shifts
    q = np.where(q == 0.0, -1e-300, q)
    count = (q < 0.0).astype(np.int64)
    for i in range(1, len(d)):
        q = d[i] - shifts - e[i - 1] ** 2 / q
        q = np.where(q == 0.0, -1e-300, q)
        count += q < 0.0
    return count


def _gershgorin(d, e):
    radius = np.zeros_like(d)
    radius[:-1] += np.abs(e)
    radius[1:] += np.abs(e)
    return float(np.min(d - radius)), float(np.max(d + radius))


def bottom_eigenvalues(d, e, k: int, tol: float | None = None) -> np.ndarray:
    """The k smallest eigenvalues of tridiag(d, e) by batched bisection."""
    d = np.asarray(d, dtype=float)
    e = np.asarray(e, dtype=float)
    n = len(d)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n}, got {k}")
    lo, hi = _gershgorin(d, e)
    scale = max(abs(lo), abs(hi), 1e-300)
    if tol is None:
        tol = 8.0 * np.finfo(float).eps * scale
    if sturm_counts(d, e, np.array([hi + scale * 1e-12]))[0] < k:
        raise BisectionBracketFailure("Gershgorin bound does not capture the spectrum")
    los = np.full(k, lo)
    his = np.full(k, hi)
    targets = np.arange(1, k + 1)
    for _ in range(200):
        width = his - los
        if np.all(width <= tol):
            break
        mids = 0.5 * (los + his)
        counts = sturm_counts(d, e, mids)
        above = counts >= targets  # eigenvalue target lies at or below mid
        his = np.where(above, mids, his)
        los = np.where(above, los, mids)
    return 0.5 * (los + his)


def _apply_tridiag(d, e, x):
    tx = d * x
    tx[:-1] += e * x[1:]
    tx[1:] += e * x[:-1]
    return tx


def _inverse_iteration(d, e, tau, iters: int = 6):
    """Inverse iteration with Rayleigh polish; returns (eigenvalue, vector).

    The bisected tau is only matrix-norm accurate; the Rayleigh quotient of
    the converged vector restores eigenvalue accuracy relative to |tau|,
    which threshold location downstream depends on.
    """
    n = len(d)
    scale = max(np.max(np.abs(d)), np.max(np.abs(e)) if len(e) else 0.0, 1e-300)
    ab = np.zeros((3, n))
    ab[0, 1:] = e
    ab[2, :-1] = e
    rng = np.random.default_rng(12345)
    x = np.ones(n) + 1e-3 * rng.standard_normal(n)
    x /= np.linalg.norm(x)
    shift = tau
    best_x, best_res, best_shift = x, np.inf, tau
    for _ in range(iters):
        ab[1, :] = d - shift
        try:
            y = solve_banded((1, 1), ab, x)
        except np.linalg.LinAlgError:
            shift = shift + 1e-14 * scale
            continue
        norm = np.linalg.norm(y)
        if not np.isfinite(norm) or norm == 0.0:
            shift = shift + 1e-14 * scale
            continue
        x = y / norm
        shift = float(x @ _apply_tridiag(d, e, x))
        res = float(np.linalg.norm(_apply_tridiag(d, e, x) - shift * x))
        if res < best_res:
            best_x, best_res, best_shift = x, res, shift
        if res <= 1e-13 * scale:
            break
    return best_shift, best_x


def bottom_eigenpairs_sym(d, e, k: int):
    """(taus, X) for the k smallest eigenpairs; columns of X are 2-norm unit."""
    taus = bottom_eigenvalues(d, e, k)
    n = len(d)
    X = np.empty((n, k))
    out = np.empty(k)
    for i, tau in enumerate(taus):
        t, x = _inverse_iteration(np.asarray(d, float), np.asarray(e, float), float(tau))
        # re-orthogonalize inside near-degenerate clusters
        for j in range(i):
            if abs(out[j] - t) < 1e-8 * max(1.0, abs(t)):
                x -= (X[:, j] @ x) * X[:, j]
        nrm = np.linalg.norm(x)
        if nrm == 0.0:
            raise BisectionBracketFailure("inverse iteration produced a null vector")
        x /= nrm
        if x[np.argmax(np.abs(x))] < 0:
            x = -x
        X[:, i] = x
        out[i] = t
    order = np.argsort(out)
    return out[order], X[:, order]
