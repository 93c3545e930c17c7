"""P-spline and sandwich smoothers with explicit smoother matrices.

Both smoothers use a cubic B-spline basis with a second-order difference
penalty.  The smoothing parameter is chosen by GCV on a fixed log-spaced
grid; the smoother matrix is returned so that variances can be pushed
through it (``S V S^T``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy.interpolate import BSpline

from .basis import check_grid, difference_penalty
from .errors import DimensionMismatch, TooFewPoints

LAMBDA_GRID = np.logspace(-8, 8, 51)
PENALTY_ORDER = 2
DEGREE = 3


@dataclass(frozen=True)
class SmootherMatrix:
    S: np.ndarray
    lam: float
    n_knots: int
    edf: float

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.S, dtype=dtype)


def pspline_basis(grid: np.ndarray, n_knots: int) -> np.ndarray:
    """Cubic B-splines on equally spaced knots extended past both ends of ``grid``.

    Unlike a clamped basis, coefficients of a linear function are linear in
    their index, so the second-difference penalty leaves lines unchanged.
    """
    a, b = grid[0], grid[-1]
    h = (b - a) / (n_knots + 1)
    knots = a + h * np.arange(-DEGREE, n_knots + DEGREE + 2)
    knots[DEGREE], knots[-DEGREE - 1] = a, b
    return BSpline.design_matrix(np.clip(grid, a, b), knots, DEGREE, extrapolate=False).toarray()


class _Spectral:
    """Demmler-Reinsch form ``S(lam) = F diag(1 / (1 + lam d)) F^T``."""

    def __init__(self, grid: np.ndarray, n_knots: int):
        n = grid.size
        if n < n_knots + DEGREE + 1:
            raise TooFewPoints(f"{n} grid points cannot support {n_knots} interior knots")
        B = pspline_basis(grid, n_knots)
        P = difference_penalty(PENALTY_ORDER, B.shape[1]).values
        Q, R = np.linalg.qr(B)
        Rinv = np.linalg.inv(R)
        d, U = np.linalg.eigh(Rinv.T @ P @ Rinv)
        d[:PENALTY_ORDER] = 0.0  # polynomials of degree < order are unpenalized
        self.d = np.maximum(d, 0.0)
        self.F = Q @ U
        self.n = n

    def shrink(self, lam: float) -> np.ndarray:
        return 1.0 / (1.0 + lam * self.d)

    def matrix(self, lam: float) -> np.ndarray:
        return (self.F * self.shrink(lam)) @ self.F.T

    def gcv(self, Y: np.ndarray, lams: np.ndarray) -> np.ndarray:
        """Pooled GCV score over the columns of ``Y`` for each candidate lambda."""
        coef = self.F.T @ Y
        total = np.sum(Y * Y)
        proj = np.sum(coef * coef)
        c2 = np.sum(coef * coef, axis=1)
        scores = np.empty(lams.size)
        for k, lam in enumerate(lams):
            damp = lam * self.d / (1.0 + lam * self.d)
            rss = total - proj + np.sum(damp**2 * c2)
            edf = np.sum(1.0 / (1.0 + lam * self.d))
            scores[k] = rss / (1.0 - edf / self.n) ** 2
        return scores


def psmooth_matrix(grid, n_knots: int, Y=None, lam: float | None = None) -> SmootherMatrix:
    """Smoother matrix over ``grid``; ``lam=None`` selects lambda by pooled GCV on ``Y``."""
    grid = check_grid(grid)
    sp = _Spectral(grid, n_knots)
    if lam is None:
        if Y is None:
            raise ValueError("need data to select lambda")
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[0] != grid.size:
            raise DimensionMismatch(f"data has {Y.shape[0]} rows, grid has {grid.size} points")
        lam = float(LAMBDA_GRID[np.argmin(sp.gcv(Y, LAMBDA_GRID))])
    S = sp.matrix(lam)
    return SmootherMatrix(S, float(lam), n_knots, float(np.sum(sp.shrink(lam))))


def psmooth(values, grid, n_knots: int = 8, lam: float | None = None):
    """GCV P-spline smooth of one curve. Returns ``(smoothed, SmootherMatrix)``."""
    values = np.asarray(values, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if values.shape != grid.shape:
        raise DimensionMismatch("values and grid lengths differ")
    sm = psmooth_matrix(grid, n_knots, values, lam)
    return sm.S @ values, sm


def _joint_gcv(G: np.ndarray, sp_u: _Spectral, sp_s: _Spectral, lams_u: np.ndarray, lams_s: np.ndarray):
    """Bivariate GCV ``||G - S2 G S1^T||^2 / (1 - tr(S1) tr(S2) / (R L))^2`` on a grid of pairs.

    Returns the selected ``(lam_u, lam_s)``; ties go to the first pair.
    """
    c2 = (sp_u.F.T @ G @ sp_s.F) ** 2
    outside = np.sum(G * G) - np.sum(c2)
    a = np.array([sp_u.shrink(l) for l in lams_u])  # (nu, ku)
    b = np.array([sp_s.shrink(l) for l in lams_s])  # (ns, ks)
    inside = np.sum(c2) - 2 * a @ c2 @ b.T + (a * a) @ c2 @ (b * b).T
    edf = np.outer(a.sum(axis=1), b.sum(axis=1))
    score = (outside + inside) / (1.0 - edf / G.size) ** 2
    i, j = np.unravel_index(np.argmin(score), score.shape)
    return float(lams_u[i]), float(lams_s[j])


def sandwich_smooth(Gamma_hat, grid_u, grid_s, knots_u: int = 5, knots_s: int = 10,
                    lam_u: float | None = None, lam_s: float | None = None, gcv: str = "joint"):
    """Bivariate smooth ``S2 @ Gamma_hat @ S1.T`` of an ``R x L`` surface.

    ``S1`` acts along the response domain (columns, ``grid_s``) and ``S2``
    along the predictor domain (rows, ``grid_u``).  Smoothing parameters
    left as ``None`` are chosen by GCV: ``gcv="joint"`` minimizes the
    bivariate criterion over pairs ``(lam_u, lam_s)``; ``gcv="marginal"``
    picks each one separately, pooling over all slices in its direction.

    Returns ``(Gamma_tilde, S1, S2)``.
    """
    G = np.asarray(Gamma_hat, dtype=float)
    grid_u = check_grid(grid_u, "grid_u")
    grid_s = check_grid(grid_s, "grid_s")
    if G.shape != (grid_u.size, grid_s.size):
        raise DimensionMismatch(f"surface shape {G.shape} vs grids ({grid_u.size}, {grid_s.size})")
    if gcv == "joint":
        sp_u, sp_s = _Spectral(grid_u, knots_u), _Spectral(grid_s, knots_s)
        if lam_u is None or lam_s is None:
            lams_u = LAMBDA_GRID if lam_u is None else np.array([lam_u], dtype=float)
            lams_s = LAMBDA_GRID if lam_s is None else np.array([lam_s], dtype=float)
            lam_u, lam_s = _joint_gcv(G, sp_u, sp_s, lams_u, lams_s)
        S1 = SmootherMatrix(sp_s.matrix(lam_s), float(lam_s), knots_s, float(np.sum(sp_s.shrink(lam_s))))
        S2 = SmootherMatrix(sp_u.matrix(lam_u), float(lam_u), knots_u, float(np.sum(sp_u.shrink(lam_u))))
    elif gcv == "marginal":
        S1 = psmooth_matrix(grid_s, knots_s, G.T, lam_s)
        S2 = psmooth_matrix(grid_u, knots_u, G, lam_u)
    else:
        raise ValueError(f"gcv must be 'joint' or 'marginal', got {gcv!r}")
    return S2.S @ G @ S1.S.T, S1, S2
