"""Spline bases, penalty matrices and quadrature inner products."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.interpolate import BSpline

from .errors import DegenerateKnots, GridMismatch, NonMonotoneGrid


class BasisKind(str, Enum):
    BSPLINE = "bspline"
    TRUNCATED_POWER = "truncated_power"


class PenaltyKind(str, Enum):
    BLOCK_ZERO_IDENTITY = "block_zero_identity"
    SECOND_DIFFERENCE = "difference"


@dataclass(frozen=True)
class BasisMatrix:
    """Basis functions evaluated on a grid (rows = grid points)."""

    values: np.ndarray
    kind: BasisKind
    knots: np.ndarray
    degree: int
    grid: np.ndarray = field(repr=False)

    @property
    def n_basis(self) -> int:
        return self.values.shape[1]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def evaluate(self, x) -> np.ndarray:
        """Evaluate the same basis at arbitrary points ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.kind is BasisKind.BSPLINE:
            return _bspline_design(x, self.knots, self.degree)
        return _truncated_power_design(x, self.knots, self.degree)


@dataclass(frozen=True)
class PenaltyMatrix:
    values: np.ndarray
    kind: PenaltyKind

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def check_grid(grid, name: str = "grid") -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1:
        raise NonMonotoneGrid(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(grid)):
        raise NonMonotoneGrid(f"{name} contains non-finite values")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise NonMonotoneGrid(f"{name} is not strictly increasing")
    return grid


def trapezoid_weights(grid) -> np.ndarray:
    """Weights ``w`` such that ``w @ f`` is the trapezoid rule for ``f`` on ``grid``."""
    grid = np.asarray(grid, dtype=float)
    w = np.zeros_like(grid)
    h = np.diff(grid)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


def _bspline_design(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    # clamp into the base interval so the right endpoint is evaluated from the left
    lo, hi = knots[degree], knots[-degree - 1]
    xc = np.clip(x, lo, hi)
    return BSpline.design_matrix(xc, knots, degree, extrapolate=False).toarray()


def _truncated_power_design(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    poly = np.vander(x, degree + 1, increasing=True)
    trunc = np.maximum(x[:, None] - knots[None, :], 0.0) ** degree
    return np.hstack([poly, trunc])


def bspline_basis(grid, n_interior_knots: int, degree: int = 3) -> BasisMatrix:
    """Clamped B-spline design matrix with knots at equally spaced grid quantiles.

    The basis has ``n_interior_knots + degree + 1`` columns.
    """
    grid = check_grid(grid)
    if degree < 1 or n_interior_knots < 1:
        raise ValueError("degree and n_interior_knots must be >= 1")
    n_basis = n_interior_knots + degree + 1
    if grid.size < n_basis:
        raise DegenerateKnots(
            f"grid has {grid.size} points but {n_basis} basis functions were requested"
        )
    probs = np.linspace(0.0, 1.0, n_interior_knots + 2)[1:-1]
    interior = np.quantile(grid, probs)
    knots = np.concatenate(
        [np.repeat(grid[0], degree + 1), interior, np.repeat(grid[-1], degree + 1)]
    )
    values = _bspline_design(grid, knots, degree)
    return BasisMatrix(values, BasisKind.BSPLINE, knots, degree, grid)


def truncated_power_basis(grid, K_g: int) -> BasisMatrix:
    """Degree-1 truncated power basis ``(1, u, (u - k_1)_+, ..., (u - k_{K_g-2})_+)``.

    Interior knots are equally spaced over the range of ``grid``.
    """
    grid = check_grid(grid)
    if K_g < 4:
        raise DegenerateKnots("K_g must be at least 4")
    if grid.size < K_g:
        raise DegenerateKnots(f"grid has {grid.size} points but K_g={K_g}")
    knots = np.linspace(grid[0], grid[-1], K_g)[1:-1]
    values = _truncated_power_design(grid, knots, 1)
    return BasisMatrix(values, BasisKind.TRUNCATED_POWER, knots, 1, grid)


def penalty_D(p: int, K_g: int) -> PenaltyMatrix:
    """Block penalty: zeros on ``p`` scalar and 2 spline coefficients, identity on the rest."""
    if p < 1 or K_g < 2:
        raise ValueError("need p >= 1 and K_g >= 2")
    diag = np.concatenate([np.zeros(p + 2), np.ones(K_g - 2)])
    return PenaltyMatrix(np.diag(diag), PenaltyKind.BLOCK_ZERO_IDENTITY)


def difference_matrix(order: int, K: int) -> np.ndarray:
    if not 1 <= order < K:
        raise ValueError("need 1 <= order < K")
    return np.diff(np.eye(K), n=order, axis=0)


def difference_penalty(order: int, K: int) -> PenaltyMatrix:
    """``P^T P`` for the ``order``-th difference operator on ``K`` coefficients."""
    P = difference_matrix(order, K)
    return PenaltyMatrix(P.T @ P, PenaltyKind.SECOND_DIFFERENCE)


def inner_product_matrix(psi, phi, grid_u) -> np.ndarray:
    """Trapezoid approximation of ``int psi_l(u) phi_m(u) du`` for all ``(l, m)``."""
    psi = np.asarray(psi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    grid_u = np.asarray(grid_u, dtype=float)
    if psi.ndim == 1:
        psi = psi[:, None]
    if phi.ndim == 1:
        phi = phi[:, None]
    if psi.shape[0] != grid_u.size or phi.shape[0] != grid_u.size:
        raise GridMismatch(
            f"basis rows ({psi.shape[0]}, {phi.shape[0]}) do not match grid length {grid_u.size}"
        )
    w = trapezoid_weights(grid_u)
    return psi.T @ (w[:, None] * phi)
