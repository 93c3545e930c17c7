"""Functional principal components of densely observed predictor curves."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .basis import check_grid, trapezoid_weights
from .errors import GridMismatch, RankDeficientWarning

# eigenvalues below this fraction of the leading one count as numerically zero
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class FpcaBasis:
    """Mean, quadrature-orthonormal eigenfunctions, eigenvalues and scores.

    ``eigenfunctions`` has one column per retained component and satisfies
    ``psi.T @ diag(w) @ psi = I`` for the trapezoid weights ``w`` of
    ``grid_u``.  ``all_eigenvalues`` keeps the full (trimmed) spectrum.
    """

    mean: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    scores: np.ndarray
    grid_u: np.ndarray
    all_eigenvalues: np.ndarray
    requested: int
    rank_deficient: bool = False

    @property
    def n_components(self) -> int:
        return self.eigenfunctions.shape[1]


def estimate_fpca(W, grid_u, K_w: int = 15, presmooth: bool = False, presmooth_knots: int = 10) -> FpcaBasis:
    """Pooled FPCA of the rows of ``W`` under the trapezoid inner product.

    Parameters
    ----------
    W : ndarray, shape (N, R)
        One predictor curve per row.
    grid_u : ndarray, shape (R,)
    K_w : int
        Requested number of components.  If it exceeds the numerical rank of
        the centered curves, fewer are kept and a
        :class:`~lfofr.errors.RankDeficientWarning` is issued.
    presmooth : bool
        Smooth each curve with a GCV P-spline before decomposing.
    """
    W = np.asarray(W, dtype=float)
    grid_u = check_grid(grid_u, "grid_u")
    N, R = W.shape
    if R != grid_u.size:
        raise GridMismatch(f"W has {R} columns but grid_u has {grid_u.size} points")
    if N < 2:
        raise ValueError("FPCA needs at least two curves")
    if K_w < 1 or K_w > min(N, R):
        raise ValueError(f"K_w={K_w} must lie in [1, min(N, R)={min(N, R)}]")
    if presmooth:
        from .smoothing import psmooth_matrix

        S = psmooth_matrix(grid_u, presmooth_knots, W.T)
        W = (S.S @ W.T).T

    w = trapezoid_weights(grid_u)
    sw = np.sqrt(w)
    mu = W.mean(axis=0)
    Wc = W - mu
    # eigenproblem of Q^{1/2} C Q^{1/2} via SVD of the scaled centered data
    _, sing, Vt = np.linalg.svd(Wc * sw / np.sqrt(N), full_matrices=False)
    evals = sing**2
    lead = evals[0] if evals.size else 0.0
    rank = int(np.sum(evals > RANK_RTOL * lead)) if lead > 0 else 0
    keep = min(K_w, rank)
    deficient = keep < K_w
    if deficient:
        warnings.warn(
            f"requested {K_w} components but the centered curves have numerical rank {rank}; "
            f"keeping {keep}",
            RankDeficientWarning,
            stacklevel=2,
        )
    psi = Vt[:keep].T / sw[:, None]
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(psi), axis=0)
    signs = np.sign(psi[idx, np.arange(keep)])
    signs[signs == 0] = 1.0
    psi = psi * signs
    scores = Wc @ (w[:, None] * psi)
    all_evals = np.concatenate([evals, np.zeros(max(0, R - evals.size))])
    return FpcaBasis(
        mean=mu,
        eigenfunctions=psi,
        eigenvalues=np.maximum(evals[:keep], 0.0),
        scores=scores,
        grid_u=grid_u,
        all_eigenvalues=np.maximum(all_evals, 0.0),
        requested=K_w,
        rank_deficient=deficient,
    )


def scores_for(basis: FpcaBasis, W_new) -> np.ndarray:
    """Project new curves (same grid) onto the eigenfunctions of ``basis``."""
    W_new = np.atleast_2d(np.asarray(W_new, dtype=float))
    if W_new.shape[1] != basis.grid_u.size:
        raise GridMismatch(f"curves have {W_new.shape[1]} points, basis grid has {basis.grid_u.size}")
    w = trapezoid_weights(basis.grid_u)
    return (W_new - basis.mean) @ (w[:, None] * basis.eigenfunctions)
