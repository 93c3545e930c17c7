"""Random-effect cross-covariance ``G(s1, s2)`` across outcome locations.

Two estimators are provided: a method-of-moments regression of residual
cross-products on products of random-effect covariates (any ``q``), and a
marginal estimator for random-intercept models that subtracts the
fixed-effect share from the sample covariance of the outcome.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InsufficientPairs, UnsupportedQ
from .smoothing import sandwich_smooth


@dataclass(frozen=True)
class CovarianceField:
    """``G[t, v, l, m] = Cov(u_t(s_l), u_v(s_m))``."""

    G: np.ndarray  # (q, q, L, L)
    grid_s: np.ndarray
    smoothed: bool = False
    trimmed: bool = False

    @property
    def q(self) -> int:
        return self.G.shape[0]

    @property
    def L(self) -> int:
        return self.G.shape[2]

    def unfold(self) -> np.ndarray:
        """``(q L) x (q L)`` matrix with row index ``t * L + l``."""
        q, L = self.q, self.L
        return self.G.transpose(0, 2, 1, 3).reshape(q * L, q * L)

    @classmethod
    def fold(cls, M: np.ndarray, q: int, grid_s, **flags) -> "CovarianceField":
        L = M.shape[0] // q
        return cls(M.reshape(q, L, q, L).transpose(0, 2, 1, 3).copy(), np.asarray(grid_s, dtype=float), **flags)

    def with_diagonal(self, H) -> "CovarianceField":
        """Replace ``G(s_l, s_l)`` by per-location ``q x q`` matrices ``H[l]``."""
        G = self.G.copy()
        for l, h in enumerate(H):
            G[:, :, l, l] = np.asarray(h, dtype=float).reshape(self.q, self.q)
        return replace(self, G=G)

    def to_csv(self, path) -> None:
        np.savetxt(Path(path), self.unfold(), delimiter=",", fmt="%.17g")


def residualize(Y, Xstar, beta_star) -> np.ndarray:
    """``Y - X* B`` with ``B`` of shape ``(P, L)``."""
    return np.asarray(Y, dtype=float) - np.asarray(Xstar, dtype=float) @ np.asarray(beta_star, dtype=float)


def _pairs(subject_ids):
    """Ordered within-subject row pairs ``(a, b)``; ``same`` marks ``a == b``."""
    ids = np.asarray(subject_ids)
    order = np.argsort(ids, kind="stable")
    _, starts, counts = np.unique(ids[order], return_index=True, return_counts=True)
    a, b = [], []
    for st, c in zip(starts, counts):
        rows = order[st : st + c]
        a.append(np.repeat(rows, c))
        b.append(np.tile(rows, c))
    a = np.concatenate(a)
    b = np.concatenate(b)
    return a, b, a == b


def estimate_G_mom(residuals, Z, subject_ids, grid_s) -> CovarianceField:
    """Method-of-moments estimate of ``G``.

    For every pair of locations ``(l, m)`` the products
    ``r_ij(s_l) r_ik(s_m)`` over within-subject pairs are regressed by least
    squares on ``Z_ijt Z_ikv``.  Pairs with ``j != k`` are always used; pairs
    with ``j == k`` only when ``l != m``, so that the residual variance never
    enters.
    """
    R = np.asarray(residuals, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    grid_s = np.asarray(grid_s, dtype=float)
    N, L = R.shape
    if Z.shape[0] != N or np.size(subject_ids) != N:
        raise DimensionMismatch("residuals, Z and subject ids need the same number of rows")
    if grid_s.size != L:
        raise DimensionMismatch(f"residuals have {L} columns, grid has {grid_s.size} points")
    q = Z.shape[1]
    a, b, same = _pairs(subject_ids)
    C = (Z[a][:, :, None] * Z[b][:, None, :]).reshape(-1, q * q)
    off = ~same
    if off.sum() < q * q:
        raise InsufficientPairs(f"{int(off.sum())} within-subject pairs with j != k, need at least {q * q}")
    P_all = np.linalg.pinv(C)
    P_off = np.linalg.pinv(C[off])

    G = np.empty((q * q, L, L))
    for c in range(q * q):
        G[c] = (R[a] * P_all[c][:, None]).T @ R[b]
        diag = np.einsum("n,nl,nl->l", P_off[c], R[a[off]], R[b[off]])
        G[c][np.diag_indices(L)] = diag
    # the pair set is symmetric, so this only removes rounding differences
    M = CovarianceField(G.reshape(q, q, L, L), grid_s).unfold()
    return CovarianceField.fold((M + M.T) / 2, q, grid_s)


def estimate_G_marginal(Y, Xstar, beta_star_all, subject_ids, grid_s=None, q: int = 1) -> CovarianceField:
    """``Cov(Y(s1), Y(s2)) - beta*(s1)^T Cov(X*) beta*(s2)`` for random-intercept models.

    Covariances are pooled over all observations with divisor ``N``.  The
    diagonal still contains the residual variance; callers replace it (see
    :meth:`CovarianceField.with_diagonal`).
    """
    if q != 1:
        raise UnsupportedQ("the marginal estimator only applies to random-intercept models (q = 1)")
    Y = np.asarray(Y, dtype=float)
    Xstar = np.asarray(Xstar, dtype=float)
    B = np.asarray(beta_star_all, dtype=float)
    N, L = Y.shape
    if Xstar.shape[0] != N or B.shape != (Xstar.shape[1], L) or np.size(subject_ids) != N:
        raise DimensionMismatch("Y, X*, beta* and subject ids are not conformable")
    grid_s = np.linspace(0.0, 1.0, L) if grid_s is None else np.asarray(grid_s, dtype=float)
    Yc = Y - Y.mean(axis=0)
    Xc = Xstar - Xstar.mean(axis=0)
    Cy = Yc.T @ Yc / N
    F = Xc @ B
    G = Cy - F.T @ F / N
    return CovarianceField(G[None, None], grid_s)


def psd_trim(A) -> np.ndarray:
    """Symmetrize and set negative eigenvalues to zero."""
    A = np.asarray(A, dtype=float)
    A = (A + A.T) / 2
    w, V = np.linalg.eigh(A)
    if w[0] >= 0:
        return A
    out = (V * np.maximum(w, 0.0)) @ V.T
    return (out + out.T) / 2


def smooth_covariance(field: CovarianceField, knots: int = 10, lam: float | None = None) -> CovarianceField:
    """Sandwich-smooth each ``(t, v)`` slice over ``grid_s`` in both directions, then trim.

    The same smoothing parameter is used along both axes so that symmetric
    slices stay symmetric.
    """
    q = field.q
    G = np.empty_like(field.G)
    for t in range(q):
        for v in range(q):
            G[t, v], _, _ = sandwich_smooth(field.G[t, v], field.grid_s, field.grid_s, knots, knots, lam, lam,
                                             gcv="marginal")
    M = CovarianceField(G, field.grid_s).unfold()
    return CovarianceField.fold(psd_trim(M), q, field.grid_s, smoothed=True, trimmed=True)
