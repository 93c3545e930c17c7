"""Pointwise penalized functional mixed models (one fit per outcome location).

At each location ``s_l`` the outcome column ``y = Y[:, l]`` is modelled as

    y = X* beta* + Z b + eps,   b_i ~ N(0, H),   eps ~ N(0, sigma2 I)

where ``X* = [X, Xi_1 M_1, ..., Xi_K M_K]`` and the penalized spline
coefficients of each functional predictor are treated as random effects
with variance ``sigma2 / lambda_k``.  Variance components are estimated by
REML with ``sigma2`` profiled out, and

    beta* = (X*^T V^-1 X* + (lambda / sigma2) D)^-1 X*^T V^-1 y

with ``V = Z H Z^T + sigma2 I`` applied subject by subject (Woodbury); the
``N x N`` matrix is never formed.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .basis import PenaltyMatrix, PenaltyKind, inner_product_matrix, truncated_power_basis
from .data import FunctionalDataset
from .errors import (
    DimensionMismatch,
    GridMismatch,
    LocationFitError,
    NonConvergenceWarning,
    RankDeficientWarning,
    SingularSystem,
)
from .fpca import estimate_fpca
from .neldermead import minimize_batch

log = logging.getLogger(__name__)

MAX_CONDITION = 1e12
BOUNDARY_RATIO = 1e-10
LOG_BOUND = 30.0
POLISH_BOUND = 12.0  # |log parameter| beyond which the criterion is too flat to polish
# fixed Nelder-Mead starting offsets (random-effect part, spline part) on the log-ratio scale
START_OFFSETS = ((0.0, 0.0), (-3.0, 3.0), (3.0, -3.0))


@dataclass(frozen=True)
class PointwiseModelConfig:
    K_w: int = 15
    K_g: int = 15
    lambda_selection: str = "reml"  # "reml" or "fixed"
    fixed_lambda: float | None = None
    max_reml_iter: int = 2000
    reml_tol: float = 1e-8
    reml_xtol: float = 1e-7
    random_effects: bool = True
    presmooth_predictors: bool = False

    def __post_init__(self):
        if self.K_g < 4:
            raise ValueError("K_g must be >= 4")
        if self.K_w < 1:
            raise ValueError("K_w must be >= 1")
        if self.lambda_selection not in ("reml", "fixed"):
            raise ValueError("lambda_selection must be 'reml' or 'fixed'")
        if self.lambda_selection == "fixed" and (self.fixed_lambda is None or self.fixed_lambda < 0):
            raise ValueError("fixed lambda selection needs fixed_lambda >= 0")


@dataclass(frozen=True)
class Design:
    """Fixed-effect design shared by every location."""

    Xstar: np.ndarray
    D: PenaltyMatrix
    p: int
    spline_slices: tuple  # one slice of X* columns per functional predictor
    penalized: tuple  # boolean masks over X* columns, one per predictor
    fpca: tuple = ()
    basis_g: tuple = ()

    @property
    def P(self) -> int:
        return self.Xstar.shape[1]

    @property
    def n_unpenalized(self) -> int:
        pen = np.zeros(self.P, dtype=bool)
        for m in self.penalized:
            pen |= m
        return int(self.P - pen.sum())

    @cached_property
    def unpenalized_qr(self):
        """Column mask and thin QR factors of the unpenalized columns of ``X*``."""
        free = np.ones(self.P, dtype=bool)
        for m in self.penalized:
            free &= ~m
        Q, R = np.linalg.qr(self.Xstar[:, free])
        return free, Q, R

    def __iter__(self):
        yield self.Xstar
        yield self.D


@dataclass
class PointwiseFit:
    beta_star: np.ndarray
    H: np.ndarray
    sigma2_eps: float
    lam: np.ndarray  # sigma2_eps / sigma2_g, one per functional predictor
    xtvx_inv: np.ndarray  # (X*^T V^-1 X* + penalty)^-1, V in data units
    xtvx: np.ndarray  # X*^T V^-1 X*
    xtvz: np.ndarray  # X*^T V^-1 Z, shape (P, n_subjects * q)
    theta: np.ndarray = field(repr=False, default=None)
    boundary: bool = False
    converged: bool = True
    n_evals: int = 0
    reml_criterion: float = float("nan")


def build_design(d: FunctionalDataset, fpca, basis_g) -> Design:
    """Assemble ``X* = [X, Xi_k M_k ...]`` and the block penalty ``D``."""
    fpca = list(fpca)
    basis_g = list(basis_g)
    if len(fpca) != d.K or len(basis_g) != d.K:
        raise GridMismatch("need one FPCA basis and one coefficient basis per functional predictor")
    blocks = [d.X]
    diag = [np.zeros(d.p)]
    slices, col = [], d.p
    for k in range(d.K):
        f, b = fpca[k], basis_g[k]
        if f.grid_u.shape != b.grid.shape or not np.array_equal(f.grid_u, b.grid):
            raise GridMismatch(f"predictor {k}: FPCA grid and coefficient-basis grid differ")
        if not np.array_equal(f.grid_u, d.grid_u[k]):
            raise GridMismatch(f"predictor {k}: FPCA grid differs from the dataset grid")
        M = inner_product_matrix(f.eigenfunctions, b.values, f.grid_u)
        blocks.append(f.scores @ M)
        Kg = b.n_basis
        diag.append(np.concatenate([np.zeros(2), np.ones(Kg - 2)]))
        slices.append(slice(col, col + Kg))
        col += Kg
    Xstar = np.hstack(blocks)
    dvec = np.concatenate(diag)
    masks = []
    for sl in slices:
        m = np.zeros(Xstar.shape[1], dtype=bool)
        m[sl] = dvec[sl] > 0
        masks.append(m)
    return Design(
        Xstar=Xstar,
        D=PenaltyMatrix(np.diag(dvec), PenaltyKind.BLOCK_ZERO_IDENTITY),
        p=d.p,
        spline_slices=tuple(slices),
        penalized=tuple(masks),
        fpca=tuple(fpca),
        basis_g=tuple(basis_g),
    )


def prepare_design(d: FunctionalDataset, config: PointwiseModelConfig) -> Design:
    """FPCA (pooled over all curves) and coefficient bases for every predictor, then :func:`build_design`."""
    fpcas, bases = [], []
    for k in range(d.K):
        K_w = min(config.K_w, d.N, d.grid_u[k].size)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficientWarning)
            fpcas.append(estimate_fpca(d.W[k], d.grid_u[k], K_w, presmooth=config.presmooth_predictors))
        bases.append(truncated_power_basis(d.grid_u[k], config.K_g))
    return build_design(d, fpcas, bases)


# --------------------------------------------------------------------------
# subject-grouped sufficient statistics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupedStats:
    """Cross-products needed to apply ``V^-1`` by subject; shared across locations."""

    codes: np.ndarray
    n_groups: int
    q: int
    N: int
    XtX: np.ndarray  # (P, P)
    ZtX: np.ndarray  # (I, q, P)
    ZtZ: np.ndarray  # (I, q, q)
    Z: np.ndarray  # (N, q)
    Xstar: np.ndarray

    @classmethod
    def build(cls, Xstar: np.ndarray, Z: np.ndarray, codes: np.ndarray) -> "GroupedStats":
        codes = np.asarray(codes, dtype=np.int64)
        I = int(codes.max()) + 1 if codes.size else 0
        N, q = Z.shape
        ZtX = np.zeros((I, q, Xstar.shape[1]))
        np.add.at(ZtX, codes, Z[:, :, None] * Xstar[:, None, :])
        ZtZ = np.zeros((I, q, q))
        np.add.at(ZtZ, codes, Z[:, :, None] * Z[:, None, :])
        return cls(codes, I, q, N, Xstar.T @ Xstar, ZtX, ZtZ, Z, Xstar)

    def q1_groups(self):
        """Subjects grouped by ``sum_j z_ij^2`` (q = 1): keys, member index, counts, sum of s s^T."""
        zz = self.ZtZ[:, 0, 0]
        keys, inv, counts = np.unique(zz, return_inverse=True, return_counts=True)
        Sx = self.ZtX[:, 0, :]
        M = np.zeros((keys.size, Sx.shape[1], Sx.shape[1]))
        np.add.at(M, inv, Sx[:, :, None] * Sx[:, None, :])
        return keys, inv, counts.astype(float), M

    def response_stats(self, y: np.ndarray):
        Zty = np.zeros((self.n_groups, self.q))
        np.add.at(Zty, self.codes, self.Z * y[:, None])
        return self.Xstar.T @ y, Zty, float(y @ y)


def _chol_factor(theta_re: np.ndarray, q: int) -> np.ndarray:
    """Lower-triangular ``L`` with ``Theta = L L^T`` from log-Cholesky parameters."""
    Lm = np.zeros((q, q))
    Lm[np.diag_indices(q)] = np.exp(theta_re[:q])
    if q > 1:
        Lm[np.tril_indices(q, -1)] = theta_re[q:]
    return Lm


class _Working:
    """Quantities of ``X*^T Vb^-1 X*`` etc. for one value of the random-effect parameters.

    ``Vb = I + Z Theta Z^T`` is ``V / sigma2``.
    """

    def __init__(self, stats: GroupedStats, Lm: np.ndarray | None):
        self.stats = stats
        self.Lm = Lm
        if Lm is None:
            self.A0 = stats.XtX
            self.logdet_vb = 0.0
            return
        if stats.q == 1:
            t = Lm[0, 0] ** 2
            a = 1.0 + t * stats.ZtZ[:, 0, 0]
            self.w = t / a
            self.a = a
            Sx = stats.ZtX[:, 0, :]
            self.A0 = stats.XtX - Sx.T @ (self.w[:, None] * Sx)
            self.logdet_vb = float(np.sum(np.log(a)))
        else:
            LtZtZL = np.einsum("ji,njk,kl->nil", Lm, stats.ZtZ, Lm)
            Mi = np.eye(stats.q)[None] + LtZtZL
            self.Minv = np.linalg.inv(Mi)
            self.LtZtX = np.einsum("ji,njp->nip", Lm, stats.ZtX)
            self.A0 = stats.XtX - np.einsum("nip,nij,njr->pr", self.LtZtX, self.Minv, self.LtZtX)
            self.logdet_vb = float(np.sum(np.linalg.slogdet(Mi)[1]))

    def rhs(self, Xty, Zty, yty):
        s = self.stats
        if self.Lm is None:
            return Xty, yty
        if s.q == 1:
            Sy = Zty[:, 0]
            r = Xty - s.ZtX[:, 0, :].T @ (self.w * Sy)
            return r, yty - float(np.sum(self.w * Sy * Sy))
        LtZty = np.einsum("ji,nj->ni", self.Lm, Zty)
        r = Xty - np.einsum("nip,nij,nj->p", self.LtZtX, self.Minv, LtZty)
        return r, yty - float(np.einsum("ni,nij,nj->", LtZty, self.Minv, LtZty))

    def xtvbz(self) -> np.ndarray:
        """``X*^T Vb^-1 Z`` as a (P, I*q) matrix (subject-major)."""
        s = self.stats
        if self.Lm is None:
            out = np.transpose(s.ZtX, (2, 0, 1))
        elif s.q == 1:
            out = (s.ZtX[:, 0, :] / self.a[:, None]).T[:, :, None]
        else:
            LtZtZ = np.einsum("ji,njk->nik", self.Lm, s.ZtZ)
            corr = np.einsum("nip,nij,njk->npk", self.LtZtX, self.Minv, LtZtZ)
            out = np.transpose(np.transpose(s.ZtX, (0, 2, 1)) - corr, (1, 0, 2))
        return out.reshape(s.ZtX.shape[2], -1)


class _Problem:
    """REML objective and solution at one location (general ``q``)."""

    def __init__(self, stats: GroupedStats, design: Design, y: np.ndarray, config: PointwiseModelConfig):
        self.stats = stats
        self.design = design
        self.config = config
        # REML and the solution's penalized part only see y through its residual
        # from the unpenalized columns; removing that fit first makes shifts of y
        # along those columns leave the variance components bit-for-bit alike
        free, Qf, Rf = design.unpenalized_qr
        self.scale = float(y @ y)
        coef = np.linalg.solve(Rf, Qf.T @ y) if free.any() else np.zeros(0)
        self.shift = np.zeros(design.P)
        self.shift[free] = coef
        y = y - Qf @ (Qf.T @ y) if free.any() else y
        self.Xty, self.Zty, self.yty = stats.response_stats(y)
        self.q = stats.q
        self.n_re = (self.q * (self.q + 1)) // 2 if config.random_effects else 0
        self.fixed = config.lambda_selection == "fixed"
        self.K = len(design.penalized)
        self.n_g = 0 if self.fixed else self.K
        self.m = np.array([int(mask.sum()) for mask in design.penalized], dtype=float)
        if self.fixed and config.fixed_lambda == 0:
            self.p_f = design.P
        else:
            self.p_f = design.n_unpenalized
        self.dof = stats.N - self.p_f
        if self.dof <= 0:
            raise SingularSystem("not enough observations for the fixed effects")

    @property
    def dim(self) -> int:
        return self.n_re + self.n_g

    def split(self, params):
        return params[: self.n_re], params[self.n_re :]

    def penalty(self, log_theta_g) -> np.ndarray:
        pen = np.zeros(self.design.P)
        for k, mask in enumerate(self.design.penalized):
            pen[mask] = self.config.fixed_lambda if self.fixed else np.exp(-log_theta_g[k])
        return pen

    def working(self, re) -> _Working:
        if self.n_re == 0:
            return _Working(self.stats, None)
        return _Working(self.stats, _chol_factor(re, self.q))

    def evaluate(self, params, want_solution=False):
        params = np.clip(np.asarray(params, dtype=float), -LOG_BOUND, LOG_BOUND)
        re, lg = self.split(params)
        return self._evaluate(self.working(re), lg, want_solution)

    def _evaluate(self, wk: _Working, lg, want_solution=False):
        A = wk.A0 + np.diag(self.penalty(lg))
        r, yvy = wk.rhs(self.Xty, self.Zty, self.yty)
        try:
            cf = cho_factor(A, lower=True, check_finite=False)
        except LinAlgError:
            if want_solution:
                raise SingularSystem("penalized normal equations are not positive definite")
            return np.inf
        sol = cho_solve(cf, r, check_finite=False)
        Q = yvy - float(r @ sol)
        if want_solution:
            return wk, A, cf, sol, Q
        logdet_A = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        if Q <= 1e-300 or not np.isfinite(logdet_A):
            return np.inf
        crit = self.dof * np.log(Q / self.dof) + wk.logdet_vb + logdet_A
        if not self.fixed:
            crit += float(self.m @ lg)
        return crit

    def starts(self) -> np.ndarray:
        out = []
        for re_off, g_off in START_OFFSETS:
            re = np.zeros(self.n_re)
            re[: min(self.q, self.n_re)] = re_off / 2.0  # log of the Cholesky diagonal
            out.append(np.concatenate([re, np.full(self.n_g, g_off)]))
        return np.array(out).reshape(len(START_OFFSETS), self.dim)


class _ScalarRandomEffectBatch:
    """Vectorized REML objective for many locations sharing ``X*`` and a scalar random effect.

    Subjects are grouped by ``sum_j z_ij^2`` so that each evaluation costs
    ``O(groups * P^2)`` per location.  All operations act row by row, so a
    location's value never depends on the other rows of the batch.
    """

    def __init__(self, stats: GroupedStats, design: Design, problems):
        keys, inv, counts, M = stats.q1_groups()
        self.keys, self.counts, self.M = keys, counts, M
        self.XtX = stats.XtX
        Sx = stats.ZtX[:, 0, :]
        n, G, P = len(problems), keys.size, design.P
        self.Xty = np.array([pr.Xty for pr in problems])
        self.yty = np.array([pr.yty for pr in problems])
        self.v = np.zeros((n, G, P))
        self.yy = np.zeros((n, G))
        for i, pr in enumerate(problems):
            Sy = pr.Zty[:, 0]
            np.add.at(self.v[i], inv, Sx * Sy[:, None])
            np.add.at(self.yy[i], inv, Sy * Sy)
        self.masks = [m.astype(float) for m in design.penalized]
        self.m = problems[0].m
        self.dof = problems[0].dof
        self.diag = np.arange(P)

    def __call__(self, X: np.ndarray, idx: np.ndarray) -> np.ndarray:
        X = np.clip(X, -LOG_BOUND, LOG_BOUND)
        t = np.exp(2.0 * X[:, 0])
        a = 1.0 + t[:, None] * self.keys[None, :]
        w = t[:, None] / a
        A = np.broadcast_to(self.XtX, (X.shape[0],) + self.XtX.shape).copy()
        r = self.Xty[idx].copy()
        yvy = self.yty[idx].copy()
        for g in range(self.keys.size):
            A -= w[:, g, None, None] * self.M[g]
            r -= w[:, g, None] * self.v[idx, g]
            yvy -= w[:, g] * self.yy[idx, g]
        lg = X[:, 1:]
        for k, mask in enumerate(self.masks):
            A[:, self.diag, self.diag] += np.exp(-lg[:, k])[:, None] * mask
        out = np.full(X.shape[0], np.inf)
        try:
            Lc = np.linalg.cholesky(A)
            ok = np.ones(X.shape[0], dtype=bool)
        except np.linalg.LinAlgError:
            ok = np.array([_is_pd(Ai) for Ai in A])
            if not ok.any():
                return out
            Lc = np.linalg.cholesky(A[ok])
        z = np.linalg.solve(Lc, r[ok][:, :, None])[:, :, 0]
        Q = yvy[ok] - np.sum(z * z, axis=1)
        logdet_A = 2.0 * np.sum(np.log(np.diagonal(Lc, axis1=1, axis2=2)), axis=1)
        logdet_vb = np.sum(np.log(a[ok]) * self.counts[None, :], axis=1)
        pen_term = np.zeros(Q.size)
        for k in range(len(self.masks)):
            pen_term += self.m[k] * lg[ok, k]
        with np.errstate(divide="ignore", invalid="ignore"):
            val = self.dof * np.log(Q / self.dof) + logdet_vb + logdet_A + pen_term
        val[~(Q > 1e-300)] = np.inf
        out[ok] = val
        return out


def _is_pd(A: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(A)
        return True
    except np.linalg.LinAlgError:
        return False


def _optimize_reml(problems, design: Design, stats: GroupedStats, config: PointwiseModelConfig):
    """Minimize -2 x profiled REML log-likelihood at every location of ``problems``.

    Nelder-Mead from each of the fixed starting points; the best run per
    location wins.  Parameters live on the log-ratio scale: first the
    log-Cholesky factor of ``H / sigma2`` (``q(q+1)/2`` entries), then
    ``log(sigma2_g / sigma2)`` per functional predictor.

    Returns ``(x, fun, converged, nfev)`` arrays over locations.
    """
    n = len(problems)
    dim = problems[0].dim
    if dim == 0:
        f = np.array([pr.evaluate(np.zeros(0)) for pr in problems])
        return np.zeros((n, 0)), f, np.ones(n, dtype=bool), np.ones(n, dtype=int)
    pr0 = problems[0]
    if pr0.q == 1 and pr0.n_re == 1 and not pr0.fixed:
        fun = _ScalarRandomEffectBatch(stats, design, problems)
    else:
        def fun(X, idx):
            return np.array([problems[i].evaluate(x) for x, i in zip(X, idx)])

    best_x = np.zeros((n, dim))
    best_f = np.full(n, np.inf)
    conv = np.zeros(n, dtype=bool)
    nfev = np.zeros(n, dtype=int)
    for x0 in pr0.starts():
        res = minimize_batch(
            fun, np.tile(x0, (n, 1)), step=1.0,
            xatol=config.reml_xtol, fatol=config.reml_tol, maxiter=config.max_reml_iter,
        )
        nfev += res.nfev
        better = res.fun < best_f
        best_x[better] = res.x[better]
        best_f[better] = res.fun[better]
        conv[better] = res.converged[better]
    return np.clip(best_x, -LOG_BOUND, LOG_BOUND), best_f, conv, nfev


def _q1_gradient(prob: _Problem, x: np.ndarray):
    """Criterion and its gradient for a scalar random effect (``x = [log sqrt(theta_b), log theta_g ...]``)."""
    st = prob.stats
    t = np.exp(2.0 * x[0])
    lg = x[1:]
    z = st.ZtZ[:, 0, 0]
    S = st.ZtX[:, 0, :]
    Sy = prob.Zty[:, 0]
    a = 1.0 + t * z
    w, dw = t / a, 1.0 / a**2
    pen = prob.penalty(lg)
    A = st.XtX - S.T @ (w[:, None] * S) + np.diag(pen)
    r = prob.Xty - S.T @ (w * Sy)
    yvy = prob.yty - float(np.sum(w * Sy * Sy))
    cf = cho_factor(A, lower=True, check_finite=False)
    sol = cho_solve(cf, r, check_finite=False)
    Ainv = cho_solve(cf, np.eye(A.shape[0]), check_finite=False)
    Q = yvy - float(r @ sol)
    f = prob.dof * np.log(Q / prob.dof) + float(np.sum(np.log(a))) \
        + 2.0 * float(np.sum(np.log(np.diag(cf[0])))) + float(prob.m[: lg.size] @ lg)
    Ss = S @ sol
    dQ_dt = -float(np.sum(dw * Sy * Sy)) + 2.0 * float(np.sum(dw * Sy * Ss)) - float(np.sum(dw * Ss * Ss))
    tr_dt = -float(np.sum(dw * np.einsum("ip,pq,iq->i", S, Ainv, S)))
    grad = np.empty(x.size)
    grad[0] = 2.0 * t * (prob.dof * dQ_dt / Q + float(np.sum(z / a)) + tr_dt)
    for k, mask in enumerate(prob.design.penalized[: lg.size]):
        g = np.exp(-lg[k])
        grad[1 + k] = prob.dof * (-g * float(np.sum(sol[mask] ** 2))) / Q - g * float(np.sum(np.diag(Ainv)[mask])) \
            + prob.m[k]
    return f, grad


def _polish_q1(prob: _Problem, x: np.ndarray) -> np.ndarray:
    """A few safeguarded Newton steps on the REML score.

    Nelder-Mead only pins the optimum down to about the square root of the
    rounding error in the criterion; the score has a simple root, so Newton
    steps tighten it to near machine precision.  Coordinates near the
    parameter bounds, where the criterion is flat, are left alone.
    """
    free = np.abs(x) < POLISH_BOUND
    if not free.any():
        return x
    try:
        f, g = _q1_gradient(prob, x)
    except (LinAlgError, FloatingPointError):
        return x
    h = 1e-5
    for _ in range(8):
        idx = np.flatnonzero(free)
        Hs = np.empty((idx.size, idx.size))
        try:
            for j, i in enumerate(idx):
                e = np.zeros(x.size)
                e[i] = h
                Hs[:, j] = (_q1_gradient(prob, x + e)[1][idx] - _q1_gradient(prob, x - e)[1][idx]) / (2 * h)
        except (LinAlgError, FloatingPointError):
            break
        Hs = (Hs + Hs.T) / 2
        try:
            step = np.linalg.solve(Hs, g[idx])
        except LinAlgError:
            break
        if not np.all(np.isfinite(step)) or np.max(np.abs(step)) > 1.0 or np.linalg.eigvalsh(Hs)[0] <= 0:
            break
        x_new = x.copy()
        x_new[idx] -= step
        try:
            f_new, g_new = _q1_gradient(prob, x_new)
        except (LinAlgError, FloatingPointError):
            break
        if not (f_new <= f + 1e-10 * abs(f)) or np.linalg.norm(g_new[idx]) > np.linalg.norm(g[idx]):
            break
        x, f, g = x_new, f_new, g_new
        if np.max(np.abs(step)) < 1e-12:
            break
    return x


def _solve_location(prob: _Problem, x: np.ndarray, crit: float, converged: bool, nfev: int) -> PointwiseFit:
    if prob.q == 1 and prob.n_re == 1:
        x = _polish_q1(prob, x)
    re, lg = prob.split(x)
    boundary = bool(prob.n_re and prob.q == 1 and np.exp(2 * re[0]) < BOUNDARY_RATIO)
    if boundary:
        wk = _Working(prob.stats, np.zeros((prob.q, prob.q)))
        wk, A, cf, sol, Q = prob._evaluate(wk, lg, want_solution=True)
    else:
        wk, A, cf, sol, Q = prob.evaluate(x, want_solution=True)
    sol = sol + prob.shift
    if not np.isfinite(Q) or Q <= 1e-12 * max(prob.scale, 1e-300):
        raise SingularSystem("residual variance is zero (response exactly fitted)")
    cond = scaled_condition(A)
    if cond > MAX_CONDITION:
        raise SingularSystem(f"condition number {cond:.3g} exceeds {MAX_CONDITION:.0e}", cond)
    sigma2 = Q / prob.dof
    q = prob.q
    if prob.n_re and not boundary:
        Lm = _chol_factor(re, q)
        H = sigma2 * (Lm @ Lm.T)
    else:
        H = np.zeros((q, q))
    lam = np.full(prob.K, float(prob.config.fixed_lambda)) if prob.fixed else np.exp(-lg)
    Ainv = cho_solve(cf, np.eye(A.shape[0]), check_finite=False)
    Ainv = (Ainv + Ainv.T) / 2
    return PointwiseFit(
        beta_star=sol,
        H=H,
        sigma2_eps=float(sigma2),
        lam=lam,
        xtvx_inv=sigma2 * Ainv,
        xtvx=wk.A0 / sigma2,
        xtvz=wk.xtvbz() / sigma2,
        theta=x,
        boundary=boundary,
        converged=bool(converged),
        n_evals=int(nfev),
        reml_criterion=float(crit),
    )


def scaled_condition(A: np.ndarray) -> float:
    """Condition number of ``A`` after symmetric diagonal (Jacobi) scaling.

    Invariant to column units and to the size of the penalty on any one
    coefficient; only genuine near-singularity makes it large.
    """
    dg = np.sqrt(np.diag(A))
    if np.any(dg <= 0):
        return np.inf
    eig = np.linalg.eigvalsh(A / np.outer(dg, dg))
    return float(eig[-1] / eig[0]) if eig[0] > 0 else np.inf


def _fit_chunk(args):
    """Fit a block of locations; failures are isolated per location."""
    Ychunk, locs, design, stats, config = args
    problems, out = [], {}
    for l, y in zip(locs, Ychunk.T):
        try:
            problems.append((l, _Problem(stats, design, y, config)))
        except SingularSystem as exc:
            out[l] = (None, repr(exc))
    if problems:
        xs, fs, conv, nfev = _optimize_reml([p for _, p in problems], design, stats, config)
        for k, (l, prob) in enumerate(problems):
            if not conv[k]:
                log.warning("location %d: REML did not converge in %d iterations", l, config.max_reml_iter)
            try:
                out[l] = (_solve_location(prob, xs[k], fs[k], conv[k], nfev[k]), None)
            except (SingularSystem, LinAlgError, FloatingPointError) as exc:
                out[l] = (None, repr(exc))
    return [(l, *out[l]) for l in locs]


@dataclass(frozen=True)
class RemlEstimate:
    H: np.ndarray
    sigma2_eps: float
    lam: np.ndarray
    boundary: bool
    converged: bool


def reml_variance_components(y, Xstar, D, Z, subject_ids, config: PointwiseModelConfig = PointwiseModelConfig(),
                             spline_blocks=None) -> RemlEstimate:
    """REML estimates of ``H``, ``sigma2_eps`` and ``lambda = sigma2_eps / sigma2_g``.

    ``D`` marks penalized columns on its diagonal.  ``spline_blocks`` optionally
    splits them into predictor blocks (a list of column slices) with one
    smoothing parameter each; by default all penalized columns share one.
    """
    Xstar = np.asarray(Xstar, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    P = Xstar.shape[1]
    dvec, masks = _penalty_masks(D, P, spline_blocks)
    design = Design(Xstar, PenaltyMatrix(np.diag(dvec.astype(float)), PenaltyKind.BLOCK_ZERO_IDENTITY),
                    p=P, spline_slices=(), penalized=masks)
    _, codes = np.unique(np.asarray(subject_ids), return_inverse=True)
    stats = GroupedStats.build(Xstar, Z, codes)
    (_, fit, err), = _fit_chunk((np.asarray(y, dtype=float)[:, None], [0], design, stats, config))
    if fit is None:
        raise SingularSystem(err)
    if not fit.converged:
        warnings.warn("REML did not converge", NonConvergenceWarning, stacklevel=2)
    return RemlEstimate(fit.H, fit.sigma2_eps, fit.lam, fit.boundary, fit.converged)


def _penalty_masks(D, P: int, spline_blocks):
    dvec = np.diag(np.asarray(D, dtype=float)) > 0
    if spline_blocks is None:
        return dvec, ((dvec,) if dvec.any() else ())
    masks = []
    for sl in spline_blocks:
        m = np.zeros(P, dtype=bool)
        m[sl] = dvec[sl]
        masks.append(m)
    return dvec, tuple(masks)


def penalized_gls(y, Xstar, D, Z, subject_ids, lam, H, sigma2_eps, spline_blocks=None) -> PointwiseFit:
    """Penalized GLS estimate for given variance components and smoothing parameters.

    Solves ``(X*^T V^-1 X* + (lam / sigma2_eps) D) b = X*^T V^-1 y`` with
    ``V = Z H Z^T + sigma2_eps I`` applied subject by subject.  ``lam`` is the
    ratio ``sigma2_eps / sigma2_g`` reported by :func:`fit_pointwise`, one
    value per block in ``spline_blocks`` (or a scalar shared by all penalized
    columns).
    """
    Xstar = np.asarray(Xstar, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    y = np.asarray(y, dtype=float)
    N, P = Xstar.shape
    if y.shape != (N,) or Z.shape[0] != N or np.size(subject_ids) != N:
        raise DimensionMismatch("y, X*, Z and subject ids need the same number of rows")
    if not sigma2_eps > 0:
        raise ValueError("sigma2_eps must be positive")
    H = np.atleast_2d(np.asarray(H, dtype=float))
    q = Z.shape[1]
    if H.shape != (q, q):
        raise DimensionMismatch(f"H has shape {H.shape}, expected ({q}, {q})")
    _, masks = _penalty_masks(D, P, spline_blocks)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (len(masks),)).copy()
    if np.any(lam < 0):
        raise ValueError("smoothing parameters must be >= 0")
    _, codes = np.unique(np.asarray(subject_ids), return_inverse=True)
    stats = GroupedStats.build(Xstar, Z, codes)
    w, U = np.linalg.eigh((H + H.T) / 2 / sigma2_eps)
    wk = _Working(stats, U * np.sqrt(np.maximum(w, 0.0)))
    pen = np.zeros(P)
    for k, mask in enumerate(masks):
        pen[mask] = lam[k]
    A = wk.A0 + np.diag(pen)
    cond = scaled_condition(A)
    if cond > MAX_CONDITION:
        raise SingularSystem(f"condition number {cond:.3g} exceeds {MAX_CONDITION:.0e}", cond)
    r, _ = wk.rhs(*stats.response_stats(y))
    cf = cho_factor(A, lower=True, check_finite=False)
    Ainv = cho_solve(cf, np.eye(P), check_finite=False)
    return PointwiseFit(
        beta_star=cho_solve(cf, r, check_finite=False),
        H=H,
        sigma2_eps=float(sigma2_eps),
        lam=lam,
        xtvx_inv=sigma2_eps * (Ainv + Ainv.T) / 2,
        xtvx=wk.A0 / sigma2_eps,
        xtvz=wk.xtvbz() / sigma2_eps,
        boundary=not np.any(w > 0),
    )


def fit_pointwise(d: FunctionalDataset, l: int, design: Design, config: PointwiseModelConfig,
                  stats: GroupedStats | None = None) -> PointwiseFit:
    """Fit the penalized mixed model at grid index ``l`` (0-based)."""
    if not 0 <= l < d.L:
        raise IndexError(f"location {l} outside 0..{d.L - 1}")
    if stats is None:
        stats = GroupedStats.build(design.Xstar, d.Z, d.subject_codes())
    (_, fit, err), = _fit_chunk((d.Y[:, [l]], [l], design, stats, config))
    if fit is None:
        raise LocationFitError(l, SingularSystem(err))
    return fit


def fit_locations(d: FunctionalDataset, design: Design, config: PointwiseModelConfig, workers: int = 1):
    """Fit every location; returns ``(fits, failures, stats)`` with ``None`` in failed slots.

    Locations are split into contiguous chunks, one per worker.  A
    location's computation does not depend on the chunking, so the output is
    identical for any ``workers``.
    """
    stats = GroupedStats.build(design.Xstar, d.Z, d.subject_codes())
    L = d.L
    workers = max(1, int(workers))
    chunks = [c for c in np.array_split(np.arange(L), min(workers, L)) if c.size]
    tasks = [(d.Y[:, c], c.tolist(), design, stats, config) for c in chunks]
    if workers == 1:
        results = [_fit_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_fit_chunk, tasks))
    fits: list = [None] * L
    failures: dict = {}
    for chunk in results:
        for l, fit, err in chunk:
            fits[l] = fit
            if err is not None:
                failures[l] = err
                log.warning("location %d failed: %s", l, err)
    return fits, failures, stats



def fit_all(d: FunctionalDataset, config: PointwiseModelConfig = PointwiseModelConfig(), workers: int = 1):
    """Step 1: pointwise fits at every location plus assembled raw estimates.

    Returns ``(raw, fits, design)`` where ``raw`` is a dict with ``beta_hat``
    (p x L), ``spline_coefs`` (per predictor K_g x L), ``gamma_hat`` (per
    predictor R_k x L), ``lambda`` (K x L), ``var_components`` and
    ``failed`` (location -> message).  Failed locations hold NaN.
    """
    design = prepare_design(d, config)
    fits, failures, stats = fit_locations(d, design, config, workers)
    raw = assemble_raw(d, design, fits, failures)
    raw["stats"] = stats
    return raw, fits, design


def assemble_raw(d: FunctionalDataset, design: Design, fits, failures) -> dict:
    L, P = d.L, design.P
    B = np.full((P, L), np.nan)
    lam = np.full((d.K, L), np.nan)
    vcs = []
    for l, f in enumerate(fits):
        if f is None:
            vcs.append((np.full((d.q, d.q), np.nan), np.nan))
            continue
        B[:, l] = f.beta_star
        lam[:, l] = f.lam
        vcs.append((f.H, f.sigma2_eps))
    coefs = [B[sl] for sl in design.spline_slices]
    gamma = [design.basis_g[k].values @ coefs[k] for k in range(d.K)]
    return {
        "beta_hat": B[: d.p],
        "spline_coefs": coefs,
        "gamma_hat": gamma,
        "lambda": lam,
        "var_components": vcs,
        "failed": dict(failures),
    }
