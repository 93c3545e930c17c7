"""Analytic and bootstrap inference for the smoothed coefficient estimates.

Analytic path: covariance of the pointwise estimates across locations
(``A1 X*^T V1^-1 Z G12 Z^T V2^-1 X* A2``), mapped to the coefficient
surface through the spline basis and pushed through the smoothers.
Bootstrap path: resample subjects, refit, take replicate moments.  Both
give pointwise bands and simultaneous bands calibrated by the
distribution of the maximum standardized deviation.
"""

from __future__ import annotations

import csv
import enum
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .covariance import (
    CovarianceField,
    estimate_G_marginal,
    estimate_G_mom,
    psd_trim,
    residualize,
    smooth_covariance,
)
from .data import FunctionalDataset
from .errors import (
    BootstrapFailure,
    DimensionMismatch,
    LfofrError,
    LocationFitError,
    NegativeVariance,
    SingularCovariance,
)
from .pipeline import FittedModel, SmoothingConfig, fit_model
from .pointwise import PointwiseModelConfig

log = logging.getLogger(__name__)

MAX_FAIL_FRACTION = 0.05
# variances this far below zero (relative to the largest) are rounding noise
VAR_RTOL = 1e-10


class BandKind(str, enum.Enum):
    POINTWISE_ANALYTIC = "PointwiseAnalytic"
    POINTWISE_BOOTSTRAP = "PointwiseBootstrap"
    CMA_ANALYTIC = "CmaAnalytic"
    CMA_BOOTSTRAP = "CmaBootstrap"


@dataclass(frozen=True)
class ConfidenceBand:
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.95
    kind: BandKind = BandKind.POINTWISE_ANALYTIC
    critical_value: float = float("nan")

    def contains(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return (self.lower <= values) & (values <= self.upper)

    def to_rows(self, grid_s, grid_u=None) -> list[dict]:
        """Long format: one row per grid point."""
        rows = []
        est = np.asarray(self.estimate)
        if est.ndim == 1:
            for l, s in enumerate(grid_s):
                rows.append({"s": s, "u": "", "estimate": est[l], "lower": self.lower[l],
                             "upper": self.upper[l], "kind": self.kind.value, "level": self.level})
        else:
            for r, u in enumerate(grid_u):
                for l, s in enumerate(grid_s):
                    rows.append({"s": s, "u": u, "estimate": est[r, l], "lower": self.lower[r, l],
                                 "upper": self.upper[r, l], "kind": self.kind.value, "level": self.level})
        return rows


def _z(level: float) -> float:
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return float(norm.ppf(0.5 + level / 2))


def _clean_variance(variance) -> np.ndarray:
    v = np.asarray(variance, dtype=float)
    if np.any(np.isnan(v)):
        raise NegativeVariance("variance contains NaN")
    scale = float(np.max(np.abs(v))) if v.size else 0.0
    if np.any(v < -VAR_RTOL * scale):
        raise NegativeVariance(f"minimum variance {float(v.min()):.3g} is negative")
    return np.maximum(v, 0.0)


def pointwise_bands(estimate, variance, level: float = 0.95,
                    kind: BandKind = BandKind.POINTWISE_ANALYTIC) -> ConfidenceBand:
    """``estimate +/- z * sqrt(variance)`` with ``z`` the normal quantile for ``level``."""
    est = np.asarray(estimate, dtype=float)
    v = _clean_variance(variance)
    if v.shape != est.shape:
        raise DimensionMismatch(f"variance shape {v.shape} vs estimate {est.shape}")
    z = _z(level)
    half = z * np.sqrt(v)
    return ConfidenceBand(est, est - half, est + half, level, kind, z)


def cma_bands(estimate, variance, q: float, level: float = 0.95,
              kind: BandKind = BandKind.CMA_ANALYTIC) -> ConfidenceBand:
    """``estimate +/- q * sqrt(variance)``.

    ``q`` is raised to the pointwise quantile if Monte Carlo error left it
    below, so the band always contains the pointwise band of the same level.
    """
    if not q >= 0:
        raise ValueError("critical value must be >= 0")
    est = np.asarray(estimate, dtype=float)
    v = _clean_variance(variance)
    q = max(float(q), _z(level))
    half = q * np.sqrt(v)
    band = ConfidenceBand(est, est - half, est + half, level, kind, q)
    assert np.all(band.lower <= est - _z(level) * np.sqrt(v) + 1e-12 * (1 + np.abs(est)))
    return band


# --------------------------------------------------------------------------
# analytic covariance
# --------------------------------------------------------------------------


def _transfer(fits) -> np.ndarray:
    """``A X*^T V^-1 Z`` per location, shape ``(L, P, n_subjects * q)``."""
    return np.stack([f.xtvx_inv @ f.xtvz for f in fits])


def _same_point(f, same_point: str = "mixed") -> np.ndarray:
    """Covariance of the estimate at one location.

    ``"mixed"`` treats the penalized spline coefficients as the random
    effects they are in the REML fit, giving ``(X*^T V^-1 X* + P)^-1``;
    ``"sandwich"`` holds them fixed, giving ``A X*^T V^-1 X* A``.
    """
    if same_point == "mixed":
        C = f.xtvx_inv
    elif same_point == "sandwich":
        C = f.xtvx_inv @ f.xtvx @ f.xtvx_inv
    else:
        raise ValueError(f"unknown same-point rule {same_point!r}")
    return (C + C.T) / 2


def beta_star_covariance(fits, G: CovarianceField, same_point: str = "mixed") -> np.ndarray:
    """Covariance of the pointwise estimates for every pair of locations, ``(L, L, P, P)``.

    Off the diagonal the random-effect covariance ``G(s1, s2)`` couples the
    locations; on the diagonal the residual variance enters as well (see
    :func:`_same_point` for ``same_point``).
    """
    if any(f is None for f in fits):
        missing = [l for l, f in enumerate(fits) if f is None]
        raise LocationFitError(missing[0], ValueError("analytic covariance needs every location"))
    L, q = len(fits), G.q
    if G.L != L:
        raise DimensionMismatch(f"G has {G.L} locations, there are {L} fits")
    T = _transfer(fits)
    P, n = T.shape[1], T.shape[2] // q
    T = T.reshape(L, P, n, q)
    C = np.zeros((L, L, P, P))
    for t in range(q):
        for v in range(q):
            TT = np.einsum("lpi,mri->lmpr", T[:, :, :, t], T[:, :, :, v], optimize=True)
            C += G.G[t, v][:, :, None, None] * TT
    for l, f in enumerate(fits):
        C[l, l] = _same_point(f, same_point)
    return C


def cov_beta_star(fits, G: CovarianceField, Xstar, Z, l1: int, l2: int, same_point: str = "mixed") -> np.ndarray:
    """Covariance between the estimates at locations ``l1`` and ``l2``."""
    Xstar = np.asarray(Xstar)
    Z = np.asarray(Z)
    Z = Z[:, None] if Z.ndim == 1 else Z
    f1, f2 = fits[l1], fits[l2]
    if f1.xtvx_inv.shape[0] != Xstar.shape[1] or f1.xtvz.shape[1] % Z.shape[1]:
        raise DimensionMismatch("fits are not conformable with X* and Z")
    if l1 == l2:
        return _same_point(f1, same_point)
    q = Z.shape[1]
    T1 = (f1.xtvx_inv @ f1.xtvz).reshape(Xstar.shape[1], -1, q)
    T2 = (f2.xtvx_inv @ f2.xtvz).reshape(Xstar.shape[1], -1, q)
    return np.einsum("pit,tv,riv->pr", T1, G.G[:, :, l1, l2], T2, optimize=True)


def var_gamma_raw(cov_g, phi, full: bool = False) -> np.ndarray:
    """Covariance of the raw surface from the spline-coefficient covariance.

    ``cov_g`` has shape ``(L, L, K_g, K_g)``; ``phi`` is the ``R x K_g`` basis.
    Returns variances ``(R, L)`` or, with ``full``, the ``LR x LR`` covariance
    of ``vec(Gamma_hat)`` (column-major, index ``l * R + r``).
    """
    phi = np.asarray(phi, dtype=float)
    cov_g = np.asarray(cov_g, dtype=float)
    L, R = cov_g.shape[0], phi.shape[0]
    if full:
        V = np.einsum("ra,lmab,sb->lrms", phi, cov_g, phi, optimize=True)
        return V.reshape(L * R, L * R)
    diag = cov_g[np.arange(L), np.arange(L)]
    return np.einsum("ra,lab,rb->rl", phi, diag, phi, optimize=True)


def propagate_smoother_variance(var_vec_gamma, S1, S2) -> np.ndarray:
    """``(S1 kron S2) V (S1 kron S2)^T`` without forming the Kronecker product."""
    S1 = np.asarray(S1, dtype=float)
    S2 = np.asarray(S2, dtype=float)
    L, R = S1.shape[0], S2.shape[0]
    V = np.asarray(var_vec_gamma, dtype=float)
    if V.shape != (L * R, L * R):
        raise DimensionMismatch(f"covariance shape {V.shape} vs smoothers ({L}, {R})")
    V4 = V.reshape(L, R, L, R)
    V4 = np.tensordot(S1, V4, axes=(1, 0))  # a r m s
    V4 = np.tensordot(S2, V4, axes=(1, 1)).transpose(1, 0, 2, 3)  # a b m s
    V4 = np.tensordot(V4, S1, axes=(2, 1)).transpose(0, 1, 3, 2)  # a b c s
    V4 = np.tensordot(V4, S2, axes=(3, 1))  # a b c d
    return V4.reshape(L * R, L * R)


def smoothed_scalar_covariance(C_beta: np.ndarray, S) -> np.ndarray:
    """``S C S^T`` for one scalar coefficient with cross-location covariance ``C``."""
    S = np.asarray(S, dtype=float)
    return S @ C_beta @ S.T


# --------------------------------------------------------------------------
# simultaneous bands
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalyticMC:
    cov: np.ndarray
    N: int = 10_000
    joint: bool = True  # False samples each point from its marginal only


@dataclass(frozen=True)
class Bootstrap:
    reps: np.ndarray  # (B, ...) replicates matching the estimate


def _max_stat_analytic(src: AnalyticMC, sd: np.ndarray, rng) -> np.ndarray:
    flat_sd = sd.ravel()
    live = flat_sd > 0
    if not live.any():
        return np.zeros(src.N)
    if not src.joint:
        return np.max(np.abs(rng.standard_normal((src.N, int(live.sum())))), axis=1)
    C = np.asarray(src.cov, dtype=float)
    if C.shape != (flat_sd.size, flat_sd.size):
        raise DimensionMismatch(f"covariance shape {C.shape} vs {flat_sd.size} points")
    if not np.all(np.isfinite(C)):
        raise SingularCovariance("covariance has non-finite entries")
    C = C[np.ix_(live, live)] / np.outer(flat_sd[live], flat_sd[live])
    w, V = np.linalg.eigh(psd_trim(C))
    if w[-1] <= 0:
        raise SingularCovariance("covariance is zero after trimming")
    root = V * np.sqrt(np.maximum(w, 0.0))
    draws = rng.standard_normal((src.N, w.size)) @ root.T
    return np.max(np.abs(draws), axis=1)


def cma_critical_value(estimate, variance, source, level: float = 0.95, seed=0) -> float:
    """``(1 - alpha)`` quantile of the maximum standardized deviation over the domain.

    ``source`` is :class:`AnalyticMC` (normal draws with the given
    covariance) or :class:`Bootstrap` (replicates centred at ``estimate``).
    """
    est = np.asarray(estimate, dtype=float)
    sd = np.sqrt(_clean_variance(variance))
    if sd.shape != est.shape:
        raise DimensionMismatch("variance and estimate shapes differ")
    if isinstance(source, AnalyticMC):
        stats = _max_stat_analytic(source, sd, np.random.default_rng(seed))
    elif isinstance(source, Bootstrap):
        reps = np.asarray(source.reps, dtype=float)
        if reps.shape[1:] != est.shape:
            raise DimensionMismatch(f"replicates shape {reps.shape[1:]} vs estimate {est.shape}")
        live = sd > 0
        dev = np.abs(reps[:, live] - est[live]) / sd[live]
        stats = dev.reshape(reps.shape[0], -1).max(axis=1) if live.any() else np.zeros(reps.shape[0])
    else:
        raise TypeError("source must be AnalyticMC or Bootstrap")
    return float(np.quantile(stats, level))


# --------------------------------------------------------------------------
# analytic pipeline
# --------------------------------------------------------------------------


@dataclass
class InferenceResult:
    """Bands for every scalar coefficient and every surface."""

    beta_pointwise: list
    beta_cma: list
    gamma_pointwise: list
    gamma_cma: list
    method: str
    beta_variance: np.ndarray = None  # (p, L)
    gamma_variance: list = field(default_factory=list)  # (R_k, L) each
    G: CovarianceField | None = None

    def save(self, directory, grid_s, grid_u) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        cols = ["s", "u", "estimate", "lower", "upper", "kind", "level"]
        groups = [(f"beta_{i}", [b] + self.beta_cma[i : i + 1], None) for i, b in enumerate(self.beta_pointwise)]
        groups += [(f"gamma_{k + 1}", [b] + self.gamma_cma[k : k + 1], grid_u[k])
                   for k, b in enumerate(self.gamma_pointwise)]
        for name, bands, gu in groups:
            path = directory / f"bands_{name}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                for band in bands:
                    for row in band.to_rows(grid_s, gu):
                        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                                    for k, v in row.items()})
            written.append(path)
        return written


def estimate_G(model: FittedModel, d: FunctionalDataset, method: str = "mom", smooth: bool = True,
               raw_outcome: bool = False) -> CovarianceField:
    """``G`` by method of moments (``"mom"``) or the marginal estimator (``"marginal"``).

    ``"raw"`` is the marginal estimator without the fixed-effect correction,
    i.e. the plain sample covariance of the outcome; it is kept for comparison.

    The diagonal is replaced by the REML ``H(s_l)``; with ``smooth`` the field
    is then sandwich-smoothed and trimmed to be positive semidefinite.
    """
    fits = model.fits
    B = np.column_stack([f.beta_star for f in fits])
    if method == "mom":
        r = d.Y if raw_outcome else residualize(d.Y, model.design.Xstar, B)
        field_ = estimate_G_mom(r, d.Z, d.subject_id, d.grid_s)
    elif method == "marginal":
        field_ = estimate_G_marginal(d.Y, model.design.Xstar, B, d.subject_id, d.grid_s, q=d.q)
    elif method == "raw":
        field_ = estimate_G_marginal(d.Y, model.design.Xstar, np.zeros_like(B), d.subject_id, d.grid_s, q=d.q)
    else:
        raise ValueError(f"unknown G estimator {method!r}")
    field_ = field_.with_diagonal([f.H for f in fits])
    if smooth:
        return smooth_covariance(field_, model.smoothing.knots_G)
    M = field_.unfold()
    return CovarianceField.fold(psd_trim(M), d.q, d.grid_s, trimmed=True)


def analytic_inference(model: FittedModel, d: FunctionalDataset, level: float = 0.95, cma_N: int = 10_000,
                       seed: int = 0, g_beta: str = "marginal", g_gamma: str = "mom", cma_joint: bool = True,
                       smooth_G: bool = True, same_point: str = "mixed", cma: bool = True) -> InferenceResult:
    """Pointwise and simultaneous analytic bands for the smoothed estimates.

    ``g_beta`` / ``g_gamma`` choose the ``G`` estimator used for the scalar
    coefficients and the surfaces.  The marginal estimator needs ``q = 1``;
    otherwise the method of moments is used for both.
    """
    if model.result.failed:
        l0 = min(model.result.failed)
        raise LocationFitError(l0, ValueError(model.result.failed[l0]))
    if d.q > 1:
        g_beta = g_gamma = "mom"  # both alternatives need a random intercept only
    Gs = {m: estimate_G(model, d, m, smooth_G) for m in {g_beta, g_gamma}}
    covs = {m: beta_star_covariance(model.fits, G, same_point) for m, G in Gs.items()}
    res = model.result
    L = d.L
    rng = np.random.SeedSequence(seed)
    streams = iter(rng.spawn(d.p + d.K))

    beta_pw, beta_cma, beta_var = [], [], np.empty((d.p, L))
    C = covs[g_beta]
    for i in range(d.p):
        Ci = C[:, :, i, i]
        Vs = smoothed_scalar_covariance(Ci, model.S_beta[i].S)
        v = np.diag(Vs).copy()
        beta_var[i] = v
        est = res.beta_smooth[i]
        beta_pw.append(pointwise_bands(est, v, level, BandKind.POINTWISE_ANALYTIC))
        stream = next(streams)
        if cma:
            q = cma_critical_value(est, v, AnalyticMC(Vs, cma_N, cma_joint), level, stream)
            beta_cma.append(cma_bands(est, v, q, level, BandKind.CMA_ANALYTIC))

    gamma_pw, gamma_cma, gamma_var = [], [], []
    C = covs[g_gamma]
    for k, sl in enumerate(model.design.spline_slices):
        phi = model.design.basis_g[k].values
        Vraw = var_gamma_raw(C[:, :, sl, sl], phi, full=True)
        Vs = propagate_smoother_variance(Vraw, model.S1[k].S, model.S2[k].S)
        R = phi.shape[0]
        v = np.diag(Vs).reshape(L, R).T.copy()
        gamma_var.append(v)
        est = res.gamma_smooth[k]
        gamma_pw.append(pointwise_bands(est, v, level, BandKind.POINTWISE_ANALYTIC))
        stream = next(streams)
        if cma:
            # reorder the covariance to match est.ravel() (row r, column l -> r * L + l)
            perm = (np.arange(L)[None, :] * R + np.arange(R)[:, None]).ravel()
            q = cma_critical_value(est, v, AnalyticMC(Vs[np.ix_(perm, perm)], cma_N, cma_joint), level, stream)
            gamma_cma.append(cma_bands(est, v, q, level, BandKind.CMA_ANALYTIC))
    return InferenceResult(beta_pw, beta_cma, gamma_pw, gamma_cma, "analytic", beta_var, gamma_var, Gs[g_gamma])


# --------------------------------------------------------------------------
# cluster bootstrap
# --------------------------------------------------------------------------


@dataclass
class BootstrapEstimates:
    B: int
    beta_reps: np.ndarray  # (B, p, L) smoothed
    gamma_reps: list  # K arrays (B, R_k, L) smoothed
    seed: int
    indices_log: list  # resampled subject ids per replicate
    beta_raw_reps: np.ndarray = None
    gamma_raw_reps: list = field(default_factory=list)
    failed: dict = field(default_factory=dict)  # replicate -> message


def resample_indices(n_subjects: int, seed: int, b: int) -> np.ndarray:
    """Subject positions drawn for replicate ``b``; the stream depends only on ``(seed, b)``."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
    return rng.integers(0, n_subjects, size=n_subjects)


def resample_dataset(d: FunctionalDataset, positions) -> FunctionalDataset:
    """All visits of the selected subjects; each draw gets a fresh subject id."""
    subjects = d.subjects
    rows_of = {s: np.flatnonzero(d.subject_id == s) for s in subjects}
    rows, ids = [], []
    for new_id, pos in enumerate(positions, start=1):
        r = rows_of[subjects[pos]]
        rows.append(r)
        ids.append(np.full(r.size, new_id))
    return d.take_rows(np.concatenate(rows), np.concatenate(ids))


def _replicate(args):
    d, positions, config, smoothing, b = args
    try:
        m = fit_model(resample_dataset(d, positions), config, smoothing)
    except (LfofrError, np.linalg.LinAlgError, ValueError) as exc:
        return b, None, repr(exc)
    if m.result.failed:
        return b, None, f"locations failed: {sorted(m.result.failed)}"
    r = m.result
    return b, (r.beta_smooth, r.gamma_smooth, r.beta_hat, r.gamma_hat), None


def _replicate_chunk(tasks):
    return [_replicate(t) for t in tasks]


def bootstrap(d: FunctionalDataset, config: PointwiseModelConfig = PointwiseModelConfig(), B: int = 300,
              seed: int = 0, smoothing: SmoothingConfig = SmoothingConfig(), workers: int = 1,
              indices=None) -> BootstrapEstimates:
    """Cluster bootstrap of the full fit-and-smooth pipeline.

    ``indices`` optionally fixes the resampled subject positions (``B x I``).
    Failed replicates are dropped with a warning; more than 5% failing is an
    error.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    I = d.n_subjects
    if indices is None:
        indices = [resample_indices(I, seed, b) for b in range(B)]
    else:
        indices = [np.asarray(ix, dtype=int) for ix in indices]
        if len(indices) != B:
            raise DimensionMismatch(f"{len(indices)} index vectors for B={B}")
    tasks = [(d, indices[b], config, smoothing, b) for b in range(B)]
    workers = max(1, int(workers))
    if workers == 1:
        out = [_replicate(t) for t in tasks]
    else:
        chunks = [tasks[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = [r for chunk in ex.map(_replicate_chunk, chunks) for r in chunk]
        out.sort(key=lambda r: r[0])
    failed = {b: msg for b, res, msg in out if res is None}
    if len(failed) > MAX_FAIL_FRACTION * B:
        raise BootstrapFailure(f"{len(failed)} of {B} bootstrap replicates failed")
    if failed:
        warnings.warn(f"{len(failed)} of {B} bootstrap replicates failed and were dropped", stacklevel=2)
    ok = [res for _, res, _ in out if res is not None]
    K = d.K
    return BootstrapEstimates(
        B=len(ok),
        beta_reps=np.stack([r[0] for r in ok]),
        gamma_reps=[np.stack([r[1][k] for r in ok]) for k in range(K)],
        seed=seed,
        indices_log=[d.subjects[ix] for ix in indices],
        beta_raw_reps=np.stack([r[2] for r in ok]),
        gamma_raw_reps=[np.stack([r[3][k] for r in ok]) for k in range(K)],
        failed=failed,
    )


def bootstrap_variance(reps: BootstrapEstimates, raw: bool = False):
    """Sample variances (divisor ``B - 1``): ``(beta_var, [gamma_var per predictor])``."""
    if reps.B < 2:
        raise ValueError("need at least two replicates")
    beta = reps.beta_raw_reps if raw else reps.beta_reps
    gammas = reps.gamma_raw_reps if raw else reps.gamma_reps
    return np.var(beta, axis=0, ddof=1), [np.var(g, axis=0, ddof=1) for g in gammas]


def bootstrap_inference(model: FittedModel, reps: BootstrapEstimates, level: float = 0.95) -> InferenceResult:
    """Pointwise bands from replicate variances and simultaneous bands from replicate maxima."""
    res = model.result
    bvar, gvar = bootstrap_variance(reps)
    beta_pw, beta_cma = [], []
    for i in range(res.p):
        est = res.beta_smooth[i]
        beta_pw.append(pointwise_bands(est, bvar[i], level, BandKind.POINTWISE_BOOTSTRAP))
        q = cma_critical_value(est, bvar[i], Bootstrap(reps.beta_reps[:, i]), level)
        beta_cma.append(cma_bands(est, bvar[i], q, level, BandKind.CMA_BOOTSTRAP))
    gamma_pw, gamma_cma = [], []
    for k in range(res.K):
        est = res.gamma_smooth[k]
        gamma_pw.append(pointwise_bands(est, gvar[k], level, BandKind.POINTWISE_BOOTSTRAP))
        q = cma_critical_value(est, gvar[k], Bootstrap(reps.gamma_reps[k]), level)
        gamma_cma.append(cma_bands(est, gvar[k], q, level, BandKind.CMA_BOOTSTRAP))
    return InferenceResult(beta_pw, beta_cma, gamma_pw, gamma_cma, "bootstrap", bvar, gvar)
