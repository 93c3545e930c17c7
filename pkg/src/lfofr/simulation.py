"""Simulation design, accuracy/coverage metrics and the study runner."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .basis import bspline_basis, trapezoid_weights
from .data import FunctionalDataset
from .errors import ConfigError, LfofrError, ShapeMismatch, StudyFailure
from .inference import analytic_inference, bootstrap, bootstrap_inference
from .pipeline import SmoothingConfig, fit_model
from .pointwise import PointwiseModelConfig

log = logging.getLogger(__name__)

# --------------------------------------------------------------------------
# true coefficient functions
# --------------------------------------------------------------------------


def beta0_true(s):
    s = np.asarray(s, dtype=float)
    return -0.15 - 0.1 * np.sin(2 * np.pi * s) - 0.1 * np.cos(2 * np.pi * s)


def beta1_true(s):
    s = np.asarray(s, dtype=float)
    return norm.pdf((s - 0.6) / 0.0225) / 20.0


def gamma_true(s, u):
    """Surface on the (u, s) grid: rows follow ``u``, columns follow ``s``."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    return 5.0 * np.sin(0.5 * np.pi * (s[None, :] + 0.5) ** 2) * np.cos(np.pi * u[:, None] + 0.5)


def _zero(s):
    return np.zeros_like(np.asarray(s, dtype=float))


BETA0 = {"default": beta0_true, "zero": _zero}
BETA1 = {"default": beta1_true, "zero": _zero}
GAMMA = {"default": gamma_true, "zero": lambda s, u: np.zeros((np.size(u), np.size(s)))}


@dataclass(frozen=True)
class SimConfig:
    I: int = 100
    J_mean: int = 5
    L: int = 25
    U: int | None = None
    SNR_B: float = 0.5
    SNR_eps: float = 1.5
    seed: int = 0
    poisson_visits: bool = False
    predictor_knots: int = 5
    beta0: str = "default"
    beta1: str = "default"
    gamma: str = "default"

    def __post_init__(self):
        for name in ("I", "J_mean", "L"):
            if getattr(self, name) < 2:
                raise ConfigError(name, "must be >= 2")
        if self.U is not None and self.U < 2:
            raise ConfigError("U", "must be >= 2")
        for name in ("SNR_B", "SNR_eps"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(name, "must be > 0")
        if self.beta0 not in BETA0:
            raise ConfigError("beta0", f"unknown function {self.beta0!r}")
        if self.beta1 not in BETA1:
            raise ConfigError("beta1", f"unknown function {self.beta1!r}")
        if self.gamma not in GAMMA:
            raise ConfigError("gamma", f"unknown function {self.gamma!r}")

    @property
    def n_u(self) -> int:
        return self.L if self.U is None else self.U

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GroundTruth:
    grid_s: np.ndarray
    grid_u: np.ndarray
    beta0: np.ndarray
    beta1: np.ndarray
    gamma: np.ndarray  # (U, L)
    psi: np.ndarray  # (L, 2) quadrature-orthonormal random-effect shapes
    re_coefs: np.ndarray = field(repr=False, default=None)  # (I, 2), already scaled
    re_curves: np.ndarray = field(repr=False, default=None)  # (I, L)
    re_scale: float = 1.0
    sigma_eps: float = float("nan")
    linear_predictor: np.ndarray = field(repr=False, default=None)  # (N, L)

    @property
    def beta(self) -> np.ndarray:
        return np.vstack([self.beta0, self.beta1])


def orthonormal_re_shapes(grid_s) -> np.ndarray:
    """Gram-Schmidt of ``1.5 - sin(2 pi s) - cos(2 pi s)`` and ``sin(4 pi s)`` under the trapezoid rule."""
    s = np.asarray(grid_s, dtype=float)
    w = trapezoid_weights(s)
    raw = np.column_stack([1.5 - np.sin(2 * np.pi * s) - np.cos(2 * np.pi * s), np.sin(4 * np.pi * s)])
    out = np.empty_like(raw)
    for k in range(raw.shape[1]):
        v = raw[:, k].copy()
        for j in range(k):
            v -= (w @ (v * out[:, j])) * out[:, j]
        out[:, k] = v / np.sqrt(w @ (v * v))
    return out


def true_coefficients(grid_s, grid_u, cfg: SimConfig | None = None) -> GroundTruth:
    cfg = cfg or SimConfig()
    grid_s = np.asarray(grid_s, dtype=float)
    grid_u = np.asarray(grid_u, dtype=float)
    return GroundTruth(
        grid_s=grid_s,
        grid_u=grid_u,
        beta0=BETA0[cfg.beta0](grid_s),
        beta1=BETA1[cfg.beta1](grid_s),
        gamma=GAMMA[cfg.gamma](grid_s, grid_u),
        psi=orthonormal_re_shapes(grid_s),
    )


def generate_dataset(cfg: SimConfig):
    """Draw one dataset. Returns ``(FunctionalDataset, GroundTruth)``."""
    rng = np.random.default_rng(cfg.seed)
    grid_s = np.linspace(0.0, 1.0, cfg.L)
    grid_u = np.linspace(0.0, 1.0, cfg.n_u)
    truth = true_coefficients(grid_s, grid_u, cfg)

    if cfg.poisson_visits:
        J = 1 + rng.poisson(cfg.J_mean - 1, size=cfg.I)
    else:
        J = np.full(cfg.I, cfg.J_mean)
    codes = np.repeat(np.arange(cfg.I), J)
    N = codes.size
    subject_id = codes + 1
    visit_id = np.concatenate([np.arange(1, j + 1) for j in J])

    x1 = rng.normal(0.0, 5.0, size=N)
    X = np.column_stack([np.ones(N), x1])
    wb = bspline_basis(grid_u, cfg.predictor_knots, 3).values
    W = rng.normal(size=(N, wb.shape[1])) @ wb.T
    c = np.column_stack([rng.normal(0.0, np.sqrt(3.0), cfg.I), rng.normal(0.0, np.sqrt(1.5), cfg.I)])
    eps = rng.normal(size=(N, cfg.L))

    wu = trapezoid_weights(grid_u)
    fixed = truth.beta0[None, :] + np.outer(x1, truth.beta1) + W @ (wu[:, None] * truth.gamma)
    re = c @ truth.psi.T
    re_obs = re[codes]
    sd_re = np.std(re_obs)
    scale = np.std(fixed) / (cfg.SNR_B * sd_re) if sd_re > 0 else 0.0
    re = re * scale
    eta = fixed + re[codes]
    sigma_eps = float(np.std(eta) / cfg.SNR_eps)
    Y = eta + sigma_eps * eps

    d = FunctionalDataset(
        subject_id=subject_id,
        visit_id=visit_id,
        Y=Y,
        X=X,
        Z=np.ones((N, 1)),
        W=(W,),
        grid_s=grid_s,
        grid_u=(grid_u,),
    )
    truth = GroundTruth(
        grid_s=grid_s,
        grid_u=grid_u,
        beta0=truth.beta0,
        beta1=truth.beta1,
        gamma=truth.gamma,
        psi=truth.psi,
        re_coefs=c * scale,
        re_curves=re,
        re_scale=float(scale),
        sigma_eps=sigma_eps,
        linear_predictor=eta,
    )
    return d, truth


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def ise_scalar(est, truth, grid) -> float:
    est, truth, grid = (np.asarray(a, dtype=float) for a in (est, truth, grid))
    if est.shape != truth.shape or est.shape != grid.shape:
        raise ShapeMismatch(f"shapes {est.shape}, {truth.shape}, {grid.shape} differ")
    return float(trapezoid_weights(grid) @ (est - truth) ** 2)


def ise_surface(est, truth, grid_u, grid_s) -> float:
    """Double trapezoid integral of the squared error; surfaces are ``(len(grid_u), len(grid_s))``."""
    est, truth = np.asarray(est, dtype=float), np.asarray(truth, dtype=float)
    shape = (np.size(grid_u), np.size(grid_s))
    if est.shape != truth.shape or est.shape != shape:
        raise ShapeMismatch(f"surface shapes {est.shape}, {truth.shape} vs grids {shape}")
    return float(trapezoid_weights(grid_u) @ (est - truth) ** 2 @ trapezoid_weights(grid_s))


def coverage(band, truth) -> float:
    """Fraction of points with ``lower <= truth <= upper`` (closed interval)."""
    truth = np.asarray(truth, dtype=float)
    lower, upper = np.asarray(band.lower), np.asarray(band.upper)
    if lower.shape != truth.shape:
        raise ShapeMismatch(f"band shape {lower.shape} vs truth {truth.shape}")
    return float(np.mean((lower <= truth) & (truth <= upper)))


# --------------------------------------------------------------------------
# study runner
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyMethods:
    analytic: bool = True
    bootstrap: bool = False
    cma: bool = True
    B: int = 300
    cma_N: int = 10_000
    level: float = 0.95
    g_beta: str = "marginal"
    g_gamma: str = "mom"
    same_point: str = "mixed"
    cma_joint: bool = True  # False samples each location from its marginal only

    def __post_init__(self):
        if self.B < 2:
            raise ConfigError("B", "must be >= 2")
        if self.cma_N < 1:
            raise ConfigError("cma_N", "must be >= 1")
        if not 0 < self.level < 1:
            raise ConfigError("level", "must lie in (0, 1)")
        for name in ("g_beta", "g_gamma"):
            if getattr(self, name) not in ("mom", "marginal", "raw"):
                raise ConfigError(name, "must be 'mom', 'marginal' or 'raw'")
        if self.same_point not in ("mixed", "sandwich"):
            raise ConfigError("same_point", "must be 'mixed' or 'sandwich'")


@dataclass(frozen=True)
class Scenario:
    name: str
    sim: SimConfig
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    model: PointwiseModelConfig = field(default_factory=PointwiseModelConfig)


METRICS = (
    "ise_beta0", "ise_beta1", "ise_gamma", "ise_gamma_raw",
    "cov_beta0_analytic", "cov_beta1_analytic", "cov_beta1_cma_analytic",
    "cov_gamma_analytic", "cov_gamma_cma_analytic",
    "cov_beta0_bootstrap", "cov_beta1_bootstrap", "cov_beta1_cma_bootstrap",
    "cov_gamma_bootstrap", "cov_gamma_cma_bootstrap",
    "seconds_fit", "seconds_analytic", "seconds_bootstrap",
)
ROW_FIELDS = ("scenario", "replicate", "seed") + METRICS + ("error",)


def replicate_seed(base_seed: int, replicate: int) -> int:
    """Seed of one replicate; shared across scenarios so that designs are paired."""
    return int(base_seed) + int(replicate)


def _run_replicate(task) -> dict:
    scenario, r, methods = task
    seed = replicate_seed(scenario.sim.seed, r)
    row = {"scenario": scenario.name, "replicate": r, "seed": seed, "error": ""}
    row.update({m: float("nan") for m in METRICS})
    try:
        d, truth = generate_dataset(replace(scenario.sim, seed=seed))
        t0 = time.perf_counter()
        model = fit_model(d, scenario.model, scenario.smoothing)
        row["seconds_fit"] = time.perf_counter() - t0
        res = model.result
        row["ise_beta0"] = ise_scalar(res.beta_smooth[0], truth.beta0, d.grid_s)
        row["ise_beta1"] = ise_scalar(res.beta_smooth[1], truth.beta1, d.grid_s)
        row["ise_gamma"] = ise_surface(res.gamma_smooth[0], truth.gamma, truth.grid_u, d.grid_s)
        row["ise_gamma_raw"] = ise_surface(np.nan_to_num(res.gamma_hat[0]), truth.gamma, truth.grid_u, d.grid_s)
        if methods.analytic:
            t0 = time.perf_counter()
            inf = analytic_inference(model, d, methods.level, methods.cma_N, seed, methods.g_beta, methods.g_gamma,
                                     cma=methods.cma, same_point=methods.same_point,
                                     cma_joint=methods.cma_joint)
            row["seconds_analytic"] = time.perf_counter() - t0
            _coverage_columns(row, inf, truth, "analytic", methods.cma)
        if methods.bootstrap:
            t0 = time.perf_counter()
            reps = bootstrap(d, scenario.model, methods.B, seed, scenario.smoothing)
            inf = bootstrap_inference(model, reps, methods.level)
            row["seconds_bootstrap"] = time.perf_counter() - t0
            _coverage_columns(row, inf, truth, "bootstrap", True)
    except (LfofrError, np.linalg.LinAlgError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _coverage_columns(row, inf, truth, tag, cma):
    row[f"cov_beta0_{tag}"] = coverage(inf.beta_pointwise[0], truth.beta0)
    row[f"cov_beta1_{tag}"] = coverage(inf.beta_pointwise[1], truth.beta1)
    row[f"cov_gamma_{tag}"] = coverage(inf.gamma_pointwise[0], truth.gamma)
    if cma:
        row[f"cov_beta1_cma_{tag}"] = coverage(inf.beta_cma[1], truth.beta1)
        row[f"cov_gamma_cma_{tag}"] = coverage(inf.gamma_cma[0], truth.gamma)


@dataclass
class StudyReport:
    rows: list
    scenarios: list

    def summary(self) -> list[dict]:
        """One row per scenario: means over successful replicates of every metric."""
        out = []
        for sc in self.scenarios:
            rows = [r for r in self.rows if r["scenario"] == sc.name]
            ok = [r for r in rows if not r["error"]]
            agg = {"scenario": sc.name, "n_ok": len(ok), "n_failed": len(rows) - len(ok)}
            for m in METRICS:
                vals = np.array([r[m] for r in ok], dtype=float)
                vals = vals[np.isfinite(vals)]
                agg[m] = float(vals.mean()) if vals.size else float("nan")
            agg["mise_gamma"] = agg["ise_gamma"]
            out.append(agg)
        return out

    def table(self) -> str:
        cols = ["scenario", "n_ok", "ise_gamma", "ise_beta1", "cov_gamma_analytic", "cov_gamma_bootstrap",
                "cov_beta1_analytic", "cov_beta1_cma_analytic", "seconds_fit"]
        lines = ["  ".join(f"{c:>22s}" for c in cols)]
        for agg in self.summary():
            cells = []
            for c in cols:
                v = agg[c]
                cells.append(f"{v:>22s}" if isinstance(v, str) else f"{v:>22d}" if isinstance(v, int) else f"{v:>22.5g}")
            lines.append("  ".join(cells))
        return "\n".join(lines)

    def write_summary(self, path) -> None:
        summary = self.summary()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(summary[0]))
            w.writeheader()
            for row in summary:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_study(scenarios, n_sims: int, methods: StudyMethods = StudyMethods(), out_dir=None,
              workers: int = 1, max_fail_fraction: float = 0.05) -> StudyReport:
    """Run ``n_sims`` replicates of every scenario.

    ``scenarios`` may hold :class:`Scenario` or bare :class:`SimConfig`
    objects.  With ``out_dir`` the per-replicate rows are appended to
    ``replicates.csv`` as they finish (so an interrupted run keeps its
    progress) and ``summary.csv`` is written at the end.
    """
    if n_sims < 1:
        raise ConfigError("n_sims", "must be >= 1")
    scenarios = [s if isinstance(s, Scenario) else Scenario(f"scenario_{k + 1}", s) for k, s in enumerate(scenarios)]
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        raise ConfigError("scenario", "names must be unique")
    tasks = [(sc, r, methods) for sc in scenarios for r in range(n_sims)]
    report = StudyReport([], scenarios)
    fh = writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "replicates.csv", "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=list(ROW_FIELDS))
        writer.writeheader()
        fh.flush()
    try:
        if workers <= 1:
            results = map(_run_replicate, tasks)
            pool = None
        else:
            pool = ProcessPoolExecutor(max_workers=workers)
            results = pool.map(_run_replicate, tasks)
        try:
            for row in results:
                report.rows.append(row)
                if writer is not None:
                    writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
                    fh.flush()
                log.info("%s replicate %d done%s", row["scenario"], row["replicate"],
                         f" ({row['error']})" if row["error"] else "")
        finally:
            if pool is not None:
                pool.shutdown(wait=False, cancel_futures=True)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        report.write_summary(out_dir / "summary.csv")
    for sc in scenarios:
        rows = [r for r in report.rows if r["scenario"] == sc.name]
        bad = [r for r in rows if r["error"]]
        if len(bad) > max_fail_fraction * len(rows):
            raise StudyFailure(f"scenario {sc.name}: {len(bad)} of {len(rows)} replicates failed "
                               f"(first: {bad[0]['error']})")
    return report
