"""Steps 1 and 2 together: pointwise fits followed by smoothing."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import FitResult, FunctionalDataset, validate
from .errors import ConfigError
from .pointwise import Design, GroupedStats, PointwiseModelConfig, fit_all
from .smoothing import SmootherMatrix, psmooth_matrix, sandwich_smooth


@dataclass(frozen=True)
class SmoothingConfig:
    knots_beta: int = 8
    knots_s: int = 10
    knots_u: int = 5
    knots_G: int = 10
    gcv: str = "joint"  # or "marginal"

    def __post_init__(self):
        for name in ("knots_beta", "knots_s", "knots_u", "knots_G"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.gcv not in ("joint", "marginal"):
            raise ConfigError("gcv", "must be 'joint' or 'marginal'")


@dataclass
class FittedModel:
    result: FitResult
    fits: list
    design: Design
    stats: GroupedStats
    S_beta: list  # one SmootherMatrix per scalar coefficient
    S1: list  # response-domain smoother per functional predictor
    S2: list  # predictor-domain smoother per functional predictor
    config: PointwiseModelConfig = field(default_factory=PointwiseModelConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    seconds: float = 0.0

    @property
    def complete(self) -> bool:
        return not self.result.failed


def _fill_failed(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Linear interpolation over ``grid`` across NaN columns (only used before smoothing)."""
    out = np.array(values, dtype=float)
    bad = np.isnan(out).any(axis=0)
    if not bad.any():
        return out
    if bad.all():
        raise ValueError("every location failed")
    for row in out:
        row[bad] = np.interp(grid[bad], grid[~bad], row[~bad])
    return out


def smooth_estimates(beta_hat, gamma_hat, grid_s, grid_u, smoothing: SmoothingConfig):
    """Smooth raw estimates; returns ``(beta_smooth, gamma_smooth, S_beta, S1, S2)``."""
    beta_hat = _fill_failed(beta_hat, grid_s)
    S_beta: list[SmootherMatrix] = []
    beta_smooth = np.empty_like(beta_hat)
    for i, row in enumerate(beta_hat):
        sm = psmooth_matrix(grid_s, smoothing.knots_beta, row)
        S_beta.append(sm)
        beta_smooth[i] = sm.S @ row
    gamma_smooth, S1, S2 = [], [], []
    for k, g in enumerate(gamma_hat):
        g = _fill_failed(g, grid_s)
        gt, s1, s2 = sandwich_smooth(g, grid_u[k], grid_s, smoothing.knots_u, smoothing.knots_s,
                                     gcv=smoothing.gcv)
        gamma_smooth.append(gt)
        S1.append(s1)
        S2.append(s2)
    return beta_smooth, gamma_smooth, S_beta, S1, S2


def fit_model(d: FunctionalDataset, config: PointwiseModelConfig = PointwiseModelConfig(),
              smoothing: SmoothingConfig = SmoothingConfig(), workers: int = 1) -> FittedModel:
    """Pointwise fits at every location, then P-spline and sandwich smoothing.

    Failed locations are reported in ``result.failed``; their raw values are
    NaN and are bridged by linear interpolation before smoothing.
    """
    validate(d)
    t0 = time.perf_counter()
    raw, fits, design = fit_all(d, config, workers)
    t_fit = time.perf_counter() - t0
    beta_s, gamma_s, S_beta, S1, S2 = smooth_estimates(raw["beta_hat"], raw["gamma_hat"], d.grid_s, d.grid_u, smoothing)
    result = FitResult(
        beta_hat=raw["beta_hat"],
        beta_smooth=beta_s,
        gamma_hat=raw["gamma_hat"],
        gamma_smooth=gamma_s,
        lambda_=raw["lambda"],
        var_components=raw["var_components"],
        spline_coefs=raw["spline_coefs"],
        grid_s=d.grid_s,
        grid_u=list(d.grid_u),
        failed=raw["failed"],
        meta={
            "K_w": [f.n_components for f in design.fpca],
            "K_g": config.K_g,
            "knots_beta": smoothing.knots_beta,
            "knots_s": smoothing.knots_s,
            "knots_u": smoothing.knots_u,
            "gcv": smoothing.gcv,
            "edf_beta": [s.edf for s in S_beta],
            "edf_s": [s.edf for s in S1],
            "edf_u": [s.edf for s in S2],
            "family": "gaussian",
            "model_config": asdict(config),
            "smoothing_config": asdict(smoothing),
        },
    )
    return FittedModel(result, fits, design, raw["stats"], S_beta, S1, S2, config, smoothing, t_fit)
