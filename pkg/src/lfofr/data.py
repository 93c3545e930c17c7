"""Containers, validation and CSV serialization for longitudinal functional data.

File layout (one row per subject visit, UTF-8, header row required)::

    outcomes.csv     subject_id, visit_id, y_<s_1>, ..., y_<s_L>
    covariates.csv   subject_id, visit_id, x_1, ..., x_p, z_1, ..., z_q
    predictor_k.csv  subject_id, visit_id, w_<u_1>, ..., w_<u_R>

Grid values are read from the column suffixes when they are not the plain
indices ``1..L``; otherwise from an optional sidecar file (one real per
line), otherwise an equally spaced grid on [0, 1] is assumed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .basis import check_grid
from .errors import (
    DimensionMismatch,
    MismatchedRows,
    MissingIntercept,
    NonFiniteValue,
    TooFewGridPoints,
)

MIN_GRID_POINTS = 4


@dataclass(frozen=True)
class FunctionalDataset:
    subject_id: np.ndarray
    visit_id: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    W: tuple
    grid_s: np.ndarray
    grid_u: tuple

    def __post_init__(self):
        object.__setattr__(self, "subject_id", np.asarray(self.subject_id, dtype=np.int64))
        object.__setattr__(self, "visit_id", np.asarray(self.visit_id, dtype=np.int64))
        for name in ("Y", "X", "Z", "grid_s"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "W", tuple(np.asarray(w, dtype=float) for w in self.W))
        object.__setattr__(self, "grid_u", tuple(np.asarray(g, dtype=float) for g in self.grid_u))

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def L(self) -> int:
        return self.grid_s.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def K(self) -> int:
        return len(self.W)

    @property
    def subjects(self) -> np.ndarray:
        """Distinct subject ids in order of first appearance."""
        _, first = np.unique(self.subject_id, return_index=True)
        return self.subject_id[np.sort(first)]

    @property
    def n_subjects(self) -> int:
        return np.unique(self.subject_id).size

    def subject_codes(self) -> np.ndarray:
        """Row -> 0-based subject index following :attr:`subjects` order."""
        order = {sid: k for k, sid in enumerate(self.subjects)}
        return np.array([order[s] for s in self.subject_id], dtype=np.int64)

    def take_rows(self, rows, subject_id=None) -> "FunctionalDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return FunctionalDataset(
            subject_id=self.subject_id[rows] if subject_id is None else subject_id,
            visit_id=self.visit_id[rows],
            Y=self.Y[rows],
            X=self.X[rows],
            Z=self.Z[rows],
            W=tuple(w[rows] for w in self.W),
            grid_s=self.grid_s,
            grid_u=self.grid_u,
        )

    def with_outcome(self, Y) -> "FunctionalDataset":
        return FunctionalDataset(
            self.subject_id, self.visit_id, Y, self.X, self.Z, self.W, self.grid_s, self.grid_u
        )


def _check_finite(a: np.ndarray, what: str) -> None:
    bad = np.argwhere(~np.isfinite(a))
    if bad.size:
        r, c = bad[0]
        raise NonFiniteValue(what, int(r), int(c))


def validate(d: FunctionalDataset) -> None:
    """Raise the first violated dataset invariant; return ``None`` otherwise."""
    N = d.Y.shape[0]
    if d.Y.ndim != 2 or d.X.ndim != 2 or d.Z.ndim != 2:
        raise DimensionMismatch("Y, X and Z must be two-dimensional")
    for name, arr in (("subject_id", d.subject_id), ("visit_id", d.visit_id),
                      ("X", d.X), ("Z", d.Z), *((f"W[{k}]", w) for k, w in enumerate(d.W))):
        if arr.shape[0] != N:
            raise DimensionMismatch(f"{name} has {arr.shape[0]} rows, expected {N}")
    if d.X.shape[1] == 0:
        raise MissingIntercept("X has no columns; an intercept column is required")
    if not np.any(np.all(d.X == 1.0, axis=0)):
        raise MissingIntercept("X has no all-ones intercept column")
    check_grid(d.grid_s, "grid_s")
    if d.grid_s.size < MIN_GRID_POINTS:
        raise TooFewGridPoints(f"grid_s has {d.grid_s.size} points, need >= {MIN_GRID_POINTS}")
    if d.Y.shape[1] != d.grid_s.size:
        raise DimensionMismatch("Y columns do not match grid_s")
    if len(d.grid_u) != len(d.W):
        raise DimensionMismatch("one grid_u entry is required per functional predictor")
    for k, (w, g) in enumerate(zip(d.W, d.grid_u)):
        check_grid(g, f"grid_u[{k}]")
        if g.size < MIN_GRID_POINTS:
            raise TooFewGridPoints(f"grid_u[{k}] has {g.size} points, need >= {MIN_GRID_POINTS}")
        if w.ndim != 2 or w.shape[1] != g.size:
            raise DimensionMismatch(f"W[{k}] columns do not match grid_u[{k}]")
    _check_finite(d.Y, "Y")
    _check_finite(d.X, "X")
    _check_finite(d.Z, "Z")
    for k, w in enumerate(d.W):
        _check_finite(w, f"W[{k}]")
    keys = set(zip(d.subject_id.tolist(), d.visit_id.tolist()))
    if len(keys) != N:
        raise MismatchedRows("duplicate (subject_id, visit_id) rows")


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSchema:
    p: int
    q: int = 1
    y_prefix: str = "y_"
    x_prefix: str = "x_"
    z_prefix: str = "z_"
    w_prefix: str = "w_"
    grid_s_path: str | None = None
    grid_u_paths: Sequence[str | None] = field(default_factory=tuple)


def _fmt(x: float) -> str:
    return repr(float(x))


def _grid_header(prefix: str, grid: np.ndarray) -> list[str]:
    return [f"{prefix}{_fmt(g)}" for g in grid]


def _write_block(path: Path, ids, visits, header: list[str], values: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "visit_id", *header])
        for sid, vid, row in zip(ids, visits, values):
            w.writerow([int(sid), int(vid), *(_fmt(v) for v in row)])


def _read_block(path: Path, what: str) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MismatchedRows(f"{path}: missing header row")
    header = rows[0]
    if header[:2] != ["subject_id", "visit_id"]:
        raise MismatchedRows(f"{path}: first columns must be subject_id, visit_id")
    body = rows[1:]
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    visits = np.array([int(r[1]) for r in body], dtype=np.int64)
    ncol = len(header) - 2
    values = np.empty((len(body), ncol))
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise MismatchedRows(f"{path}: row {i + 1} has {len(r)} fields, expected {len(header)}")
        for j, cell in enumerate(r[2:]):
            try:
                v = float(cell)
            except ValueError:
                v = np.nan
            if not np.isfinite(v):
                raise NonFiniteValue(what, i, header[j + 2])
            values[i, j] = v
    return header[2:], ids, visits, values


def _grid_from_header(cols: list[str], prefix: str, sidecar: str | None) -> np.ndarray:
    if sidecar is not None:
        return np.loadtxt(sidecar, dtype=float, ndmin=1)
    suffixes = [c[len(prefix):] if c.startswith(prefix) else c for c in cols]
    if suffixes == [str(k) for k in range(1, len(cols) + 1)]:
        return np.linspace(0.0, 1.0, len(cols))
    try:
        return np.array([float(s) for s in suffixes])
    except ValueError:
        return np.linspace(0.0, 1.0, len(cols))


def _align(ref_ids, ref_visits, ids, visits, path) -> np.ndarray:
    pos = {(a, b): k for k, (a, b) in enumerate(zip(ids.tolist(), visits.tolist()))}
    ref = list(zip(ref_ids.tolist(), ref_visits.tolist()))
    if len(pos) != len(ids) or set(pos) != set(ref):
        raise MismatchedRows(f"{path}: (subject_id, visit_id) keys differ from the outcome file")
    return np.array([pos[k] for k in ref], dtype=np.int64)


def load_dataset(outcome_path, covariate_path, predictor_paths, schema: DatasetSchema) -> FunctionalDataset:
    outcome_path = Path(outcome_path)
    ycols, ids, visits, Y = _read_block(outcome_path, "Y")
    grid_s = _grid_from_header(ycols, schema.y_prefix, schema.grid_s_path)

    ccols, cids, cvis, C = _read_block(Path(covariate_path), "covariates")
    if len(ccols) != schema.p + schema.q:
        raise MismatchedRows(
            f"{covariate_path}: expected {schema.p} x and {schema.q} z columns, found {len(ccols)}"
        )
    order = _align(ids, visits, cids, cvis, covariate_path)
    C = C[order]

    W, grid_u = [], []
    sidecars = list(schema.grid_u_paths) + [None] * len(predictor_paths)
    for k, path in enumerate(predictor_paths):
        wcols, wids, wvis, Wk = _read_block(Path(path), f"W[{k}]")
        order = _align(ids, visits, wids, wvis, path)
        W.append(Wk[order])
        grid_u.append(_grid_from_header(wcols, schema.w_prefix, sidecars[k]))

    d = FunctionalDataset(
        subject_id=ids, visit_id=visits, Y=Y, X=C[:, : schema.p], Z=C[:, schema.p :],
        W=tuple(W), grid_s=grid_s, grid_u=tuple(grid_u),
    )
    validate(d)
    return d


def dataset_paths(directory, K: int) -> tuple[Path, Path, list[Path]]:
    directory = Path(directory)
    return (
        directory / "outcomes.csv",
        directory / "covariates.csv",
        [directory / f"predictor_{k + 1}.csv" for k in range(K)],
    )


def save_dataset(d: FunctionalDataset, directory) -> DatasetSchema:
    """Write ``d`` as CSV files under ``directory``; returns the schema to reload it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out, cov, preds = dataset_paths(directory, d.K)
    _write_block(out, d.subject_id, d.visit_id, _grid_header("y_", d.grid_s), d.Y)
    header = [f"x_{j + 1}" for j in range(d.p)] + [f"z_{j + 1}" for j in range(d.q)]
    _write_block(cov, d.subject_id, d.visit_id, header, np.hstack([d.X, d.Z]))
    for k, path in enumerate(preds):
        _write_block(path, d.subject_id, d.visit_id, _grid_header("w_", d.grid_u[k]), d.W[k])
    return DatasetSchema(p=d.p, q=d.q)


def load_dataset_dir(directory, schema: DatasetSchema | None = None) -> FunctionalDataset:
    """Load a directory written by :func:`save_dataset`.

    The number of predictors comes from ``manifest.json`` when present and
    otherwise from the ``predictor_*.csv`` files found; ``p`` and ``q`` come
    from the covariate header.
    """
    directory = Path(directory)
    manifest = directory / "manifest.json"
    K = None
    if manifest.exists():
        with open(manifest, encoding="utf-8") as fh:
            K = json.load(fh).get("K")
    if K is None:
        preds = sorted(directory.glob("predictor_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
        if not preds:
            preds = dataset_paths(directory, 1)[2]
    else:
        preds = dataset_paths(directory, int(K))[2]
    for path in [directory / "outcomes.csv", directory / "covariates.csv", *preds]:
        if not path.exists():
            raise FileNotFoundError(2, "missing data file", str(path))
    if schema is None:
        with open(directory / "covariates.csv", encoding="utf-8") as fh:
            header = next(csv.reader(fh))
        p = sum(c.startswith("x_") for c in header)
        q = sum(c.startswith("z_") for c in header)
        schema = DatasetSchema(p=p, q=q)
    return load_dataset(directory / "outcomes.csv", directory / "covariates.csv", preds, schema)


# --------------------------------------------------------------------------
# fit results
# --------------------------------------------------------------------------


@dataclass
class FitResult:
    beta_hat: np.ndarray
    beta_smooth: np.ndarray
    gamma_hat: list
    gamma_smooth: list
    lambda_: np.ndarray
    var_components: list
    spline_coefs: list
    grid_s: np.ndarray
    grid_u: list
    failed: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.beta_hat.shape[0]

    @property
    def K(self) -> int:
        return len(self.gamma_hat)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savetxt(directory / "beta_hat.csv", self.beta_hat, delimiter=",", fmt="%.17g")
        np.savetxt(directory / "beta_smooth.csv", self.beta_smooth, delimiter=",", fmt="%.17g")
        np.savetxt(directory / "lambda.csv", np.atleast_2d(self.lambda_), delimiter=",", fmt="%.17g")
        vc = np.array([[np.ravel(h)[0] if np.size(h) == 1 else np.nan, s] for h, s in self.var_components])
        np.savetxt(directory / "var_components.csv", vc, delimiter=",", fmt="%.17g",
                   header="H,sigma2_eps", comments="")
        np.savetxt(directory / "grid_s.csv", self.grid_s, fmt="%.17g")
        for k in range(self.K):
            np.savetxt(directory / f"gamma_hat_{k + 1}.csv", self.gamma_hat[k], delimiter=",", fmt="%.17g")
            np.savetxt(directory / f"gamma_smooth_{k + 1}.csv", self.gamma_smooth[k], delimiter=",", fmt="%.17g")
            np.savetxt(directory / f"spline_coefs_{k + 1}.csv", self.spline_coefs[k], delimiter=",", fmt="%.17g")
            np.savetxt(directory / f"grid_u_{k + 1}.csv", self.grid_u[k], fmt="%.17g")
        manifest = {
            "p": self.p,
            "K": self.K,
            "L": int(self.grid_s.size),
            "R": [int(g.size) for g in self.grid_u],
            "failed_locations": {str(k): v for k, v in self.failed.items()},
            **self.meta,
        }
        with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory) -> "FitResult":
        directory = Path(directory)
        with open(directory / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        K = manifest["K"]

        def mat(name):
            return np.atleast_2d(np.loadtxt(directory / name, delimiter=",", ndmin=2))

        vc = np.loadtxt(directory / "var_components.csv", delimiter=",", skiprows=1, ndmin=2)
        meta = {k: v for k, v in manifest.items() if k not in {"p", "K", "L", "R", "failed_locations"}}
        return cls(
            beta_hat=mat("beta_hat.csv"),
            beta_smooth=mat("beta_smooth.csv"),
            gamma_hat=[mat(f"gamma_hat_{k + 1}.csv") for k in range(K)],
            gamma_smooth=[mat(f"gamma_smooth_{k + 1}.csv") for k in range(K)],
            lambda_=mat("lambda.csv"),
            var_components=[(np.array([[h]]), s) for h, s in vc],
            spline_coefs=[mat(f"spline_coefs_{k + 1}.csv") for k in range(K)],
            grid_s=np.loadtxt(directory / "grid_s.csv", ndmin=1),
            grid_u=[np.loadtxt(directory / f"grid_u_{k + 1}.csv", ndmin=1) for k in range(K)],
            failed={int(k): v for k, v in manifest.get("failed_locations", {}).items()},
            meta=meta,
        )
