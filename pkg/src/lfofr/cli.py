"""Command-line entry point: ``lfofr simulate | fit | infer | study``.

Every command reads an optional TOML file (``--config``); flags override
file values.  Exit codes: 0 on success, 2 for configuration errors, 1 for
I/O and runtime errors (including an interrupted run).  Progress goes to
standard error, the summary table to standard output and data to files.

Config layout::

    seed = 0
    workers = 1
    family = "gaussian"

    [simulation]   # SimConfig fields
    [model]        # PointwiseModelConfig fields
    [smoothing]    # SmoothingConfig fields
    [inference]    # StudyMethods fields
    [study]        # n_sims, max_fail_fraction

    [[scenario]]   # study only: name plus simulation/model/smoothing overrides
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import FitResult, load_dataset_dir, save_dataset
from .errors import ConfigError, LfofrError
from .pipeline import SmoothingConfig, fit_model
from .pointwise import PointwiseModelConfig
from .simulation import Scenario, SimConfig, StudyMethods, generate_dataset, run_study

log = logging.getLogger("lfofr")

WORKERS_ENV = "LFOFR_WORKERS"
TOP_KEYS = {"seed", "workers", "out", "family", "name", "description"}
SECTIONS = {
    "simulation": SimConfig,
    "model": PointwiseModelConfig,
    "smoothing": SmoothingConfig,
    "inference": StudyMethods,
}
STUDY_KEYS = {"n_sims", "max_fail_fraction"}
SCENARIO_KEYS = {"name", "simulation", "model", "smoothing"}
BUNDLED = ("table1-desk", "sample-size", "webtable1-knots")


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    model: PointwiseModelConfig = field(default_factory=PointwiseModelConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    methods: StudyMethods = field(default_factory=StudyMethods)
    scenarios: list = field(default_factory=list)
    n_sims: int = 1
    max_fail_fraction: float = 0.05
    seed: int | None = None
    workers: int | None = None
    out: str | None = None
    family: str | None = None  # None: take it from the fit or data manifest
    name: str = ""


# --------------------------------------------------------------------------
# config parsing
# --------------------------------------------------------------------------


def _check_keys(table: dict, allowed, where: str) -> None:
    if not isinstance(table, dict):
        raise ConfigError(where, "expected a table")
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}" if where else unknown[0], "unknown key")


def _build(cls, base, table: dict, where: str):
    """``replace(base, **table)`` with unknown keys and bad values reported as ConfigError."""
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(table, names, where)
    try:
        return replace(base, **table)
    except ConfigError as exc:
        raise ConfigError(f"{where}.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def parse_config(raw: dict) -> RunConfig:
    """Turn a parsed TOML document into a :class:`RunConfig`."""
    _check_keys(raw, TOP_KEYS | set(SECTIONS) | {"study", "scenario"}, "")
    cfg = RunConfig()
    cfg.sim = _build(SimConfig, cfg.sim, raw.get("simulation", {}), "simulation")
    cfg.model = _build(PointwiseModelConfig, cfg.model, raw.get("model", {}), "model")
    cfg.smoothing = _build(SmoothingConfig, cfg.smoothing, raw.get("smoothing", {}), "smoothing")
    cfg.methods = _build(StudyMethods, cfg.methods, raw.get("inference", {}), "inference")
    study = raw.get("study", {})
    _check_keys(study, STUDY_KEYS, "study")
    cfg.n_sims = _positive_int(study.get("n_sims", cfg.n_sims), "study.n_sims")
    cfg.max_fail_fraction = float(study.get("max_fail_fraction", cfg.max_fail_fraction))
    for k, sc in enumerate(raw.get("scenario", [])):
        where = f"scenario[{k}]"
        _check_keys(sc, SCENARIO_KEYS, where)
        cfg.scenarios.append(Scenario(
            name=str(sc.get("name", f"scenario_{k + 1}")),
            sim=_build(SimConfig, cfg.sim, sc.get("simulation", {}), f"{where}.simulation"),
            model=_build(PointwiseModelConfig, cfg.model, sc.get("model", {}), f"{where}.model"),
            smoothing=_build(SmoothingConfig, cfg.smoothing, sc.get("smoothing", {}), f"{where}.smoothing"),
        ))
    if "seed" in raw:
        cfg.seed = _int(raw["seed"], "seed")
    if "workers" in raw:
        cfg.workers = _positive_int(raw["workers"], "workers")
    cfg.out = raw.get("out")
    if "family" in raw:
        cfg.family = str(raw["family"]).lower()
    cfg.name = str(raw.get("name", ""))
    return cfg


def _int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    return value


def _positive_int(value, name: str) -> int:
    value = _int(value, name)
    if value < 1:
        raise ConfigError(name, "must be >= 1")
    return value


def bundled_config_path(name: str) -> Path:
    return Path(str(resources.files("lfofr") / "configs" / f"{name}.toml"))


def load_config(source) -> RunConfig:
    """Load a config by bundled name (``"table1-desk"``) or file path."""
    if source is None:
        return RunConfig()
    path = Path(source)
    if not path.exists() and str(source) in BUNDLED:
        path = bundled_config_path(str(source))
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"invalid TOML ({exc})") from None
    cfg = parse_config(raw)
    cfg.name = cfg.name or path.stem
    return cfg


def resolve_workers(flag: int | None, cfg: RunConfig) -> int:
    """Flag, then the ``LFOFR_WORKERS`` environment variable, then the config, then 1."""
    if flag is not None:
        return _positive_int(flag, "--workers")
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return _positive_int(int(env), WORKERS_ENV)
        except ValueError:
            raise ConfigError(WORKERS_ENV, f"expected an integer, got {env!r}") from None
    return cfg.workers or 1


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    """Fold command-line overrides into ``cfg``."""
    sim = {k: v for k, v in {
        "I": getattr(args, "I", None), "J_mean": getattr(args, "J", None), "L": getattr(args, "L", None),
        "U": getattr(args, "U", None), "SNR_B": getattr(args, "snr_b", None),
        "SNR_eps": getattr(args, "snr_eps", None),
    }.items() if v is not None}
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.seed is not None:
        sim["seed"] = cfg.seed
    cfg.sim = _build(SimConfig, cfg.sim, sim, "simulation")
    model = {k: v for k, v in {"K_w": getattr(args, "Kw", None), "K_g": getattr(args, "Kg", None)}.items()
             if v is not None}
    cfg.model = _build(PointwiseModelConfig, cfg.model, model, "model")
    smooth = {k: v for k, v in {
        "knots_s": getattr(args, "knots_s", None), "knots_u": getattr(args, "knots_u", None),
        "knots_beta": getattr(args, "knots_beta", None),
    }.items() if v is not None}
    cfg.smoothing = _build(SmoothingConfig, cfg.smoothing, smooth, "smoothing")
    methods = {k: v for k, v in {
        "level": getattr(args, "level", None), "B": getattr(args, "B", None),
        "cma_N": getattr(args, "cma_N", None),
    }.items() if v is not None}
    method = getattr(args, "method", None)
    if method is not None:
        methods["analytic"] = method in ("analytic", "both")
        methods["bootstrap"] = method in ("bootstrap", "both")
    cfg.methods = _build(StudyMethods, cfg.methods, methods, "inference")
    if getattr(args, "family", None):
        cfg.family = args.family.lower()
    if getattr(args, "n_sims", None) is not None:
        cfg.n_sims = _positive_int(args.n_sims, "--n-sims")
    if cfg.scenarios and (sim or model or smooth):
        cfg.scenarios = [replace(sc, sim=replace(sc.sim, **{k: v for k, v in sim.items() if k != "seed"}),
                                 model=replace(sc.model, **model), smoothing=replace(sc.smoothing, **smooth))
                         for sc in cfg.scenarios]
        if cfg.seed is not None:
            cfg.scenarios = [replace(sc, sim=replace(sc.sim, seed=cfg.seed)) for sc in cfg.scenarios]
    cfg.workers = resolve_workers(args.workers, cfg)
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _out_dir(cfg: RunConfig, default: str) -> Path:
    return Path(cfg.out or default)


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    out = _out_dir(cfg, "lfofr-data")
    log.info("simulating I=%d J=%d L=%d seed=%d", cfg.sim.I, cfg.sim.J_mean, cfg.sim.L, cfg.sim.seed)
    d, truth = generate_dataset(cfg.sim)
    save_dataset(d, out)
    np.savetxt(out / "truth_beta.csv", truth.beta, delimiter=",", fmt="%.17g")
    np.savetxt(out / "truth_gamma_1.csv", truth.gamma, delimiter=",", fmt="%.17g")
    np.savetxt(out / "truth_random_effects.csv", truth.re_curves, delimiter=",", fmt="%.17g")
    _write_json(out / "manifest.json", {
        "kind": "dataset",
        "K": d.K,
        "p": d.p,
        "q": d.q,
        "family": cfg.family or "gaussian",
        "seed": cfg.sim.seed,
        "simulation": dataclasses.asdict(cfg.sim),
        "sigma_eps": truth.sigma_eps,
        "re_scale": truth.re_scale,
        "files": ["outcomes.csv", "covariates.csv", "predictor_1.csv", "truth_beta.csv",
                  "truth_gamma_1.csv", "truth_random_effects.csv"],
    })
    print(f"wrote {d.N} rows from {d.n_subjects} subjects to {out}")
    return 0


def _data_family(data_dir: Path) -> str | None:
    path = data_dir / "manifest.json"
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh).get("family")


def _fit_summary(result: FitResult, seconds: float) -> str:
    lam = np.asarray(result.lambda_, dtype=float)
    lines = [f"{'location':>8s} {'s':>8s} " + " ".join(f"{f'lambda_{k + 1}':>12s}" for k in range(lam.shape[0]))]
    for l, s in enumerate(result.grid_s):
        lines.append(f"{l:>8d} {s:>8.4f} " + " ".join(f"{v:>12.4g}" for v in lam[:, l]))
    meta = result.meta
    lines.append("edf beta: " + ", ".join(f"{e:.2f}" for e in meta.get("edf_beta", [])))
    lines.append("edf gamma (s, u): " + ", ".join(
        f"({a:.2f}, {b:.2f})" for a, b in zip(meta.get("edf_s", []), meta.get("edf_u", []))))
    if result.failed:
        for l, why in sorted(result.failed.items()):
            lines.append(f"failed location {l}: {why}")
    else:
        lines.append("failed locations: none")
    lines.append(f"time: {seconds:.2f} s")
    return "\n".join(lines)


def cmd_fit(cfg: RunConfig, data_dir) -> int:
    data_dir = Path(data_dir)
    out = _out_dir(cfg, "lfofr-fit")
    d = load_dataset_dir(data_dir)
    log.info("fitting %d rows at %d locations with %d worker(s)", d.N, d.L, cfg.workers)
    t0 = time.perf_counter()
    model = fit_model(d, cfg.model, cfg.smoothing, cfg.workers)
    seconds = time.perf_counter() - t0
    model.result.meta["data_dir"] = str(data_dir)
    model.result.meta["family"] = cfg.family or _data_family(data_dir) or "gaussian"
    model.result.save(out)
    print(_fit_summary(model.result, seconds))
    return 1 if model.result.failed and len(model.result.failed) == d.L else 0


def _configs_from_fit(fit_dir: Path) -> tuple[PointwiseModelConfig, SmoothingConfig, str | None]:
    with open(fit_dir / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    try:
        model = PointwiseModelConfig(**manifest["model_config"])
        smoothing = SmoothingConfig(**manifest["smoothing_config"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(str(fit_dir / "manifest.json"), f"fit manifest lacks model settings ({exc})") from None
    return model, smoothing, manifest.get("family")


def cmd_infer(cfg: RunConfig, data_dir, fit_dir=None) -> int:
    from .inference import analytic_inference, bootstrap, bootstrap_inference

    data_dir = Path(data_dir)
    methods = cfg.methods
    model_cfg, smoothing, fit_family = cfg.model, cfg.smoothing, None
    if fit_dir is not None:
        model_cfg, smoothing, fit_family = _configs_from_fit(Path(fit_dir))
    family = cfg.family or fit_family or _data_family(data_dir) or "gaussian"
    if family != "gaussian":
        if methods.analytic:
            raise ConfigError("family", "analytic inference requires Gaussian outcomes")
        raise ConfigError("family", f"only the Gaussian family is implemented, got {family!r}")
    if not (methods.analytic or methods.bootstrap):
        raise ConfigError("method", "choose analytic, bootstrap or both")
    out = _out_dir(cfg, "lfofr-bands")
    seed = cfg.seed if cfg.seed is not None else 0
    d = load_dataset_dir(data_dir)
    log.info("refitting %d rows at %d locations", d.N, d.L)
    model = fit_model(d, model_cfg, smoothing, cfg.workers)
    if fit_dir is not None:
        saved = FitResult.load(fit_dir)
        if saved.beta_smooth.shape != model.result.beta_smooth.shape or not np.allclose(
                saved.beta_smooth, model.result.beta_smooth, rtol=1e-8, atol=1e-10):
            log.warning("the saved fit in %s differs from the refit; using the refit", fit_dir)
    manifest = {
        "kind": "bands",
        "data_dir": str(data_dir),
        "fit_dir": None if fit_dir is None else str(fit_dir),
        "family": family,
        "level": methods.level,
        "seed": seed,
        "methods": [],
        "model_config": dataclasses.asdict(model_cfg),
        "smoothing_config": dataclasses.asdict(smoothing),
    }
    if methods.analytic:
        t0 = time.perf_counter()
        inf = analytic_inference(model, d, methods.level, methods.cma_N, seed, methods.g_beta, methods.g_gamma,
                                 cma=methods.cma, same_point=methods.same_point,
                                 cma_joint=methods.cma_joint)
        inf.save(out / "analytic", d.grid_s, d.grid_u)
        manifest["methods"].append({"method": "analytic", "cma_N": methods.cma_N, "g_beta": methods.g_beta,
                                    "g_gamma": methods.g_gamma, "same_point": methods.same_point,
                                    "cma_joint": methods.cma_joint,
                                    "seconds": time.perf_counter() - t0})
        log.info("analytic bands written to %s", out / "analytic")
    if methods.bootstrap:
        t0 = time.perf_counter()
        reps = bootstrap(d, model_cfg, methods.B, seed, smoothing, cfg.workers)
        inf = bootstrap_inference(model, reps, methods.level)
        inf.save(out / "bootstrap", d.grid_s, d.grid_u)
        manifest["methods"].append({"method": "bootstrap", "B": methods.B, "failed_replicates": len(reps.failed),
                                    "seconds": time.perf_counter() - t0})
        log.info("bootstrap bands written to %s", out / "bootstrap")
    _write_json(out / "manifest.json", manifest)
    print(f"bands for {d.p} scalar coefficient(s) and {d.K} surface(s) written to {out}")
    return 0


def cmd_study(cfg: RunConfig) -> int:
    scenarios = cfg.scenarios or [Scenario(cfg.name or "scenario_1", cfg.sim, cfg.smoothing, cfg.model)]
    out = _out_dir(cfg, f"lfofr-study-{cfg.name or 'run'}")
    log.info("study %s: %d scenario(s) x %d replicate(s), %d worker(s)",
             cfg.name or "run", len(scenarios), cfg.n_sims, cfg.workers)
    try:
        report = run_study(scenarios, cfg.n_sims, cfg.methods, out, cfg.workers, cfg.max_fail_fraction)
    except KeyboardInterrupt:
        print(f"interrupted; finished replicates are in {out / 'replicates.csv'}", file=sys.stderr)
        raise
    _write_json(out / "manifest.json", {
        "kind": "study",
        "name": cfg.name,
        "n_sims": cfg.n_sims,
        "methods": dataclasses.asdict(cfg.methods),
        "scenarios": [{"name": sc.name, "simulation": dataclasses.asdict(sc.sim),
                       "model": dataclasses.asdict(sc.model), "smoothing": dataclasses.asdict(sc.smoothing)}
                      for sc in scenarios],
        "seeds": "replicate r of a scenario uses simulation.seed + r",
    })
    print(report.table())
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help=f"worker processes (overrides ${WORKERS_ENV})")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--Kw", type=int, help="FPCA components per predictor (default 15)")
    p.add_argument("--Kg", type=int, help="spline basis size for gamma (default 15)")
    p.add_argument("--knots-s", type=int, help="outcome-domain knots (default 10)")
    p.add_argument("--knots-u", type=int, help="predictor-domain knots (default 5)")
    p.add_argument("--knots-beta", type=int, help="knots for scalar coefficients (default 8)")


def _inference_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--level", type=float, help="confidence level (default 0.95)")
    p.add_argument("--B", type=int, help="bootstrap replicates (default 300)")
    p.add_argument("--cma-N", dest="cma_N", type=int, help="Monte Carlo draws for CMA bands (default 10000)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfofr", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a simulated dataset")
    _common(p)
    p.add_argument("--I", type=int)
    p.add_argument("--J", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--U", type=int)
    p.add_argument("--snr-b", type=float)
    p.add_argument("--snr-eps", type=float)

    p = sub.add_parser("fit", help="pointwise fits and smoothing")
    _common(p)
    _model_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("infer", help="confidence bands")
    _common(p)
    _model_flags(p)
    _inference_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--fit", help="fit directory; its stored settings are reused for the refit")
    p.add_argument("--method", choices=["analytic", "bootstrap", "both"], default="analytic")
    p.add_argument("--family", help="outcome family (only 'gaussian' is supported)")

    p = sub.add_parser("study", help="simulation study")
    _common(p)
    _model_flags(p)
    _inference_flags(p)
    p.add_argument("study", nargs="?", help=f"bundled config ({', '.join(BUNDLED)}) or path")
    p.add_argument("--n-sims", type=int)
    p.add_argument("--method", choices=["analytic", "bootstrap", "both"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        source = args.config
        if args.command == "study" and args.study is not None:
            source = args.study
        cfg = _apply_flags(load_config(source), args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "fit":
            return cmd_fit(cfg, args.data)
        if args.command == "infer":
            return cmd_infer(cfg, args.data, args.fit)
        return cmd_study(cfg)
    except ConfigError as exc:
        print(f"lfofr: config error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("lfofr: interrupted", file=sys.stderr)
        return 1
    except OSError as exc:
        name = exc.filename if exc.filename is not None else ""
        print(f"lfofr: I/O error: {exc.strerror or exc}{': ' + str(name) if name else ''}", file=sys.stderr)
        return 1
    except LfofrError as exc:
        print(f"lfofr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
