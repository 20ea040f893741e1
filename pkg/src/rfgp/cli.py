"""Command-line surface: simulate | fit | predict | estimate-effect | cv | benchmark.

Every command is a pure function of (input files, JSON config, seed):
repeated invocation writes byte-identical outputs.  Structured settings
live in the config file; flags carry only paths and the thread cap.

Exit codes: 0 success, 1 runtime or numeric failure, 2 config or schema
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .core import load_dataset, loads_dataset, save_dataset, serialize_dataset
from .covariance import CovarianceSpec
from .errors import ConfigError, NonFiniteValue, RfgpError
from .forest import Forest, ForestParams, fit_forest
from .link import CvGrid, CvOptions, SpatialParams, estimate_spatial_params
from .nngp import WorkingCorrelationSpec
from .prediction import RfgpModel, predict_batch
from .simulate import SimulationConfig, generate_dataset, run_benchmark

__all__ = ["main"]


def _log(msg: str):
    print(msg, file=sys.stderr)


def _threads(args) -> int:
    env = os.environ.get("RFGP_THREADS")
    if env is not None:
        try:
            value = int(env)
        except ValueError as exc:
            raise ConfigError(f"RFGP_THREADS must be an integer, got {env!r}") from exc
    elif args.threads is not None:
        value = args.threads
    else:
        value = os.cpu_count() or 1
    if value < 1:
        raise ConfigError("thread count must be at least 1")
    return value


def _load_config(path, allowed: set, required: set = frozenset()) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"{path}: missing config keys {sorted(missing)}")
    return obj


def _forest_params(obj: dict | None, seed: int, threads: int) -> ForestParams:
    obj = dict(obj or {})
    allowed = {"n_tree", "t_c", "m_try", "subsample_fraction", "max_leaves", "seed"}
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown forest keys {sorted(unknown)}")
    obj.setdefault("seed", seed)
    try:
        return ForestParams(
            n_tree=int(obj.get("n_tree", 100)),
            t_c=int(obj.get("t_c", 20)),
            m_try=obj.get("m_try"),
            subsample_fraction=float(obj.get("subsample_fraction", 0.5)),
            max_leaves=obj.get("max_leaves"),
            seed=int(obj["seed"]),
            n_jobs=threads,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad forest parameters: {exc}") from exc


def _cv_options(obj: dict | None, seed: int, threads: int) -> CvOptions:
    obj = dict(obj or {})
    allowed = {
        "q", "use_spatial_prediction", "prediction_k", "qmc_samples",
        "qmc_shifts", "clip_epsilon", "max_eval",
    }
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown cv keys {sorted(unknown)}")
    try:
        return CvOptions(
            q=int(obj.get("q", 10)),
            use_spatial_prediction=bool(obj.get("use_spatial_prediction", True)),
            prediction_k=int(obj.get("prediction_k", 15)),
            qmc_samples=int(obj.get("qmc_samples", 1024)),
            qmc_shifts=int(obj.get("qmc_shifts", 4)),
            clip_epsilon=float(obj.get("clip_epsilon", 1e-6)),
            max_eval=(None if obj.get("max_eval") is None else int(obj["max_eval"])),
            seed=seed,
            n_jobs=threads,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad cv options: {exc}") from exc


def _write_json(path, obj: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _write_cv_table(path, table):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["zeta", "sigma2", "phi", "fold1_err", "fold2_err", "mean_err"])
        for row in table:
            zeta = "inf" if np.isinf(row["zeta"]) else repr(float(row["zeta"]))
            writer.writerow([
                zeta, repr(float(row["sigma2"])), repr(float(row["phi"])),
                repr(float(row["fold1_err"])), repr(float(row["fold2_err"])),
                repr(float(row["mean_err"])),
            ])


def _load_points(path) -> np.ndarray:
    """Covariate-only CSV (header x1..xD); row numbers reported on errors."""
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{path}: empty file, no header row")
        cols = sorted(
            (c for c in reader.fieldnames if c.startswith("x") and c[1:].isdigit()),
            key=lambda c: int(c[1:]),
        )
        if not cols:
            raise ConfigError(f"{path}: no covariate columns (x1..xD) in header")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in cols])
            except (TypeError, ValueError) as exc:
                raise NonFiniteValue(f"{path}: unparseable value in row {lineno}") from exc
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return np.array(rows)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

_FIT_KEYS = {"seed", "forest", "cv", "grid", "fixed_params", "k_neighbors", "clip_epsilon"}


def cmd_fit(args) -> int:
    threads = _threads(args)
    cfg = _load_config(args.config, _FIT_KEYS)
    seed = int(cfg.get("seed", 0))
    train = load_dataset(args.train)
    _log(f"loaded {train.n} training rows from {args.train}")
    params = _forest_params(cfg.get("forest"), seed, threads)
    options = _cv_options(cfg.get("cv"), seed, threads)

    cv_table_path = None
    if "fixed_params" in cfg:
        spar = SpatialParams.from_json(cfg["fixed_params"])
        _log(f"using fixed spatial parameters sigma2={spar.sigma2} phi={spar.phi}")
    else:
        grid = CvGrid.from_json(cfg["grid"]) if "grid" in cfg else CvGrid()
        _log("running 2-fold cross-validation over the parameter grid")
        spar, table = estimate_spatial_params(train, grid, params, options)
        cv_table_path = args.cv_table or (os.path.splitext(args.out)[0] + "_cv.csv")
        _write_cv_table(cv_table_path, table)
        _log(f"wrote CV table to {cv_table_path}")
    _log("fitting final forest")
    wspec = WorkingCorrelationSpec(spar.zeta, q=options.q)
    forest = fit_forest(train.covariates, train.labels, train.locations, wspec, params)
    model = {
        "theta": {"sigma2": spar.sigma2, "phi": spar.phi},
        "zeta": "inf" if np.isinf(spar.zeta) else spar.zeta,
        "seed": seed,
        "forest": forest.to_json(),
        "forest_digest": forest.digest(),
        "clip_epsilon": float(cfg.get("clip_epsilon", options.clip_epsilon)),
        "train_data": serialize_dataset(train),
        "cv_table": cv_table_path,
    }
    _write_json(args.out, model)
    _log(f"wrote model to {args.out}")
    return 0


def _load_model(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid model JSON ({exc})") from exc
    for key in ("theta", "zeta", "forest", "seed", "train_data"):
        if key not in obj:
            raise ConfigError(f"{path}: model is missing key {key!r}")
    zeta = obj["zeta"]
    spar = SpatialParams(
        float(obj["theta"]["sigma2"]), float(obj["theta"]["phi"]),
        np.inf if zeta in ("inf", None) else float(zeta),
    )
    forest = Forest.from_json(obj["forest"])
    train = loads_dataset(obj["train_data"])
    clip_epsilon = float(obj.get("clip_epsilon", 1e-6))
    cov = CovarianceSpec("exponential", spar.sigma2, spar.phi) if spar.sigma2 > 0 else None
    model = RfgpModel(forest, spar, cov, clip_epsilon=clip_epsilon)
    return model, train, int(obj["seed"])


_PREDICT_KEYS = {"k_neighbors", "qmc_samples", "qmc_shifts", "seed"}


def cmd_predict(args) -> int:
    threads = _threads(args)
    cfg = _load_config(args.config, _PREDICT_KEYS) if args.config else {}
    model, train, model_seed = _load_model(args.model)
    _log(f"loaded model from {args.model} ({len(model.forest.trees)} trees)")
    with open(args.test, "r", encoding="utf-8") as fh:
        text = fh.read()
    header_only = len([ln for ln in text.splitlines() if ln.strip()]) <= 1
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["p_hat", "se", "y_hat"])
        if header_only:
            _log("empty test file: wrote header-only output")
            return 0
        test = loads_dataset(text)
        _log(f"predicting {test.n} points")
        p, se = predict_batch(
            model, train, test.covariates, test.locations,
            k=int(cfg.get("k_neighbors", 30)),
            qmc={
                "samples": int(cfg.get("qmc_samples", 4096)),
                "shifts": int(cfg.get("qmc_shifts", 8)),
                "seed": int(cfg.get("seed", model_seed)),
            },
            n_jobs=threads,
        )
        for pi, si in zip(p, se):
            writer.writerow([repr(float(pi)), repr(float(si)), int(pi >= 0.5)])
    _log(f"wrote predictions to {args.out}")
    return 0


def cmd_estimate_effect(args) -> int:
    model, _, _ = _load_model(args.model)
    points = _load_points(args.points)
    _log(f"estimating covariate effect at {points.shape[0]} points")
    estimator = model.effect_estimator
    m_hat = estimator.effect_batch(points)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["m_hat"])
        for v in m_hat:
            writer.writerow([repr(float(v))])
    _log(f"wrote effects to {args.out}")
    return 0


_CV_KEYS = {"seed", "forest", "cv", "grid"}


def cmd_cv(args) -> int:
    threads = _threads(args)
    cfg = _load_config(args.config, _CV_KEYS)
    seed = int(cfg.get("seed", 0))
    train = load_dataset(args.train)
    params = _forest_params(cfg.get("forest"), seed, threads)
    options = _cv_options(cfg.get("cv"), seed, threads)
    grid = CvGrid.from_json(cfg["grid"]) if "grid" in cfg else CvGrid()
    _log(f"cross-validating over {len(grid.zetas) * len(grid.sigma2s) * len(grid.fs)} cells")
    spar, table = estimate_spatial_params(train, grid, params, options)
    _write_cv_table(args.out, table)
    _log(
        f"selected sigma2={spar.sigma2} phi={spar.phi} "
        f"zeta={'inf' if np.isinf(spar.zeta) else spar.zeta}; table at {args.out}"
    )
    return 0


_SIMULATE_KEYS = {"n", "sigma2", "f", "seed", "test_fraction", "replicates"}


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config, _SIMULATE_KEYS, required={"n"})
    try:
        config = SimulationConfig(
            n=int(cfg["n"]),
            sigma2=float(cfg.get("sigma2", 1.0)),
            f=float(cfg.get("f", 0.75)),
            seed=int(cfg.get("seed", 0)),
            test_fraction=float(cfg.get("test_fraction", 0.2)),
            replicates=int(cfg.get("replicates", 1)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad simulation config: {exc}") from exc
    os.makedirs(args.out_dir, exist_ok=True)
    for r in range(config.replicates):
        rep = SimulationConfig(
            n=config.n, sigma2=config.sigma2, f=config.f, seed=config.seed + r,
            test_fraction=config.test_fraction, replicates=1,
        )
        train, test, train_truth, test_truth = generate_dataset(rep)
        save_dataset(train, os.path.join(args.out_dir, f"rep{r:03d}_train.csv"))
        save_dataset(test, os.path.join(args.out_dir, f"rep{r:03d}_test.csv"))
        for name, ds, truth in (("train", train, train_truth), ("test", test, test_truth)):
            path = os.path.join(args.out_dir, f"rep{r:03d}_{name}_truth.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["m", "w", "p", "marginal_p"])
                for i in range(ds.n):
                    writer.writerow([
                        repr(float(truth.m_values[i])), repr(float(truth.w_values[i])),
                        repr(float(truth.p_values[i])), repr(float(truth.marginal_p[i])),
                    ])
        _log(f"replicate {r}: wrote train ({train.n}) and test ({test.n}) rows")
    return 0


_BENCHMARK_KEYS = {"configs", "methods", "forest", "cv", "grid", "n_probe", "seed"}


def cmd_benchmark(args) -> int:
    threads = _threads(args)
    cfg = _load_config(args.config, _BENCHMARK_KEYS, required={"configs", "methods"})
    seed = int(cfg.get("seed", 0))
    try:
        configs = [
            SimulationConfig(
                n=int(c["n"]), sigma2=float(c.get("sigma2", 1.0)),
                f=float(c.get("f", 0.75)), seed=int(c.get("seed", seed)),
                test_fraction=float(c.get("test_fraction", 0.2)),
                replicates=int(c.get("replicates", 1)),
            )
            for c in cfg["configs"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad benchmark configs: {exc}") from exc
    methods = list(cfg["methods"])
    params = _forest_params(cfg.get("forest"), seed, 1)
    options = _cv_options(cfg.get("cv"), seed, 1)
    grid = CvGrid.from_json(cfg["grid"]) if "grid" in cfg else None
    _log(f"benchmarking {len(configs)} configurations x methods {methods}")
    long_path, summary_path = run_benchmark(
        configs, methods, args.out_dir, params=params, grid=grid, options=options,
        n_probe=int(cfg.get("n_probe", 2000)), n_jobs=threads,
    )
    _log(f"wrote {long_path} and {summary_path}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfgp",
        description="Random forests with GLS splitting for binary geospatial data.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="worker-pool cap (RFGP_THREADS overrides)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic replicates")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="cross-validate (or use fixed params) and fit")
    p.add_argument("--train", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cv-table", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="spatial prediction at new points")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("estimate-effect", help="covariate-effect estimates m_hat(x)")
    p.add_argument("--model", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate_effect)

    p = sub.add_parser("cv", help="emit the full cross-validation table")
    p.add_argument("--train", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("benchmark", help="simulation study over methods and settings")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage already; normalize other codes
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return 2
    except (RfgpError, OSError, np.linalg.LinAlgError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
