"""Command-line interface: ``edgeless {generate,fit,sweep,evaluate,impute}``.

Configuration files are flat JSON objects whose keys are field names of
:class:`Hyperparameters`, :class:`FitConfig`, :class:`SweepSpec` or
:class:`GeneratorConfig`. Exit codes: 0 ok, 2 validation error, 3 runtime
failure; failures print a JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .evaluation import EvaluationReport, holdout_protocol, impute, nmi
from .inference import FitConfig, InferenceError, fit
from .model import Dataset, Hyperparameters, ValidationError
from .sweep import SweepSpec, log_grid, run_sweep
from .synthesis import GeneratorConfig, generate

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


def _field_names(cls) -> set:
    return {f.name for f in fields(cls)}


def split_config(data: dict, *classes) -> list:
    """Route the keys of a flat config to the dataclasses that own them."""
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    known = set().union(*(_field_names(c) for c in classes))
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    return [{k: v for k, v in data.items() if k in _field_names(c)} for c in classes]


def _build(cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{cls.__name__}: {exc}") from None


def _tuple_fields(cls, kwargs: dict) -> dict:
    # JSON has no tuples; restore them where the dataclass default is one
    out = dict(kwargs)
    for f in fields(cls):
        if f.name in out and isinstance(f.default, tuple) and isinstance(out[f.name], list):
            out[f.name] = tuple(out[f.name])
    return out


class Stages:
    """Wall-clock per named stage."""

    def __init__(self):
        self.seconds = {}

    def __call__(self, name):
        stages = self

        class _Timer:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                stages.seconds[name] = stages.seconds.get(name, 0.0) + time.perf_counter() - self.start

        return _Timer()


def _jobs(args) -> int:
    if args.jobs is not None:
        jobs = args.jobs
    else:
        env = os.environ.get("LC_THREADS")
        try:
            jobs = int(env) if env else 1
        except ValueError:
            raise ValidationError(f"LC_THREADS must be an integer, got {env!r}") from None
    if jobs < 1:
        raise ValidationError("jobs must be at least 1")
    return jobs


def _load_dataset(args) -> Dataset:
    return io.ingest(args.input, log_returns=args.log_returns, standardize=args.standardize, transpose=args.transpose)


def _fit_settings(args, config: dict):
    hyper_kw, fit_kw = split_config(config, Hyperparameters, FitConfig)
    fit_kw = _tuple_fields(FitConfig, fit_kw)
    if args.seed is not None:
        fit_kw["seed"] = args.seed
    fit_kw["jobs"] = _jobs(args)
    if "p" not in hyper_kw or "k_max" not in hyper_kw:
        raise ValidationError("config must specify p and k_max")
    return _build(Hyperparameters, hyper_kw), _build(FitConfig, fit_kw)


def write_fit_outputs(out: Path, dataset: Dataset, result) -> None:
    """labels.csv, posterior.json and elbo_trace.csv for one fitted model."""
    out.mkdir(parents=True, exist_ok=True)
    io.write_labels(out / "labels.csv", dataset.series_ids, result.labels)
    io.dump_json(
        out / "posterior.json",
        {
            "series_ids": list(dataset.series_ids),
            "hyperparameters": asdict(result.hyper),
            "elbo": result.elbo,
            "k_hat": result.k_hat,
            "converged": result.converged,
            "restart_index": result.restart_index,
            "restart_elbos": [float(v) for v in result.restart_elbos],
            "restart_k_hats": [int(v) for v in result.restart_k_hats],
            "failed_restarts": [list(map(str, f)) for f in result.failed_restarts],
            "posterior": io.state_to_dict(result.state),
        },
    )
    io.write_table(out / "elbo_trace.csv", [{"sweep": k, "elbo": float(v)} for k, v in enumerate(result.elbo_trace)])


# -- commands -------------------------------------------------------------------


def cmd_generate(args, stages: Stages, manifest: io.RunManifest) -> None:
    config = io.load_json(args.config) if args.config else {}
    manifest.add_inputs(args.config)
    (gen_kw,) = split_config(config, GeneratorConfig)
    gen_kw = _tuple_fields(GeneratorConfig, gen_kw)
    if args.seed is not None:
        gen_kw["seed"] = args.seed
    gen = _build(GeneratorConfig, gen_kw)
    manifest.config = asdict(gen)
    manifest.seed = gen.seed
    with stages("generate"):
        inst = generate(gen)
    with stages("write"):
        io.write_csv(args.output_dir / "data.csv", inst.dataset)
        io.dump_json(
            args.output_dir / "truth.json",
            {
                "config": asdict(gen),
                "series_ids": list(inst.dataset.series_ids),
                "labels": inst.true_labels.tolist(),
                "A": inst.true_A.tolist(),
                "mu": inst.true_mu.tolist(),
                "Lambda": inst.true_Lambda.tolist(),
                "x": inst.true_x.tolist(),
                "tau": inst.true_tau.tolist(),
            },
        )


def cmd_fit(args, stages: Stages, manifest: io.RunManifest) -> None:
    manifest.add_inputs(args.input, args.config)
    with stages("ingest"):
        dataset = _load_dataset(args)
        hyper, config = _fit_settings(args, io.load_json(args.config))
    manifest.config = {**asdict(hyper), **asdict(config), **_ingest_options(args)}
    manifest.seed = config.seed
    with stages("fit"):
        result = fit(dataset, hyper, config)
    with stages("write"):
        write_fit_outputs(args.output_dir, dataset, result)


def cmd_sweep(args, stages: Stages, manifest: io.RunManifest) -> None:
    manifest.add_inputs(args.input, args.config)
    with stages("ingest"):
        dataset = _load_dataset(args)
        raw = io.load_json(args.config)
        sweep_kw, hyper_kw, fit_kw = split_config(raw, SweepSpec, Hyperparameters, FitConfig)
        grid = sweep_kw.get("w_inverse_grid")
        if isinstance(grid, dict):
            try:
                sweep_kw["w_inverse_grid"] = log_grid(grid["low"], grid["high"], grid["count"])
            except KeyError as exc:
                raise ValidationError(f"log grid needs low, high and count; missing {exc}") from None
        hyper_kw.setdefault("p", int(sweep_kw.get("p_grid", [1])[0]))
        hyper, config = _fit_settings(args, {**hyper_kw, **fit_kw})
        spec = _build(SweepSpec, sweep_kw)
    manifest.config = {**asdict(hyper), **asdict(config), **asdict(spec), **_ingest_options(args)}
    manifest.seed = config.seed
    with stages("sweep"):
        result = run_sweep(dataset, spec, hyper, config)
    with stages("write"):
        columns = ["step", "p", "k_max", "w_inverse", "elbo", "k_hat", "k_hat_min", "k_hat_max",
                   "wall_clock_seconds", "failed_restarts", "status", "best"]
        io.write_table(args.output_dir / "sweep.csv", result.rows, columns)
        write_fit_outputs(args.output_dir / "best", dataset, result.best)


def cmd_evaluate(args, stages: Stages, manifest: io.RunManifest) -> None:
    report = EvaluationReport()
    if args.truth:
        labels_path = Path(args.fit_dir) / "labels.csv"
        manifest.add_inputs(labels_path, args.truth)
        truth = io.load_json(args.truth)
        inferred = io.read_labels(labels_path)
        missing = [s for s in truth["series_ids"] if s not in inferred]
        if missing:
            raise ValidationError(f"labels file lacks series: {', '.join(missing[:5])}")
        pred = np.array([inferred[s] for s in truth["series_ids"]])
        true = np.asarray(truth["labels"])
        with stages("nmi"):
            report.nmi = nmi(true, pred)
        report.k_hat_error = int(len(np.unique(pred)) - len(np.unique(true)))
    if args.holdout:
        if not args.input or not args.config:
            raise ValidationError("--holdout needs --input and --config")
        manifest.add_inputs(args.input, args.config)
        dataset = _load_dataset(args)
        hyper, config = _fit_settings(args, io.load_json(args.config))
        with stages("holdout"):
            held = holdout_protocol(dataset, hyper, config, folds=args.folds, seed=config.seed)
        report.rmse_loadings_prediction = held.rmse_loadings_prediction
        report.rmse_community_mean_prediction = held.rmse_community_mean_prediction
        report.rmse_global_mean_prediction = held.rmse_global_mean_prediction
        report.folds = held.folds
        manifest.seed = config.seed
    if not (args.truth or args.holdout):
        raise ValidationError("evaluate needs --truth and/or --holdout")
    manifest.config = {"fit_dir": str(args.fit_dir), "truth": args.truth, "holdout": args.holdout, "folds": args.folds}
    io.dump_json(args.output_dir / "report.json", report.to_dict())


def cmd_impute(args, stages: Stages, manifest: io.RunManifest) -> None:
    manifest.add_inputs(args.input, args.posterior)
    dataset = _load_dataset(args)
    doc = io.load_json(args.posterior)
    state = io.state_from_dict(doc["posterior"])
    if list(doc["series_ids"]) != list(dataset.series_ids) or state.q_x.mean.shape[0] != dataset.T:
        raise ValidationError("posterior does not match the input's series or length")
    cells = np.argwhere(~dataset.mask)
    with stages("impute"):
        predicted = impute(state, cells, args.mode)
    values = dataset.values.copy()
    values[cells[:, 0], cells[:, 1]] = predicted
    manifest.config = {"mode": args.mode, **_ingest_options(args)}
    io.write_csv(args.output_dir / "imputed.csv", Dataset(values, None, dataset.series_ids, dataset.timestamps))


def _ingest_options(args) -> dict:
    return {"log_returns": args.log_returns, "standardize": args.standardize, "transpose": args.transpose}


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "impute": cmd_impute,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeless", description="Community detection for sets of time series.")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--jobs", type=int, default=None, help="worker processes (fallback: $LC_THREADS, else 1)")
    parser.add_argument("--output-dir", type=Path, default=Path("."), help="directory for all outputs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def ingest_flags(p, required=True):
        p.add_argument("input" if required else "--input", help="CSV: header of series ids, first column timestamps")
        p.add_argument("--log-returns", action="store_true", help="difference the logarithms of each series")
        p.add_argument("--standardize", action="store_true", help="zero mean, unit variance per series")
        p.add_argument("--transpose", action="store_true", help="treat rows as series")

    p = sub.add_parser("generate", help="write a synthetic dataset and its truth sidecar")
    p.add_argument("--config", help="JSON with GeneratorConfig fields")

    p = sub.add_parser("fit", help="fit the model at fixed hyperparameters")
    ingest_flags(p)
    p.add_argument("--config", required=True, help="JSON with Hyperparameters and FitConfig fields")

    p = sub.add_parser("sweep", help="grid search over p and w^-1")
    ingest_flags(p)
    p.add_argument("--config", required=True, help="JSON with SweepSpec, Hyperparameters and FitConfig fields")

    p = sub.add_parser("evaluate", help="score a fit against truth and/or run the hold-out protocol")
    p.add_argument("--fit-dir", type=Path, default=Path("."))
    p.add_argument("--truth", help="truth sidecar written by generate")
    p.add_argument("--holdout", action="store_true", help="run the two-stage imputation protocol")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--config", help="fit config for --holdout")
    ingest_flags(p, required=False)

    p = sub.add_parser("impute", help="fill missing cells from a fitted posterior")
    ingest_flags(p)
    p.add_argument("--posterior", required=True, help="posterior.json written by fit")
    p.add_argument("--mode", choices=("loadings", "community"), default="loadings")
    return parser


def _error(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    stages = Stages()
    manifest = io.RunManifest(command=args.command, config={}, seed=args.seed)
    code = EXIT_OK
    try:
        args.output_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, stages, manifest)
    except (ValidationError, FileNotFoundError, KeyError, IsADirectoryError) as exc:
        code = _error("validation", exc, EXIT_VALIDATION)
        manifest.error = f"{type(exc).__name__}: {exc}"
    except (InferenceError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        code = _error("runtime", exc, EXIT_RUNTIME)
        manifest.error = f"{type(exc).__name__}: {exc}"
    manifest.exit_code = code
    manifest.wall_clock_seconds = stages.seconds
    if args.output_dir.is_dir():
        manifest.write(args.output_dir / "manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
