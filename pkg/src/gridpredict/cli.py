"""Command-line entry point: ``gridpredict <command> --config run.ini``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric or
runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import fcntl
import io
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, with_overrides
from .dataset import MANIFEST, load_dataset, read_series_csv, sha256_file, verify_manifest, write_dataset
from .errors import ConfigError, GradCheckFailed, GridPredictError, IncompatibleModel, NumericError, ValidationError
from .evaluate import (
    GridReport,
    PersistencePredictor,
    as_predictor,
    evaluate_predictors,
    hyperparameter_sweep,
    observation_window_sweep,
)
from .gradcheck import TOLERANCE, run_gradchecks
from .koopman import build_snapshot_matrices, fit_deep_dmd, fit_robust_dmd, load_model_dict
from .simulator import default_params, generate_grid, simulate_scenarios
from .stgcn import StgcnModel, incremental_predict, train_stgcn

log = logging.getLogger("gridpredict")

METHODS = ("robust-dmd", "deep-dmd", "stgcn")
DEFAULT_ORIGIN = 199


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@contextmanager
def output_lock(out: Path):
    """One command per output directory at a time."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / ".lock"
    fh = open(path, "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise ValidationError(f"{out} is locked by another running command") from None
        yield
    finally:
        fh.close()
        try:
            path.unlink()
        except FileNotFoundError:
            pass


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _model_file(cfg: RunConfig, method: str) -> Path:
    return cfg.models_dir / f"{method.replace('-', '_')}.json"


def _manifest_hash(cfg: RunConfig) -> str:
    return sha256_file(cfg.dataset_dir / MANIFEST)


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# ------------------------------------------------------------------ commands


def cmd_simulate(cfg: RunConfig, args) -> int:
    g = cfg.graph()
    params = default_params(g)
    spec = cfg.grid
    scen = generate_grid(g, spec.n_per_cell, cfg.seed, spec.n_train, cfg.snr_db, params, spec.cases, spec.classes)
    series = simulate_scenarios(g, params, scen, cfg.duration, cfg.sample_rate)
    meta = {"seed": cfg.seed, "snr_db": cfg.snr_db, "sample_rate": cfg.sample_rate, "duration": cfg.duration,
            "graph_fingerprint": g.fingerprint(), "n_per_cell": spec.n_per_cell, "n_train": spec.n_train,
            "cases": list(spec.cases), "classes": list(spec.classes)}
    manifest = write_dataset(cfg.dataset_dir, scen, series, meta)
    print(json.dumps(manifest, sort_keys=True, indent=1))
    return 0


def _fit(cfg: RunConfig, method: str):
    _, train = load_dataset(cfg.dataset_dir, split="train")
    labels = train[0].channel_labels
    if method == "robust-dmd":
        pair = build_snapshot_matrices(train, skip=cfg.train_start)
        model = fit_robust_dmd(pair, cfg.lambda1, channel_labels=labels)
        history = []
    elif method == "deep-dmd":
        pair = build_snapshot_matrices(train, skip=cfg.train_start)
        model = fit_deep_dmd(pair, cfg.deep_dmd, channel_labels=labels)
        history = model.training_meta["loss_history"]
    elif method == "stgcn":
        model = train_stgcn(train, cfg.stgcn, cfg.graph())
        history = model.training_meta["loss_history"]
    else:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    model.training_meta["dataset_manifest_sha256"] = _manifest_hash(cfg)
    model.training_meta["train_start"] = cfg.train_start if method != "stgcn" else cfg.stgcn.train_start
    return model, history


def cmd_fit(cfg: RunConfig, args) -> int:
    methods = _methods(args.method, default=None)
    for method in methods:
        model, history = _fit(cfg, method)
        path = _model_file(cfg, method)
        _write(path, model.to_json() + "\n")
        _write(path.with_suffix(".log.csv"), _rows_csv(("epoch", "loss"), list(enumerate(history))))
        print(f"{method}: wrote {path}")
    return 0


def _load_model(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"model file {path} does not exist; run `fit` first")
    return load_model_dict(json.loads(path.read_text()))


def cmd_predict(cfg: RunConfig, args) -> int:
    (method,) = _methods(args.method, default=None, single=True)
    model = _load_model(Path(args.model) if args.model else _model_file(cfg, method))
    scen_path = Path(args.scenario)
    side = scen_path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    series = read_series_csv(scen_path, meta.get("columns"), meta.get("time_column", "time"), meta.get("sample_rate"))
    H = cfg.horizon
    if isinstance(model, StgcnModel):
        origin = cfg.origin if cfg.origin is not None else model.config.M - 1
        F = series.frequencies
        if F.shape[1] != model.n:
            raise IncompatibleModel(f"model has {model.n} buses, scenario has {F.shape[1]}")
        if origin < model.config.M - 1 or origin >= len(series):
            raise ValidationError(f"origin {origin} needs {model.config.M} samples of history within the series")
        P = incremental_predict(model, F[origin - model.config.M + 1:origin + 1], H)
        labels = [c for c in series.channel_labels if c.startswith("freq_")]
    else:
        origin = cfg.origin if cfg.origin is not None else DEFAULT_ORIGIN
        if series.values.shape[1] != model.measurement_dim or (
                model.channel_labels and tuple(model.channel_labels) != tuple(series.channel_labels)):
            raise IncompatibleModel("model channels do not match scenario channels")
        if not 0 <= origin < len(series):
            raise ValidationError(f"origin {origin} outside the series")
        P = model.predict(series.values[origin], H)
        labels = list(series.channel_labels)
    t0 = series.times[origin]
    times = t0 + np.arange(1, H + 1) / series.sample_rate
    out = Path(args.out_file) if args.out_file else cfg.out / "predictions" / f"{scen_path.stem}_{method}.csv"
    _write(out, _rows_csv(["time"] + labels, [[float(t)] + [float(v) for v in row] for t, row in zip(times, P)]))
    print(f"wrote {out}")
    return 0


def _methods(arg, default=METHODS, single=False):
    if not arg:
        if default is None:
            raise ConfigError("--method is required")
        return list(default)
    methods = list(METHODS) if arg == "all" else [m.strip() for m in arg.split(",")]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    if single and len(methods) != 1:
        raise ConfigError("exactly one --method is required")
    return methods


def cmd_evaluate(cfg: RunConfig, args) -> int:
    verify_manifest(cfg.dataset_dir)
    current = _manifest_hash(cfg)
    methods = _methods(args.method, default=[m for m in METHODS if _model_file(cfg, m).exists()])
    predictors = [PersistencePredictor()]
    for m in methods:
        model = _load_model(_model_file(cfg, m))
        recorded = model.training_meta.get("dataset_manifest_sha256")
        if recorded is not None and recorded != current:
            raise ValidationError(f"{m} was trained on a different dataset (manifest hash mismatch)")
        predictors.append(as_predictor(model, m))
    scen, test = load_dataset(cfg.dataset_dir, split="test", verify=False)
    records = evaluate_predictors(test, predictors, scen, cfg.origin, cfg.horizon)
    report = GridReport.from_records(records)
    d = cfg.out / "report"
    _write(d / "report.csv", report.to_csv())
    _write(d / "report.json", report.to_json() + "\n")
    print(report.to_csv(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    seeds = tuple(range(args.seed, args.seed + 5)) if args.seed is not None else (0, 1, 2, 3, 4)
    results = run_gradchecks(seeds, TOLERANCE, wrong_sign_hook=args.wrong_sign)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_error={r.max_rel_error:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise GradCheckFailed(f"{len(failed)} suite(s) exceeded rel. error {TOLERANCE}: {', '.join(failed)}")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    (method,) = _methods(args.method or "stgcn", single=True)
    _, train = load_dataset(cfg.dataset_dir, split="train")
    _, test = load_dataset(cfg.dataset_dir, split="test", verify=False)
    d = cfg.out / "sweep"
    if method == "stgcn":
        rows = observation_window_sweep(train, test, cfg.sweep.windows, cfg.stgcn, cfg.graph(), cfg.horizon)
        name = "window"
        header = ("M", "seconds", "rmse_worst_median", "rmse_worst_mean", "final_loss")
    elif method == "deep-dmd":
        pair = build_snapshot_matrices(train, skip=cfg.train_start)
        origin = cfg.origin if cfg.origin is not None else DEFAULT_ORIGIN
        rows = hyperparameter_sweep(pair, cfg.sweep.axis, cfg.sweep.values, test, cfg.deep_dmd, origin, cfg.horizon)
        name = f"deep_dmd_{cfg.sweep.axis}"
        header = ("axis", "value", "rmse_worst_median", "rmse_worst_mean", "final_loss")
    else:
        raise ConfigError("sweep supports --method stgcn (observation window) or deep-dmd (hyperparameters)")
    text = _rows_csv(header, [[r[h] for h in header] for r in rows])
    _write(d / f"{name}.csv", text)
    print(text, end="")
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridpredict", description="Transient trajectory prediction for power networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, method=True):
        sp.add_argument("--config", required=True, help="run configuration (INI)")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--out", help="override [run] out directory")
        sp.add_argument("--horizon", type=int, help="override [run] horizon (samples)")
        if method:
            sp.add_argument("--method", help=f"one of {', '.join(METHODS)}, a comma list, or 'all'")

    common(sub.add_parser("simulate", help="generate the scenario dataset"), method=False)
    common(sub.add_parser("fit", help="train models on the training split"))
    pr = sub.add_parser("predict", help="predict one scenario file")
    common(pr)
    pr.add_argument("--scenario", required=True, help="scenario CSV")
    pr.add_argument("--model", help="model JSON (default: <out>/models/<method>.json)")
    pr.add_argument("--out-file", help="prediction CSV path")
    common(sub.add_parser("evaluate", help="score models on the test split"))
    common(sub.add_parser("sweep", help="observation-window or hyperparameter sweep"))
    gc = sub.add_parser("gradcheck", help="finite-difference checks of every gradient")
    gc.add_argument("--seed", type=int, help="first of five seeds")
    gc.add_argument("--wrong-sign", action="store_true", help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = with_overrides(load_config(args.config), args.seed, args.out, args.horizon)
        with output_lock(cfg.out):
            return COMMANDS[args.command](cfg, args)
    except (ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericError, GridPredictError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
