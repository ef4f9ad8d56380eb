"""Command-line entry points: gen, train, sweep, eval, diag.

Exit codes: 0 success, 1 failed check, 2 config/input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics, plotting
from .data import (Dataset, MixtureSpec, gen_gaussian_mixture, write_csv,
                   write_mode_sidecar)
from .errors import ConfigError, ContractError, FormatError, NumericalError
from .models import load_checkpoint, save_checkpoint
from .trainer import RunConfig, evaluate, load_data_ref, load_datasets, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_LAMBDAS = (0.2, 0.4, 0.6, 0.8, 1.0)
INPUT_ERRORS = (ConfigError, FormatError, ContractError, FileNotFoundError, json.JSONDecodeError)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = json.loads(json.dumps(doc))
    allowed = RunConfig.field_names()
    for text in overrides or ():
        path, value = parse_override(text)
        if path[0] not in allowed:
            raise ConfigError(f"unknown config key {path[0]!r}")
        target = doc
        for part in path[:-1]:
            if target.get(part) is None:
                target[part] = {}
            target = target[part]
            if not isinstance(target, dict):
                raise ConfigError(f"cannot set {'.'.join(path)}: {part} is not an object")
        target[path[-1]] = value
    return doc


def _absolute_refs(doc: dict, base: Path) -> dict:
    for key in ("train_data", "test_data"):
        ref = doc.get(key) or {}
        for field in ("path", "images", "labels"):
            if field in ref and not Path(ref[field]).is_absolute():
                ref[field] = str((base / ref[field]).resolve())
    return doc


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    doc = _absolute_refs(apply_overrides(doc, overrides), path.parent.resolve())
    return RunConfig.from_dict(doc)


def _out_dir(arg, config: RunConfig | None, stem: str) -> Path:
    if arg:
        return Path(arg)
    if config is not None and config.output:
        return Path(config.output)
    return Path(os.environ.get("ITRA_OUT_DIR", "runs")) / stem


def run_training(config: RunConfig, out: Path) -> dict:
    """Train once and write metrics, checkpoint, resolved config and figures."""
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = load_datasets(config)
    (out / "config.resolved.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")

    def append(rec):
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(rec.__dict__) + "\n")

    start = time.perf_counter()
    params, records = train(config, on_epoch=append, datasets=(train_ds, test_ds))
    elapsed = time.perf_counter() - start
    meta = {"mean": np.asarray(train_ds.mean).tolist() if train_ds.mean is not None else None,
            "std": np.asarray(train_ds.std).tolist() if train_ds.std is not None else None,
            "method": config.method, "lambda": config.lam, "seed": config.seed}
    save_checkpoint(out / "checkpoint.itra", params, config.model_spec, meta)
    (out / "timing.json").write_text(json.dumps({"total_seconds": elapsed}) + "\n")
    plotting.plot_training_curves({f"{config.method} (lambda={config.lam:g})": records},
                                  out / "curves.png")
    last = records[-1]
    return {"final_acc": last.test_acc, "final_ce": last.test_ce}


def cmd_train(args) -> int:
    try:
        config = load_config(args.config, args.set)
        out = _out_dir(args.out, config, Path(args.config).stem)
        result = run_training(config, out)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"acc={result['final_acc']:.4f} ce={result['final_ce']:.4f} -> {out}")
    return EXIT_OK


def _sweep_one(job):
    config_doc, out = job
    try:
        result = run_training(RunConfig.from_dict(config_doc), Path(out))
        return {"lambda": config_doc["lambda"], **result, "status": "ok"}
    except INPUT_ERRORS as exc:
        return {"lambda": config_doc["lambda"], "final_acc": None, "final_ce": None,
                "status": f"config error: {exc}", "code": EXIT_CONFIG}
    except NumericalError as exc:
        return {"lambda": config_doc["lambda"], "final_acc": None, "final_ce": None,
                "status": f"numeric failure: {exc}", "code": EXIT_NUMERIC}


def cmd_sweep(args) -> int:
    try:
        config = load_config(args.config, args.set)
        lambdas = [float(v) for v in args.lambdas.split(",")] if args.lambdas else list(DEFAULT_LAMBDAS)
    except (*INPUT_ERRORS, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args.out, config, Path(args.config).stem + "_sweep")
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for lam in lambdas:
        doc = config.to_dict()
        doc["lambda"] = lam
        doc["output"] = None
        jobs.append((doc, str(out / f"lambda_{lam:g}")))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(job) for job in jobs]

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "final_acc", "final_ce"])
        for r in rows:
            w.writerow([f"{r['lambda']:g}",
                        "" if r["final_acc"] is None else repr(r["final_acc"]),
                        "" if r["final_ce"] is None else repr(r["final_ce"])])
    (out / "status.json").write_text(json.dumps(
        {f"{r['lambda']:g}": r["status"] for r in rows}, indent=2) + "\n")
    plotting.plot_sweep(rows, out / "sweep.png")
    for r in rows:
        print(f"lambda={r['lambda']:g}: {r['status']}")
    codes = [r.get("code", EXIT_OK) for r in rows]
    return max(codes)


def cmd_eval(args) -> int:
    try:
        params, spec, meta = load_checkpoint(args.checkpoint)
        if args.config:
            ds = load_config(args.config, args.set).test_data
            ds = load_data_ref(ds)
        else:
            ds = load_data_ref(json.loads(args.data))
        if meta.get("mean") is not None:
            mean, std = np.asarray(meta["mean"]), np.asarray(meta["std"])
            shape = (1, -1, 1, 1) if ds.inputs.ndim == 4 else (1, -1)
            ds = Dataset((ds.inputs - mean.reshape(shape)) / std.reshape(shape), ds.labels, ds.num_classes)
        if ds.input_shape != spec.input_shape:
            raise ConfigError(f"data shape {ds.input_shape} does not match model {spec.input_shape}")
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    acc, ce = evaluate(params, spec, ds)
    print(json.dumps({"accuracy": acc, "ce": ce, "samples": len(ds)}))
    return EXIT_OK


def cmd_gen(args) -> int:
    try:
        spec = MixtureSpec.from_dict(json.loads(Path(args.spec).read_text()))
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ds = gen_gaussian_mixture(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out)
    write_mode_sidecar(ds, out.with_suffix(out.suffix + ".modes.json"), spec)
    print(f"wrote {len(ds)} rows to {out}")
    return EXIT_OK


def cmd_diag(args) -> int:
    out = Path(args.out) if args.out else Path(os.environ.get("ITRA_OUT_DIR", "runs")) / "diag"
    out.mkdir(parents=True, exist_ok=True)
    reports = diagnostics.run_checks(args.which, args.seed)
    report_path = out / "report.jsonl"
    with open(report_path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    plotting.plot_diagnostics(reports, out / "diagnostics.png")
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}")
    if all(r.passed for r in reports):
        return EXIT_OK
    print(f"report: {report_path}", file=sys.stderr)
    return EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itra", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a Gaussian-mixture CSV dataset")
    g.add_argument("--spec", required=True, help="mixture spec JSON")
    g.add_argument("--out", required=True, help="output CSV path")
    g.set_defaults(func=cmd_gen)

    for name, func, helptext in (("train", cmd_train, "train one configuration"),
                                 ("sweep", cmd_sweep, "train once per lambda")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (dotted paths allowed)")
        s.add_argument("--out", help="output directory (default: $ITRA_OUT_DIR/<config>)")
        if name == "sweep":
            s.add_argument("--lambdas", help="comma-separated grid (default 0.2,0.4,0.6,0.8,1.0)")
            s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        s.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="use the config's test_data")
    src.add_argument("--data", help="data reference as JSON")
    e.add_argument("--set", action="append", default=[])
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diag", help="run gradient and weighting diagnostics")
    d.add_argument("which", nargs="?", default="all", choices=["all", *diagnostics.CHECKS])
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_diag)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
