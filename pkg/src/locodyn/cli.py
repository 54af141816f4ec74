"""Command-line interface.

Every command writes its outputs plus ``manifest.json`` into ``--out``.
The manifest holds the resolved configuration, the parsed arguments and
SHA-256 digests of inputs and outputs; ``locodyn rerun MANIFEST`` repeats
the run and checks the outputs bit for bit.

Configuration is one JSON file with the sections ``synth``, ``train``,
``torque_opt`` and ``split``; ``--set section.key=value`` overrides single
entries (values parse as JSON, falling back to plain strings).  Without
``--config`` the file ``config.json`` in ``$LOCODYN_CONFIG_DIR`` is used
when present.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import load_dataset, model_for, save_dataset, sigma_from_windows
from .dynamics import DampingConfig
from .errors import (ConfigError, DatasetError, DivergenceError, InvalidParameterError, ModeError,
                     NumericInputError, SingularConfigurationError, UndefinedMetricError)
from .forward import ForwardInput, simulate
from .metrics import FC_CHANNELS, curve_summary, training_ranges, write_curve_csv, write_metric_csv
from .network import load_checkpoint, save_checkpoint
from .synth import SynthConfig, label_torques, synthesize_dataset
from .training import (MODES, TorqueOptConfig, TrainConfig, evaluate_net, reduce_supervision, run_noise_experiment,
                       run_reduction_experiment, run_transfer, split_dataset, summarize_rows, train,
                       write_history_csv)

MANIFEST_FORMAT = "locodyn-manifest"
MANIFEST_VERSION = 1
CONFIG_ENV = "LOCODYN_CONFIG_DIR"
SECTIONS = ("synth", "train", "torque_opt", "split")
SPLIT_DEFAULTS = {"seed": 0, "n_test": 1, "n_val": 1}
EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4
TABLE_COLUMNS = ("split", "mode", "eps_f", "eps_rf", "eps_m", "eps_rm", "eps_tau", "eps_rtau")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration

def default_config():
    return {
        "synth": SynthConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "torque_opt": dict(vars(TorqueOptConfig())),
        "split": dict(SPLIT_DEFAULTS),
    }


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=()):
    """Defaults, updated by the config file, updated by ``--set`` overrides."""
    cfg = default_config()
    if path is None and os.environ.get(CONFIG_ENV):
        candidate = Path(os.environ[CONFIG_ENV]) / "config.json"
        path = candidate if candidate.exists() else None
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict) or set(doc) - set(SECTIONS):
            raise ConfigError(f"config sections must be among {SECTIONS}")
        for sec, vals in doc.items():
            if not isinstance(vals, dict):
                raise ConfigError(f"config section {sec!r} must be an object")
            cfg[sec].update(vals)
    for item in overrides:
        key, sep, val = item.partition("=")
        sec, dot, name = key.partition(".")
        if not sep or not dot or sec not in SECTIONS:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        cfg[sec][name] = _parse_value(val)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    synth_config(cfg)
    train_config(cfg)
    torque_config(cfg)
    unknown = set(cfg["split"]) - set(SPLIT_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown split settings: {sorted(unknown)}")


def synth_config(cfg):
    return SynthConfig.from_dict(cfg["synth"])


def train_config(cfg, **changes):
    try:
        return replace(TrainConfig.from_dict(cfg["train"]), **changes)
    except (InvalidParameterError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def torque_config(cfg):
    try:
        return TorqueOptConfig(**cfg["torque_opt"])
    except (InvalidParameterError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# manifests

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _utc():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def output_hashes(out):
    out = Path(out)
    return {p.relative_to(out).as_posix(): sha256_file(p)
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def write_manifest(out, command, args, cfg, inputs, started, extra=None):
    doc = {
        "format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "command": command,
        "args": args, "config": cfg, "seed": cfg["train"]["seed"] if command != "synth" else cfg["synth"]["seed"],
        "inputs": {str(Path(p).resolve()): sha256_file(p) for p in inputs},
        "outputs": output_hashes(out), "code_version": __version__,
        "numpy_version": np.__version__, "started": started, "finished": _utc(),
    }
    doc.update(extra or {})
    path = Path(out) / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def read_manifest(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{path}: not a version-{MANIFEST_VERSION} manifest")
    return doc


# --------------------------------------------------------------------------
# helpers

def _load(path):
    try:
        return load_dataset(path)
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except InvalidParameterError as exc:
        raise DatasetError(str(exc)) from exc


def _split(ds, cfg):
    s = cfg["split"]
    return split_dataset(ds, s["seed"], s["n_test"], s["n_val"])


def _write_rows(path, rows, first):
    cols = list(first) + sorted({k for r in rows for k in r} - set(first))
    with Path(path).open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _report(out, net, test, train_windows, plots):
    """Metric CSV and JSON, curve CSV and figures for one network."""
    from .plotting import plot_curves

    metrics, report, curves = evaluate_net(net, test, train_windows)
    ranges = training_ranges(train_windows)
    write_metric_csv(out / "metrics.csv", report, ranges)
    _write_json(out / "metrics.json", {"summary": metrics, "report": report.as_dict()})
    if curves:
        summary = curve_summary(curves)
        write_curve_csv(out / "curves.csv", summary)
        if plots:
            plot_curves(summary, FC_CHANNELS, out / "curves")
    return metrics


def _progress(verbose):
    if not verbose:
        return None
    return lambda rec: print(json.dumps(rec, default=float), file=sys.stderr)


# --------------------------------------------------------------------------
# commands (each returns (input paths, extra manifest entries))

def cmd_synth(a, cfg, out):
    ds = synthesize_dataset(synth_config(cfg))
    save_dataset(out / "dataset.jsonl", ds)
    _write_json(out / "counts.json", ds.counts())
    return [], {}


def cmd_simulate(a, cfg, out):
    """Forward-simulate labelled windows and write the state error per window."""
    ds = _load(a.dataset)
    damping = DampingConfig(np.asarray(ds.meta.get("sigma_xdot", sigma_from_windows(ds.windows))),
                            k=cfg["train"]["damping_k"], enabled=not a.undamped)
    rows = []
    windows = [w for w in ds.windows if w.gamma_f is not None and w.gamma_tau is not None][:a.limit]
    if not windows:
        raise DatasetError("no windows with force and torque labels")
    for k, w in enumerate(windows):
        inp = ForwardInput(w.x0, w.m_xdot, w.dt, w.n, gamma_f=w.gamma_f, gamma_tau=w.gamma_tau)
        try:
            states, d = simulate(inp, model_for(w), damping)
            err = states - w.x_true()
            rows.append({"window": k, "sequence": w.sequence, "start": w.start,
                         "state_rmse": float(np.sqrt(np.mean(err**2))), "min_damping": float(d.min())})
        except DivergenceError as exc:
            if a.strict:
                raise
            rows.append({"window": k, "sequence": w.sequence, "start": w.start,
                         "state_rmse": float("nan"), "min_damping": float("nan"), "diverged_step": exc.step})
    _write_rows(out / "simulation.csv", rows, ("window", "sequence", "start", "state_rmse", "min_damping"))
    return [a.dataset], {}


def cmd_optimize_torques(a, cfg, out):
    ds = _load(a.dataset)
    if a.limit is not None:
        keep = [w for w in ds.windows if w.gamma_f is not None][:a.limit]
        ds = replace(ds, windows=keep)
    label_torques(ds, "optimize", torque_config(cfg))
    save_dataset(out / "dataset.jsonl", ds)
    _write_json(out / "summary.json", {"windows": len(ds.windows), "failures": ds.meta["torque_failures"]})
    return [a.dataset], {}


def cmd_train(a, cfg, out):
    ds = _load(a.dataset)
    tcfg = train_config(cfg, **({"mode": a.mode} if a.mode else {}))
    if tcfg.mode.startswith("transfer"):
        raise ModeError("use the transfer command for transfer modes")
    train_ds, val_ds, test_ds = _split(ds, cfg)
    windows = reduce_supervision(train_ds.windows, tcfg.supervised_fraction, cfg["split"]["seed"])
    net, hist = train(windows, tcfg, val_ds.windows, progress=_progress(a.verbose))
    save_checkpoint(out / "checkpoint.json", net, {"mode": tcfg.mode, "train": tcfg.to_dict()})
    write_history_csv(out / "history.csv", hist)
    if a.plots:
        from .plotting import plot_history

        plot_history(hist, out / "history")
    _report(out, net, test_ds, windows, a.plots)
    return [a.dataset], {}


def cmd_eval(a, cfg, out):
    ds = _load(a.dataset)
    net, _ = _checkpoint(a.checkpoint)
    train_ds, val_ds, test_ds = _split(ds, cfg)
    target = {"train": train_ds, "val": val_ds, "test": test_ds, "all": ds}[a.split]
    _report(out, net, target, train_ds.windows, a.plots)
    return [a.dataset, a.checkpoint], {}


def cmd_transfer(a, cfg, out):
    """Fine-tune a source checkpoint on the target dataset's training subjects."""
    ds = _load(a.dataset)
    net, _ = _checkpoint(a.checkpoint)
    tcfg = train_config(cfg)
    train_ds, val_ds, test_ds = _split(ds, cfg)
    tuned, hist = run_transfer(net, train_ds.windows, a.mode, tcfg, val_ds.windows)
    save_checkpoint(out / "checkpoint.json", tuned, {"mode": a.mode, "source": sha256_file(a.checkpoint)})
    write_history_csv(out / "history.csv", hist)
    _report(out, tuned, test_ds, train_ds.windows, a.plots)
    return [a.dataset, a.checkpoint], {"source_checkpoint": {"path": str(Path(a.checkpoint).resolve()),
                                                             "sha256": sha256_file(a.checkpoint)}}


def cmd_reduction(a, cfg, out):
    ds = _load(a.dataset)
    rows = run_reduction_experiment(ds, a.fractions, a.modes, train_config(cfg), tuple(a.seeds),
                                    cfg["split"]["n_test"], cfg["split"]["n_val"], progress=_progress(a.verbose))
    _write_rows(out / "reduction.csv", rows, ("split", "fraction") + TABLE_COLUMNS[1:])
    _write_rows(out / "reduction_summary.csv", summarize_rows(rows), ("fraction", "mode", "eps_tau", "eps_f", "eps_m"))
    if a.plots:
        from .plotting import plot_table

        plot_table(rows, "fraction", "eps_tau", "mode", out / "reduction_tau", "supervised fraction", "JT RMSE (Nm/kg)",
                   logx=True)
        plot_table(rows, "fraction", "eps_f", "mode", out / "reduction_grf", "supervised fraction", "GRF RMSE (N/kg)",
                   logx=True)
    return [a.dataset], {}


def cmd_noise(a, cfg, out):
    ds = _load(a.dataset)
    tcfg = train_config(cfg, **({"mode": a.mode} if a.mode else {}))
    sigmas = sorted(set([0.0] + list(a.sigmas)))
    rows = run_noise_experiment(ds, sigmas, tcfg, tuple(a.seeds), (a.flip_fraction, a.flip_probability),
                                cfg["split"]["n_test"], cfg["split"]["n_val"], repeats=getattr(a, "repeats", 1),
                                progress=_progress(a.verbose))
    _write_rows(out / "noise.csv", rows, ("split", "sigma") + TABLE_COLUMNS[1:])
    _write_rows(out / "noise_summary.csv", summarize_rows(rows, keys=("sigma", "mode")),
                ("sigma", "mode", "eps_tau", "eps_f", "eps_m"))
    if a.plots:
        from .plotting import plot_table

        plot_table(rows, "sigma", "eps_f", "mode", out / "noise_grf", "angle noise (deg)", "GRF RMSE (N/kg)")
        plot_table(rows, "sigma", "eps_tau", "mode", out / "noise_tau", "angle noise (deg)", "JT RMSE (Nm/kg)")
    return [a.dataset], {}


def _read_csv(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty table")
    return rows


def cmd_plot_export(a, cfg, out):
    """Render figures from CSV files written by other commands."""
    from .plotting import plot_curves, plot_history, plot_table

    inputs = []
    if a.curves:
        rows = _read_csv(a.curves)
        channels = list(dict.fromkeys(r["channel"] for r in rows))
        n = len(rows) // len(channels)
        summary = np.array([[float(r[c]) for c in ("true_mean", "true_std", "pred_mean", "pred_std")] for r in rows])
        plot_curves(summary.reshape(len(channels), n, 4).transpose(1, 0, 2), channels, out / "curves")
        inputs.append(a.curves)
    if a.history:
        hist = [{k: float(v) if k != "epoch" else int(v) for k, v in r.items() if v != ""} for r in _read_csv(a.history)]
        plot_history(hist, out / "history")
        inputs.append(a.history)
    if a.table:
        rows = _read_csv(a.table)
        x = a.x or ("sigma" if "sigma" in rows[0] else "fraction")
        for metric in a.metrics:
            plot_table(rows, x, metric, "mode", out / f"{Path(a.table).stem}_{metric}", logx=x == "fraction")
        inputs.append(a.table)
    if not inputs:
        raise UsageError("give at least one of --curves, --history, --table")
    return inputs, {}


COMMANDS = {
    "synth": cmd_synth, "simulate": cmd_simulate, "optimize-torques": cmd_optimize_torques,
    "train": cmd_train, "eval": cmd_eval, "transfer": cmd_transfer,
    "reduction-experiment": cmd_reduction, "noise-experiment": cmd_noise, "plot-export": cmd_plot_export,
}
PATH_ARGS = ("dataset", "checkpoint", "curves", "history", "table")


# --------------------------------------------------------------------------
# parser

def build_parser():
    p = argparse.ArgumentParser(prog="locodyn", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"locodyn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, needs_data=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--config", type=Path, help=f"JSON config (default: ${CONFIG_ENV}/config.json)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--verbose", action="store_true", help="print progress records to stderr")
        if needs_data:
            sp.add_argument("--dataset", type=Path, required=True)
        return sp

    add("synth", "generate a synthetic dataset", needs_data=False)
    sp = add("simulate", "forward-simulate labelled windows")
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--undamped", action="store_true")
    sp.add_argument("--strict", action="store_true", help="fail on the first diverging window")
    sp = add("optimize-torques", "fit torque labels by forward simulation")
    sp.add_argument("--limit", type=int, default=None)
    for name, help_ in (("train", "train a network"), ("eval", "evaluate a checkpoint"),
                        ("transfer", "fine-tune a checkpoint on another motion type")):
        sp = add(name, help_)
        sp.add_argument("--no-plots", dest="plots", action="store_false")
        if name == "train":
            sp.add_argument("--mode", choices=MODES[:3])
        else:
            sp.add_argument("--checkpoint", type=Path, required=True)
        if name == "eval":
            sp.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
        if name == "transfer":
            sp.add_argument("--mode", choices=MODES[3:], required=True)
    sp = add("reduction-experiment", "train all modes at several supervised fractions")
    sp.add_argument("--fractions", type=float, nargs="+", default=[0.01, 0.1, 0.5, 1.0])
    sp.add_argument("--modes", nargs="+", choices=MODES[:3], default=list(MODES[:3]))
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--no-plots", dest="plots", action="store_false")
    sp = add("noise-experiment", "train and test with joint-angle noise")
    sp.add_argument("--sigmas", type=float, nargs="+", default=[0.3, 0.6, 1.1, 2.3], help="degrees")
    sp.add_argument("--mode", choices=MODES[:3])
    sp.add_argument("--flip-fraction", type=float, default=0.1)
    sp.add_argument("--flip-probability", type=float, default=0.5)
    sp.add_argument("--repeats", type=int, default=1, help="networks averaged per split and noise level")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--no-plots", dest="plots", action="store_false")
    sp = add("plot-export", "render SVG/PNG figures from CSV outputs", needs_data=False)
    sp.add_argument("--curves", type=Path)
    sp.add_argument("--history", type=Path)
    sp.add_argument("--table", type=Path)
    sp.add_argument("--x", help="table column on the horizontal axis")
    sp.add_argument("--metrics", nargs="+", default=["eps_f", "eps_tau"])

    sp = sub.add_parser("rerun", help="repeat a run from its manifest and compare outputs")
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--out", type=Path, help="output directory (default: a temporary directory)")
    return p


def _arg_record(a):
    """JSON-safe copy of the parsed arguments (paths made absolute)."""
    rec = {}
    for k, v in vars(a).items():
        if k in ("command", "out", "config", "overrides"):
            continue
        if isinstance(v, Path):
            v = str(v.resolve())
        rec[k] = v
    return rec


def execute(command, a, cfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = _utc()
    inputs, extra = COMMANDS[command](a, cfg, out)
    return write_manifest(out, command, _arg_record(a), cfg, inputs, started, extra)


def rerun(manifest_path, out=None):
    """Repeat a manifest's run; returns ``(identical, differences, out_dir)``."""
    doc = read_manifest(manifest_path)
    for path, digest in doc["inputs"].items():
        if not Path(path).exists() or sha256_file(path) != digest:
            raise DatasetError(f"input {path} is missing or changed since the run")
    args = dict(doc["args"])
    for k in PATH_ARGS:
        if args.get(k) is not None:
            args[k] = Path(args[k])
    out = Path(out) if out is not None else Path(tempfile.mkdtemp(prefix="locodyn-rerun-"))
    cfg = copy.deepcopy(doc["config"])
    validate_config(cfg)
    execute(doc["command"], argparse.Namespace(**args), cfg, out)
    new = output_hashes(out)
    old = doc["outputs"]
    diffs = sorted(k for k in set(old) | set(new) if old.get(k) != new.get(k))
    return not diffs, diffs, out


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if a.command == "rerun":
            same, diffs, out = rerun(a.manifest, a.out)
            print(f"rerun in {out}: " + ("outputs identical" if same else f"outputs differ: {', '.join(diffs)}"))
            return 0 if same else EXIT_DATA
        cfg = load_config(a.config, a.overrides)
        path = execute(a.command, a, cfg, a.out)
        print(f"wrote {path}")
        return 0
    except (UsageError, ConfigError, ModeError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, NumericInputError, UndefinedMetricError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, SingularConfigurationError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
