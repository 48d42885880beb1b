"""Command-line front door: ``qtw {gen,train,eval,baseline,report,check}``.

Settings resolve in three layers: an INI config file (``--config``), then
``QTW_<SECTION>_<KEY>`` environment variables (plus the shorthands
``QTW_WORKERS`` and ``QTW_SEED``), then command-line flags. Diagnostics go to
stderr; stdout carries only the paths of written files.

Exit codes: 0 ok, 1 failed invariant check, 2 config error, 3 I/O error,
4 training divergence, 5 digest mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_DIGEST = 0, 1, 2, 3, 4, 5

log = logging.getLogger("qtw")

DEFAULTS = {
    "data": {
        "n_train": "2000", "n_test": "300", "T": "2000", "dt": "0.005", "eta": "1.0",
        "gamma_min": "0.3", "gamma_max": "0.8", "omega_min": "0.5", "omega_max": "4.0",
        "tau_min": "", "tau_max": "", "base_seed_train": "45", "base_seed_test": "9999",
        "resample_gamma": "false",
    },
    "train": {
        "model": "gru", "head": "kraus", "hidden": "32", "layers": "1", "epochs": "100",
        "lr": "1e-3", "batch": "16", "seed": "0", "tbptt": "0", "weight_decay": "0.01",
        "patience": "3", "plateau": "true", "select_frac": "0.1", "esn_scaling": "0.5", "jitter": "true",
    },
    "baseline": {"mode": "adaptive", "window": "100"},
    "run": {"workers": "1"},
}
SHORTHAND_ENV = {"QTW_WORKERS": ("run", "workers"), "QTW_SEED": ("train", "seed")}


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


# ----------------------------------------------------------------- config


def load_config(path=None, env=None) -> configparser.ConfigParser:
    """Defaults, then the INI file, then ``QTW_`` environment variables."""
    env = os.environ if env is None else env
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}", EXIT_IO)
        except configparser.Error as exc:
            raise CliError(f"malformed config {path}: {exc}", EXIT_CONFIG)
        for sec in cp.sections():
            if sec not in DEFAULTS:
                raise CliError(f"unknown config section [{sec}]", EXIT_CONFIG)
            for key in cp[sec]:
                if key not in DEFAULTS[sec]:
                    raise CliError(f"unknown config key {sec}.{key}", EXIT_CONFIG)
    for var, (sec, key) in SHORTHAND_ENV.items():
        if var in env:
            cp[sec][key] = env[var]
    for sec, keys in DEFAULTS.items():
        for key in keys:
            var = f"QTW_{sec.upper()}_{key.upper()}"
            if var in env:
                cp[sec][key] = env[var]
    return cp


def _get(cp, sec, key, kind, flag=None):
    """Typed lookup; a non-None ``flag`` wins over file and environment."""
    if flag is not None:
        cp[sec][key] = str(flag).lower() if isinstance(flag, bool) else str(flag)
        return flag
    raw = cp[sec][key]
    try:
        if kind is bool:
            return cp.getboolean(sec, key)
        if raw == "" and kind is not str:
            return None
        return kind(raw)
    except ValueError as exc:
        raise CliError(f"bad value for {sec}.{key}: {raw!r} ({exc})", EXIT_CONFIG)


def resolved(cp) -> dict:
    return {sec: dict(cp[sec]) for sec in DEFAULTS}


def write_run_manifest(path, command, cp, inputs: dict, outputs: list, seeds: dict, started: float) -> Path:
    from .dataset import sha256_file

    doc = {
        "tool": "qtw",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "subcommand": command,
        "config": resolved(cp),
        "inputs": {str(k): v for k, v in inputs.items()},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "seeds": seeds,
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _digest_in(path) -> dict:
    from .dataset import sha256_file

    return {str(path): sha256_file(path)}


def _verify_manifest(data_path: Path) -> None:
    """If a dataset manifest sits next to ``data_path``, its digest must match."""
    from .dataset import sha256_file

    man = data_path.parent / "manifest.json"
    if not man.exists():
        return
    files = json.loads(man.read_text()).get("files", {})
    if data_path.name in files and files[data_path.name] != sha256_file(data_path):
        raise CliError(f"{data_path} does not match the digest recorded in {man}", EXIT_DIGEST)


# -------------------------------------------------------------- commands


def cmd_gen(args, cp) -> list[Path]:
    from .dataset import generate_dataset
    from .sim import DatasetSpec

    tau_lo, tau_hi = _get(cp, "data", "tau_min", int), _get(cp, "data", "tau_max", int)
    if (tau_lo is None) != (tau_hi is None):
        raise CliError("set both data.tau_min and data.tau_max or neither", EXIT_CONFIG)
    try:
        spec = DatasetSpec(
            n_train=_get(cp, "data", "n_train", int, args.train),
            n_test=_get(cp, "data", "n_test", int, args.test),
            gamma_range=(_get(cp, "data", "gamma_min", float), _get(cp, "data", "gamma_max", float)),
            omega_range=(_get(cp, "data", "omega_min", float), _get(cp, "data", "omega_max", float)),
            tau_range=None if tau_lo is None else (tau_lo, tau_hi),
            dt=_get(cp, "data", "dt", float, args.dt),
            T=_get(cp, "data", "T", int, args.T),
            eta=_get(cp, "data", "eta", float, args.eta),
            base_seed_train=_get(cp, "data", "base_seed_train", int, args.seed_train),
            base_seed_test=_get(cp, "data", "base_seed_test", int, args.seed_test),
            resample_gamma=_get(cp, "data", "resample_gamma", bool, args.resample_gamma),
        )
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid dataset settings: {exc}", EXIT_CONFIG)
    workers = _get(cp, "run", "workers", int, args.workers)
    out = Path(args.out)
    try:
        generate_dataset(spec, out, workers=workers)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {out}: {exc}", EXIT_IO)
    files = [out / n for n in ("train.qtrj", "test.qtrj", "stats.json", "manifest.json") if (out / n).exists()]
    return files


def _train_config(args, cp):
    from .backbones import ModelConfig
    from .train import TrainRunConfig

    seed = _get(cp, "train", "seed", int, args.seed)
    try:
        mcfg = ModelConfig(
            kind=_get(cp, "train", "model", str, args.model),
            hidden_dim=_get(cp, "train", "hidden", int, args.hidden),
            layers=_get(cp, "train", "layers", int, args.layers),
            esn_scaling=_get(cp, "train", "esn_scaling", float),
            seed=seed,
        )
        run = TrainRunConfig(
            epochs=_get(cp, "train", "epochs", int, args.epochs),
            batch_size=_get(cp, "train", "batch", int, args.batch),
            lr=_get(cp, "train", "lr", float, args.lr),
            seed=seed,
            tbptt_window=_get(cp, "train", "tbptt", int, args.tbptt),
            weight_decay=_get(cp, "train", "weight_decay", float),
            patience=_get(cp, "train", "patience", int),
            plateau=_get(cp, "train", "plateau", bool),
            select_frac=_get(cp, "train", "select_frac", float, args.select_frac),
            jitter=_get(cp, "train", "jitter", bool),
        )
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid training settings: {exc}", EXIT_CONFIG)
    head = _get(cp, "train", "head", str, args.head)
    if head not in ("kraus", "direct"):
        raise CliError(f"unknown head {head!r}", EXIT_CONFIG)
    return mcfg, run, head


def cmd_train(args, cp) -> list[Path]:
    from .backbones import DivergenceError
    from .dataset import read_stats, read_trajectories
    from .model import Model
    from .sim import standardize
    from .train import TrainingDivergence, fit, save_checkpoint

    mcfg, run, head = _train_config(args, cp)
    data = Path(args.data)
    train_path = data / "train.qtrj" if data.is_dir() else data
    stats_path = Path(args.stats) if args.stats else train_path.parent / "stats.json"
    try:
        _verify_manifest(train_path)
        ts = read_trajectories(train_path)
        stats, stats_doc = read_stats(stats_path)
    except OSError as exc:
        raise CliError(f"cannot read training data: {exc}", EXIT_IO)
    if stats_doc.get("source_sha256") not in (None, ts.digest):
        raise CliError(f"{stats_path} was computed from a different training file", EXIT_DIGEST)
    if args.limit:
        ts = ts.subset(np.arange(min(args.limit, len(ts))))
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    model = Model(mcfg, head)
    meta = {"train_digest": ts.digest, "train_file": str(train_path.name), "n_traj": len(ts),
            "train_seeds_sha256": _seed_hash(ts.seed), "stats": {"mu": stats.mu, "sigma": stats.sigma}}
    try:
        best, _ = fit(run, model, standardize(ts.record, stats), ts.states(), log_path=log_path, meta=meta)
    except (TrainingDivergence, DivergenceError) as exc:
        last = getattr(exc, "last_good", None)
        if last is not None:
            save_checkpoint(out, last)
            print(out)
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED)
    try:
        save_checkpoint(out, best)
    except OSError as exc:
        raise CliError(f"cannot write checkpoint {out}: {exc}", EXIT_IO)
    return [out, log_path]


def _seed_hash(seeds) -> str:
    import hashlib

    return hashlib.sha256(np.asarray(seeds, dtype="<u8").tobytes()).hexdigest()


def _load_test(path):
    from .dataset import read_trajectories

    path = Path(path)
    if path.is_dir():
        path = path / "test.qtrj"
    try:
        _verify_manifest(path)
        return path, read_trajectories(path)
    except OSError as exc:
        raise CliError(f"cannot read test data: {exc}", EXIT_IO)


def cmd_eval(args, cp) -> list[Path]:
    from .dataset import read_stats
    from .evaluation import DigestError, emit_report, evaluate_model
    from .sim import StandardizationStats
    from .train import load_checkpoint

    try:
        ck = load_checkpoint(args.ckpt)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}", EXIT_IO)
    path, ts = _load_test(args.data)
    if ck.meta.get("train_digest") == ts.digest or ck.meta.get("train_seeds_sha256") == _seed_hash(ts.seed):
        raise CliError("test set is the training set of this checkpoint", EXIT_DIGEST)
    if args.stats:
        stats, doc = read_stats(args.stats)
        if "train_digest" in ck.meta and doc.get("source_sha256") != ck.meta["train_digest"]:
            raise CliError(f"{args.stats} does not belong to the checkpoint's training set", EXIT_DIGEST)
    else:
        stats = StandardizationStats(**ck.meta["stats"])
    model = ck.model()
    name = args.name or f"{model.head}-{model.config.kind}"
    try:
        rep = evaluate_model(model, ts, stats, name=name,
                             meta={"checkpoint_epoch": ck.epoch, "test_file": path.name})
    except DigestError as exc:
        raise CliError(str(exc), EXIT_DIGEST)
    return [emit_report(rep, args.out, args.format)]


def cmd_baseline(args, cp) -> list[Path]:
    from .baseline import FilterConfig, adaptive_filter, exact_filter, write_event_log
    from .evaluation import emit_report, evaluate

    mode = _get(cp, "baseline", "mode", str, args.mode)
    if mode not in ("known", "adaptive"):
        raise CliError(f"unknown baseline mode {mode!r}", EXIT_CONFIG)
    window = _get(cp, "baseline", "window", int, args.window)
    if window < 8:
        raise CliError("baseline window must be at least 8 samples", EXIT_CONFIG)
    path, ts = _load_test(args.data)
    cfg = FilterConfig(window=window)
    preds = np.empty((len(ts), ts.T, 2, 2), dtype=complex)
    events = []
    for i in range(len(ts)):
        if mode == "known":
            preds[i] = exact_filter(ts.record[i], ts.params(i))
        else:
            preds[i], ev = adaptive_filter(ts.record[i], ts.dt, ts.eta, cfg)
            events.append(ev)
    meta = {"mode": mode, "test_file": path.name}
    if mode == "adaptive":
        from dataclasses import asdict

        meta["filter_config"] = asdict(cfg)
    rep = evaluate(preds, ts, f"sme-{mode}", "sme", meta=meta)
    outs = [emit_report(rep, args.out, args.format)]
    if args.events and events:
        write_event_log(args.events, events, cfg)
        outs.append(Path(args.events))
    return outs


def cmd_report(args, cp) -> list[Path]:
    from .evaluation import (DigestError, ablation_delta, csv_to_rows, delta_table_csv, read_report,
                             reports_to_csv)

    try:
        reps = [read_report(p) for p in args.inputs]
    except OSError as exc:
        raise CliError(f"cannot read report: {exc}", EXIT_IO)
    except (ValueError, KeyError) as exc:
        raise CliError(f"malformed report: {exc}", EXIT_CONFIG)
    out = Path(args.out)
    kraus = [r for r in reps if r.head == "kraus"]
    others = [r for r in reps if r.head != "kraus"]
    deltas = []
    try:
        for k in kraus:
            backbone = k.model.split("-", 1)[-1]
            partners = [o for o in others if o.head == "direct" and o.model.split("-", 1)[-1] == backbone]
            partners += [o for o in others if o.head == "sme"]
            deltas += [ablation_delta(k, o) for o in partners]
    except DigestError as exc:
        raise CliError(str(exc), EXIT_DIGEST)
    if args.format == "csv":
        out.write_text(reports_to_csv(reps))
        csv_to_rows(out.read_text())
        outs = [out]
        if deltas:
            dpath = out.with_name(out.stem + ".delta.csv")
            dpath.write_text(delta_table_csv(deltas))
            outs.append(dpath)
        return outs
    doc = {"rows": [r.row() for r in reps], "deltas": deltas}
    out.write_text(json.dumps(doc, indent=1) + "\n")
    return [out]


def cmd_check(args, cp) -> list[Path]:
    """Quick invariant suite; results are written to ``--out`` (if given) and stderr."""
    from . import checks

    results = checks.run_all(seed=_get(cp, "train", "seed", int, args.seed))
    ok = all(r["passed"] for r in results)
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']}: {r['detail']}", file=sys.stderr)
    outs = []
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
        outs.append(Path(args.out))
    if not ok:
        for p in outs:
            print(p)
        raise CliError("invariant check failed", EXIT_CHECK)
    return outs


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    # shared options are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI config file")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="parallel trajectory workers")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    ap = argparse.ArgumentParser(prog="qtw", description=__doc__.splitlines()[0], parents=[common])
    ap.add_argument("--version", action="version", version=f"qtw {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    g = sub.add_parser("gen", help="simulate train/test trajectory files")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--T", type=int)
    g.add_argument("--dt", type=float)
    g.add_argument("--eta", type=float)
    g.add_argument("--seed-train", type=int)
    g.add_argument("--seed-test", type=int)
    g.add_argument("--resample-gamma", action="store_const", const=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True, help="dataset directory or train.qtrj")
    t.add_argument("--stats")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="epoch log (JSON lines)")
    t.add_argument("--model", choices=["rnn", "gru", "lstm", "esn"])
    t.add_argument("--head", choices=["kraus", "direct"])
    t.add_argument("--hidden", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--tbptt", type=int)
    t.add_argument("--select-frac", type=float)
    t.add_argument("--limit", type=int, help="use only the first N training trajectories")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--stats")
    e.add_argument("--out", required=True)
    e.add_argument("--name")
    e.add_argument("--format", choices=["json", "csv"], default="json")

    b = sub.add_parser("baseline", help="run an SME filter baseline on a test set")
    b.add_argument("--data", required=True)
    b.add_argument("--mode", choices=["known", "adaptive"])
    b.add_argument("--window", type=int)
    b.add_argument("--out", required=True)
    b.add_argument("--events", help="per-step estimator log (JSON lines)")
    b.add_argument("--format", choices=["json", "csv"], default="json")

    r = sub.add_parser("report", help="merge reports into a results table with deltas")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=["csv", "json"], default="csv")

    c = sub.add_parser("check", help="run the quick invariant suite")
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    return ap


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "baseline": cmd_baseline,
            "report": cmd_report, "check": cmd_check}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    for name, default in (("config", None), ("workers", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cp = load_config(args.config)
        if args.workers is not None:
            cp["run"]["workers"] = str(args.workers)
        outs = COMMANDS[args.command](args, cp)
        inputs = {}
        for attr in ("data", "ckpt", "stats", "config"):
            p = getattr(args, attr, None)
            if p and Path(p).is_file():
                inputs.update(_digest_in(p))
            elif p and Path(p).is_dir():
                for f in sorted(Path(p).glob("*.qtrj")) + sorted(Path(p).glob("stats.json")):
                    inputs.update(_digest_in(f))
        for p in getattr(args, "inputs", None) or []:
            inputs.update(_digest_in(p))
        if outs:
            first = Path(outs[0])
            man = (first.parent / "run_manifest.json") if args.command == "gen" else \
                first.with_name(first.name + ".run.json")
            seeds = {"seed": _get(cp, "train", "seed", int, getattr(args, "seed", None))}
            outs.append(write_run_manifest(man, args.command, cp, inputs, outs, seeds, started))
    except CliError as exc:
        print(f"qtw {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"qtw {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    for p in outs:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
