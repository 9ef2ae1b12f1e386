"""Command-line front end.

Exit codes: 0 success, 2 usage/validation, 3 I/O, 4 numeric/convergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .calirare import (CaliRareConfig, epoch_logger, evaluate, save_log, temperature_scale,
                       train_calirare)
from .errors import CalikitError, CompatibilityError, DomainError
from .gcn import GCNObjective, ModelParams, TrainConfig, fit, inverse_frequency_weights
from .graph import (binarize, gen_synthetic, load_graph, load_split, make_split,
                    normalize_adjacency, save_graph, save_split)
from .influence import SolverConfig, content_key, load_loo_cache, loo_results, save_loo_cache
from .uncertainty import CoverageConfig, jackknife_records, save_records

EDGE_FILE, FEATURE_FILE, LABEL_FILE, SPLIT_FILE = "edges.txt", "features.csv", "labels.txt", "split.csv"
CHECKPOINT = "params.bin"

DEFAULTS = {
    "seed": 0,
    "workers": None,
    "out": "out",
    # data
    "data": None,
    "minority_class": None,
    "lr_c": 20,
    "val_size": 500,
    "test_size": 1000,
    # model / training
    "hidden": 16,
    "lr": 0.01,
    "weight_decay": 5e-4,
    "dropout": 0.5,
    "epochs": 200,
    "patience": 30,
    "method": "baseline",
    "lam": 0.1,
    "alpha": 0.9,
    "epsilon": 0.1,
    "refresh_every": 10,
    # solver
    "damping": 0.01,
    "cg_tol": 1e-6,
    "cg_max_iter": 200,
    "explicit_threshold": 2000,
    "influence_sign": "classical",
    # evaluation
    "bins": 10,
    "diagram_bins": 20,
    "eval_set": "test",
    "checkpoint": None,
    "temperature": None,
    # sweep
    "alphas": [0.7, 0.75, 0.8, 0.85, 0.9],
    "lambdas": [0.1, 0.2, 0.3, 0.4],
}


class UsageError(CalikitError):
    exit_code = 2


def _floats(text):
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    return values


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory (edges.txt, features.csv, labels.txt)")
    data.add_argument("--minority-class", dest="minority_class", type=int)
    data.add_argument("--lr-c", dest="lr_c", type=int, help="training nodes per original class")
    data.add_argument("--val-size", dest="val_size", type=int)
    data.add_argument("--test-size", dest="test_size", type=int)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--hidden", type=int)
    model.add_argument("--lr", type=float)
    model.add_argument("--weight-decay", dest="weight_decay", type=float)
    model.add_argument("--dropout", type=float)
    model.add_argument("--epochs", type=int)
    model.add_argument("--patience", type=int)
    model.add_argument("--lambda", dest="lam", type=float)
    model.add_argument("--alpha", type=float, help="coverage of the jackknife interval")
    model.add_argument("--refresh-every", dest="refresh_every", type=int)
    model.add_argument("--damping", type=float)
    model.add_argument("--cg-tol", dest="cg_tol", type=float)
    model.add_argument("--cg-max-iter", dest="cg_max_iter", type=int)
    model.add_argument("--explicit-threshold", dest="explicit_threshold", type=int)
    model.add_argument("--influence-sign", dest="influence_sign", choices=["classical", "reversed"])

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", help="parameter file written by 'train'")
    ckpt.add_argument("--eval-set", dest="eval_set", choices=["train", "val", "test"])

    parser = argparse.ArgumentParser(prog="calikit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic imbalanced dataset")
    p.add_argument("--blocks", type=_ints, required=True, help="block sizes, e.g. 900,100")
    p.add_argument("--p-in", dest="p_in", type=float, required=True)
    p.add_argument("--p-out", dest="p_out", type=float, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--shift", type=float, required=True)
    p.add_argument("--lr-c", dest="lr_c", type=int)
    p.add_argument("--val-size", dest="val_size", type=int)
    p.add_argument("--test-size", dest="test_size", type=int)

    p = sub.add_parser("train", parents=[common, data, model], help="train a model")
    p.add_argument("--method", choices=["baseline", "calirare", "label-smooth"])
    p.add_argument("--epsilon", type=float, help="label smoothing strength")

    sub.add_parser("uncertainty", parents=[common, data, model, ckpt],
                   help="jackknife uncertainty table")
    sub.add_parser("calibrate", parents=[common, data, model, ckpt],
                   help="fit a temperature on the validation set")
    p = sub.add_parser("evaluate", parents=[common, data, model, ckpt],
                       help="calibration and classification report")
    p.add_argument("--bins", type=int)
    p.add_argument("--diagram-bins", dest="diagram_bins", type=int)
    p.add_argument("--temperature", help="temperature value or JSON file from 'calibrate'")

    p = sub.add_parser("sweep", parents=[common, data, model], help="alpha x lambda grid")
    p.add_argument("--alphas", type=_floats)
    p.add_argument("--lambdas", type=_floats)
    p.add_argument("--bins", type=int)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Built-in defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    cfg.update({k: v for k, v in vars(args).items() if v is not None and k != "config"})
    if cfg["workers"] is None:
        cfg["workers"] = os.cpu_count() or 1
    if cfg["workers"] < 1:
        raise UsageError("--workers must be at least 1")
    if cfg["seed"] < 0:
        raise UsageError("--seed must be non-negative")
    return cfg


# ------------------------------------------------------------------ helpers


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer, np.floating)):
        return x.item()
    return str(x)


def _sha256_files(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _configs(cfg):
    train = TrainConfig(hidden_dim=cfg["hidden"], learning_rate=cfg["lr"],
                        weight_decay=cfg["weight_decay"], dropout=cfg["dropout"],
                        max_epochs=cfg["epochs"], patience=cfg["patience"], seed=cfg["seed"])
    solver = SolverConfig(damping=cfg["damping"], cg_tol=cfg["cg_tol"],
                          cg_max_iter=cfg["cg_max_iter"],
                          explicit_hessian_threshold=cfg["explicit_threshold"],
                          sign=cfg["influence_sign"])
    coverage = CoverageConfig(cfg["alpha"])
    return train, solver, coverage


class Dataset:
    """A dataset directory resolved into a binarized graph and a split."""

    def __init__(self, cfg):
        if not cfg["data"]:
            raise UsageError("--data is required")
        root = Path(cfg["data"])
        files = [root / EDGE_FILE, root / FEATURE_FILE, root / LABEL_FILE]
        for f in files:
            if not f.is_file():
                raise FileNotFoundError(f"missing dataset file {f}")
        raw = load_graph(*files)
        minority = cfg["minority_class"]
        if minority is None:
            counts = raw.class_counts()
            minority = int(np.argmin(np.where(counts > 0, counts, np.iinfo(np.int64).max)))
        self.minority_class = minority
        self.graph = binarize(raw, minority)
        split_file = root / SPLIT_FILE
        if split_file.is_file():
            self.split = load_split(split_file)
            self.split.validate(self.graph)
        else:
            self.split = make_split(self.graph, raw.labels, cfg["lr_c"], cfg["val_size"],
                                    cfg["test_size"], cfg["seed"])
        self.adj = normalize_adjacency(self.graph)
        self.digest = _sha256_files(*files)

    def objective(self, train_cfg: TrainConfig) -> GCNObjective:
        g = self.graph
        w = inverse_frequency_weights(g.labels, self.split.train_ids, g.class_count)
        return GCNObjective(self.adj, g.features, g.labels, self.split.train_ids, w,
                            train_cfg.weight_decay, g.feature_dim, train_cfg.hidden_dim,
                            g.class_count)

    def ids(self, role):
        return self.split.ids(role)


def _load_checkpoint(cfg, ds: Dataset) -> ModelParams:
    path = cfg["checkpoint"] or str(Path(cfg["out"]) / CHECKPOINT)
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    params = ModelParams.load(path)
    g = ds.graph
    if params.d != g.feature_dim or params.c != g.class_count:
        raise CompatibilityError(
            f"checkpoint expects d={params.d}, C={params.c}; dataset has "
            f"d={g.feature_dim}, C={g.class_count}"
        )
    manifest = Path(path).with_name("manifest.json")
    if manifest.is_file():
        recorded = json.loads(manifest.read_text(encoding="utf-8")).get("dataset_sha256")
        if recorded and recorded != ds.digest:
            raise CompatibilityError(f"checkpoint {path} was trained on a different dataset")
    if params.h != cfg["hidden"]:
        cfg["hidden"] = params.h
    return params


def _manifest(cfg, command, **extra):
    out = {"command": command, "config": {k: v for k, v in cfg.items() if k != "workers"}}
    out.update(extra)
    return out


# ------------------------------------------------------------------ commands


def cmd_gen(cfg, args):
    g = gen_synthetic(args.blocks, args.p_in, args.p_out, args.dim, args.shift, cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_graph(g, out / EDGE_FILE, out / FEATURE_FILE, out / LABEL_FILE)
    split = make_split(g, g.labels, cfg["lr_c"], cfg["val_size"], cfg["test_size"], cfg["seed"])
    save_split(split, out / SPLIT_FILE)
    params = {"blocks": args.blocks, "p_in": args.p_in, "p_out": args.p_out, "dim": args.dim,
              "shift": args.shift, "seed": cfg["seed"], "lr_c": cfg["lr_c"],
              "val_size": cfg["val_size"], "test_size": cfg["test_size"]}
    _write_json(out / "manifest.json", {"command": "gen", "parameters": params,
                                        "num_nodes": g.num_nodes, "num_edges": g.num_edges})
    return 0


def cmd_train(cfg, args):
    ds = Dataset(cfg)
    train_cfg, solver, coverage = _configs(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    method = cfg["method"]
    if not 0.0 <= cfg["lam"] <= 1.0:
        raise DomainError(f"lambda {cfg['lam']} outside [0, 1]")
    if method == "calirare":
        cr = CaliRareConfig(lam=cfg["lam"], refresh_every=cfg["refresh_every"], train=train_cfg,
                            solver=solver, coverage=coverage)
        params, _, rows, _ = train_calirare(ds.graph, ds.split, cr, adj=ds.adj,
                                            workers=cfg["workers"], report=False)
    else:
        if method == "label-smooth":
            train_cfg = replace(train_cfg, label_smoothing=cfg["epsilon"])
        rows = []
        val_ids = ds.ids("val") if ds.ids("val").size else ds.ids("train")
        params, _ = fit(ds.graph, ds.split, train_cfg, adj=ds.adj,
                        on_epoch=epoch_logger(ds.graph, val_ids, rows))
    params.save(out / CHECKPOINT)
    save_log(rows, out / "train_log.csv")
    save_split(ds.split, out / SPLIT_FILE)
    _write_json(out / "manifest.json", _manifest(cfg, "train", dataset_sha256=ds.digest,
                                                 minority_class=ds.minority_class,
                                                 epochs_run=len(rows)))
    return 0


def cmd_uncertainty(cfg, args):
    ds = Dataset(cfg)
    params = _load_checkpoint(cfg, ds)
    train_cfg, solver, coverage = _configs(cfg)
    obj = ds.objective(train_cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    key = content_key(obj, params, solver)
    stem = out / "loo"
    try:
        results = load_loo_cache(stem, key)
    except (FileNotFoundError, CompatibilityError):
        results = loo_results(obj, params, solver, workers=cfg["workers"])
        save_loo_cache(results, stem, key)
    records, _ = jackknife_records(obj, params, ds.ids(cfg["eval_set"]), solver, coverage,
                                   results=results)
    save_records(records, out / "uncertainty.csv")
    return 0


def cmd_calibrate(cfg, args):
    ds = Dataset(cfg)
    params = _load_checkpoint(cfg, ds)
    train_cfg, _, _ = _configs(cfg)
    obj = ds.objective(train_cfg)
    val = ds.ids("val")
    T = temperature_scale(obj.cache(params).logits[val], ds.graph.labels[val])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "temperature.json", {"temperature": T,
                                           "at_bound": bool(T < 0.0501 or T > 19.99)})
    return 0


def _temperature(value):
    if value is None:
        return 1.0
    try:
        T = float(value)
    except (TypeError, ValueError):
        with open(value, encoding="utf-8") as fh:
            T = float(json.load(fh)["temperature"])
    if T <= 0:
        raise DomainError("temperature must be positive")
    return T


def cmd_evaluate(cfg, args):
    ds = Dataset(cfg)
    params = _load_checkpoint(cfg, ds)
    train_cfg, solver, coverage = _configs(cfg)
    obj = ds.objective(train_cfg)
    ids = ds.ids(cfg["eval_set"])
    report = evaluate(obj, params, ds.graph.labels, ids, solver, coverage, 1, cfg["workers"],
                      cfg["bins"], _temperature(cfg["temperature"]), cfg["diagram_bins"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    report.save_json(out / "report.json")
    report.bins.save_csv(out / "reliability.csv")
    return 0


SWEEP_FIELDS = ["alpha", "lambda", "macro_ace", "macro_f1"]


def cmd_sweep(cfg, args):
    if not cfg["alphas"] or not cfg["lambdas"]:
        raise UsageError("--alphas and --lambdas must be non-empty")
    ds = Dataset(cfg)
    train_cfg, solver, _ = _configs(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    # keep only complete rows, dropping a line cut short by an interrupted run
    kept, done = [], set()
    if path.is_file():
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                try:
                    alpha, lam, *_ = (float(row[k]) for k in SWEEP_FIELDS)
                except (KeyError, TypeError, ValueError):
                    continue
                if (alpha, lam) not in done:
                    done.add((alpha, lam))
                    kept.append([row[k] for k in SWEEP_FIELDS])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_FIELDS)
        writer.writerows(kept)
    for alpha in cfg["alphas"]:
        for lam in cfg["lambdas"]:
            if (float(alpha), float(lam)) in done:
                continue
            cr = CaliRareConfig(lam=lam, refresh_every=cfg["refresh_every"], train=train_cfg,
                                solver=solver, coverage=CoverageConfig(alpha))
            _, report, _, _ = train_calirare(ds.graph, ds.split, cr, adj=ds.adj,
                                             workers=cfg["workers"], bins=cfg["bins"])
            with open(path, "a", encoding="utf-8", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [repr(float(alpha)), repr(float(lam)), repr(report.macro_ace),
                     repr(report.macro_f1)])
    _write_json(out / "manifest.json", _manifest(cfg, "sweep", dataset_sha256=ds.digest))
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "uncertainty": cmd_uncertainty,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg, args)
    except CalikitError as exc:
        print(f"calikit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"calikit: I/O error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"calikit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
