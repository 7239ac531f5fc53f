"""Command line runner: ``octopus <command> --config run.yaml --set key.sub=value``.

Every command resolves a nested config (defaults < file < ``--set``), validates
it before touching data, and writes deterministic JSON/CSV plus the resolved
config into the output directory.
"""
from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import datasets as ds
from . import downstream as dn
from . import dvqae as dv
from . import fedsim as fs

SCHEMA_VERSION = 1
OUTPUT_ENV = "OCTOPUS_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
COMMANDS = ("train-global", "fine-tune", "simulate", "train-downstream", "eval-privacy", "cost-report")
COST_KEYS = ("N_C", "N_M", "N_D", "N_E", "N_Z", "N_S", "eta", "pi", "N_B", "N_A")

DEFAULTS = {
    "seed": 0,
    "output_dir": "octopus-out",
    "dataset": {
        "kind": "synthetic",  # or "idx"
        "path": None,
        "labels_path": None,
        "limit": None,
        "content_classes": 4,
        "style_classes": 4,
        "samples_per_cell": 50,
        "noise": 0.05,
        "style_scale": 0.3,
        "shape": [3, 16, 16],
        "test": 0.2,
        "atd": 0.15,
    },
    "model": {
        "path": None,  # existing model file; trained from scratch when absent
        "K": 10,
        "M": 64,
        "G": 1,
        "n_c": 1,
        "alpha": 1.0,
        "beta": 0.25,
        "lam": 0.01,
        "gamma_ema": 0.99,
        "eps": 1e-5,
        "arch": "conv",
        "hidden": [16, 32],
        "grid": [2, 2],
        "residual_source": "raw",
    },
    "training": {"lr": 1e-3, "steps": 200, "batch_size": 100, "group_size": 0},
    "fine_tune": {"mode": "encoder_decoder_only", "epochs": 1, "node": 0},
    "federation": {
        "nodes": 4,
        "partition": "iid",
        "partition_fraction": 0.2,
        "sync_period": 0,
        "download_model": True,
    },
    "downstream": {"hidden": [256, 128], "steps": 300, "lr": 1e-3, "batch_size": 100, "feature_mode": "atoms"},
    "privacy": {"views": ["public", "private", "both"], "test_fraction": 0.1, "hidden": [256, 128],
                "steps": 300, "lr": 1e-3, "batch_size": 100},
    "cost": {"N_C": 2, "N_M": 10, "N_D": 100, "N_E": 3, "N_Z": 2, "N_S": 1, "eta": 0.5, "pi": 3,
             "N_B": 4, "N_A": 10},
}

# keys whose default is None but which take a value of this type
_NULLABLE = {"dataset.path": str, "dataset.labels_path": str, "dataset.limit": int, "model.path": str}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

def _merge(base, override, prefix=""):
    for key, val in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{name} must be a mapping")
            _merge(base[key], val, name + ".")
        else:
            base[key] = val


def parse_override(item):
    """``a.b=value`` -> {"a": {"b": value}}; the value is read as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    val = yaml.safe_load(raw) if raw.strip() else None
    out = cur = {}
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = val
    return out


def _coerce(name, val, default):
    """Type-check one value against its default; returns it (floats may be given as ``1e-3``)."""
    if default is None:
        want = _NULLABLE[name]
        if val is not None and not isinstance(val, want):
            raise ConfigError(f"{name} must be {want.__name__} or null")
        return val
    if isinstance(default, float) and isinstance(val, str):
        # YAML 1.1 reads exponent literals without a dot as strings
        try:
            val = float(val)
        except ValueError:
            pass
    if isinstance(default, bool):
        ok = isinstance(val, bool)
    elif isinstance(default, int):
        ok = isinstance(val, int) and not isinstance(val, bool)
    elif isinstance(default, float):
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    elif isinstance(default, list):
        ok = isinstance(val, list)
    else:
        ok = isinstance(val, type(default))
    if not ok:
        raise ConfigError(f"{name} has the wrong type ({type(val).__name__})")
    return val


def _walk(cfg, defaults, prefix=""):
    for key, default in defaults.items():
        name = f"{prefix}{key}"
        if isinstance(default, dict):
            yield from _walk(cfg[key], default, name + ".")
        else:
            yield cfg, key, name, default


def resolve_config(path=None, overrides=(), output_dir=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        _merge(cfg, loaded)
    for item in overrides:
        _merge(cfg, parse_override(item))
    env = os.environ.get(OUTPUT_ENV)
    if output_dir:
        cfg["output_dir"] = output_dir
    elif env:
        cfg["output_dir"] = env
    for section, key, name, default in _walk(cfg, DEFAULTS):
        val = section[key]
        if name.startswith("cost.") and isinstance(val, list):
            section[key] = [_coerce(name, v, float(default)) for v in val]
        else:
            section[key] = _coerce(name, val, default)
    return cfg


def _positive(cfg, *names):
    for name in names:
        sec, key = name.split(".")
        if cfg[sec][key] <= 0:
            raise ConfigError(f"{name} must be > 0")


def validate(cfg, command):
    """Semantic checks; raises ConfigError naming the offending key."""
    d, m, t = cfg["dataset"], cfg["model"], cfg["training"]
    if d["kind"] not in ("synthetic", "idx"):
        raise ConfigError("dataset.kind must be 'synthetic' or 'idx'")
    if command != "cost-report":
        if d["kind"] == "idx":
            if not d["path"]:
                raise ConfigError("dataset.path is required for dataset.kind=idx")
            if not os.path.exists(d["path"]):
                raise ConfigError(f"dataset.path {d['path']!r} does not exist")
        if len(d["shape"]) != 3:
            raise ConfigError("dataset.shape must be [channels, height, width]")
        if not 0 < d["test"] < 1 or not 0 < d["atd"] < 1:
            raise ConfigError("dataset.test and dataset.atd must be fractions in (0, 1)")
        _positive(cfg, "model.K", "model.M", "model.G", "model.n_c", "model.eps", "training.lr",
                  "training.batch_size", "downstream.steps", "downstream.batch_size", "privacy.steps")
        if t["steps"] < 0:
            raise ConfigError("training.steps must be >= 0")
        if m["K"] % m["G"] or m["M"] % m["n_c"]:
            raise ConfigError("model.G must divide model.K and model.n_c must divide model.M")
        if not 0 < m["gamma_ema"] < 1:
            raise ConfigError("model.gamma_ema must lie in (0, 1)")
        if m["lam"] < 0 or m["alpha"] < 0 or m["beta"] < 0:
            raise ConfigError("model.alpha, model.beta and model.lam must be >= 0")
        if m["arch"] not in ("conv", "mlp"):
            raise ConfigError("model.arch must be 'conv' or 'mlp'")
        if m["residual_source"] not in dv.RESIDUAL_SOURCES:
            raise ConfigError(f"model.residual_source must be one of {dv.RESIDUAL_SOURCES}")
        if m["path"] and not os.path.exists(m["path"]):
            raise ConfigError(f"model.path {m['path']!r} does not exist")
        if cfg["fine_tune"]["mode"] not in dv.FINE_TUNE_MODES:
            raise ConfigError(f"fine_tune.mode must be one of {dv.FINE_TUNE_MODES}")
        if cfg["downstream"]["feature_mode"] not in ("atoms", "onehot"):
            raise ConfigError("downstream.feature_mode must be 'atoms' or 'onehot'")
        bad = [v for v in cfg["privacy"]["views"] if v not in dn.VIEWS]
        if bad or not cfg["privacy"]["views"]:
            raise ConfigError(f"privacy.views must be a non-empty subset of {dn.VIEWS}")
        if not 0 < cfg["privacy"]["test_fraction"] < 1:
            raise ConfigError("privacy.test_fraction must lie in (0, 1)")
    if command == "fine-tune" and not m["path"]:
        raise ConfigError("model.path is required for fine-tune")
    if command in ("simulate", "fine-tune"):
        f = cfg["federation"]
        if f["nodes"] < 1:
            raise ConfigError("federation.nodes must be >= 1")
        if f["partition"] not in fs.SCHEMES:
            raise ConfigError(f"federation.partition must be one of {fs.SCHEMES}")
        if f["sync_period"] < 0:
            raise ConfigError("federation.sync_period must be >= 0")
        if not 0 <= cfg["fine_tune"]["node"] < f["nodes"]:
            raise ConfigError("fine_tune.node must index one of the federation.nodes")
        if command == "simulate" and cfg["fine_tune"]["mode"] != "encoder_decoder_only" and f["sync_period"] == 0:
            raise ConfigError("federation.sync_period must be >= 1 when fine_tune.mode updates the codebook")
    if command == "cost-report":
        for key in COST_KEYS:
            vals = cfg["cost"][key] if isinstance(cfg["cost"][key], list) else [cfg["cost"][key]]
            if not vals or any(v < 0 for v in vals):
                raise ConfigError(f"cost.{key} must be non-negative")
    return cfg


# ----------------------------------------------------------------- helpers

def load_dataset(cfg):
    d = cfg["dataset"]
    if d["kind"] == "idx":
        path = d["path"]
        if os.path.isdir(path):
            path = ds.find_mnist(path)
        return ds.load_idx_images(path, d["labels_path"], limit=d["limit"])
    data = ds.synth_content_style(d["content_classes"], d["style_classes"], d["samples_per_cell"], d["noise"],
                                  cfg["seed"], tuple(d["shape"]), d["style_scale"])
    return data if d["limit"] is None else data.subset(np.arange(min(d["limit"], len(data))))


def load_splits(cfg):
    data = load_dataset(cfg)
    return ds.split(data, ds.SplitSpec(cfg["dataset"]["test"], cfg["dataset"]["atd"]), cfg["seed"])


def octopus_config(cfg):
    m, t, f = cfg["model"], cfg["training"], cfg["federation"]
    return fs.OctopusConfig(
        nodes=f["nodes"], partition=f["partition"], partition_fraction=f["partition_fraction"],
        K=m["K"], M=m["M"], G=m["G"], n_c=m["n_c"], decay=m["gamma_ema"], arch=m["arch"],
        hidden=tuple(m["hidden"]), grid=tuple(m["grid"]), global_steps=t["steps"], batch_size=t["batch_size"],
        lr=t["lr"], lam=m["lam"], alpha=m["alpha"], beta=m["beta"], in_eps=m["eps"],
        residual_source=m["residual_source"], fine_tune_mode=cfg["fine_tune"]["mode"],
        fine_tune_epochs=cfg["fine_tune"]["epochs"], sync_period=f["sync_period"],
        classifier_steps=cfg["downstream"]["steps"], classifier_hidden=tuple(cfg["downstream"]["hidden"]),
        download_model=f["download_model"], group_size=t["group_size"], seed=cfg["seed"])


def global_model(cfg, splits):
    """Model from ``model.path`` or freshly trained on the ATD split."""
    if cfg["model"]["path"]:
        return dv.load_model(cfg["model"]["path"]), None
    ocfg = octopus_config(cfg)
    weights = dv.LossWeights(ocfg.alpha, ocfg.beta, ocfg.lam)
    atd = splits.atd
    model = dv.build_model(atd.sample_shape, ocfg.K, ocfg.M, ocfg.G, ocfg.n_c, ocfg.arch, ocfg.hidden, ocfg.grid,
                           ocfg.seed, atd.samples[:max(ocfg.batch_size, 1)], weights, ocfg.decay, ocfg.in_eps,
                           ocfg.residual_source)
    report = dv.train_global(model, atd.samples, atd.private, ocfg.global_steps, ocfg.batch_size, ocfg.lr,
                             ocfg.seed, group_size=ocfg.group_size or None)
    return model, report


def _classifier_config(section, seed):
    return dn.ClassifierConfig(hidden=tuple(section["hidden"]), steps=section["steps"],
                               batch_size=section["batch_size"], lr=section["lr"], seed=seed)


def _clean(obj):
    # numpy scalars/arrays to plain JSON types
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fields, lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow(_clean(row))


def write_metrics(out, command, cfg, metrics):
    write_json(os.path.join(out, "metrics.json"),
               {"schema_version": SCHEMA_VERSION, "command": command, "config": cfg, "metrics": metrics})


# ---------------------------------------------------------------- commands

def cmd_train_global(cfg, out):
    splits = load_splits(cfg)
    model, report = global_model(cfg, splits)
    dv.save_model(model, os.path.join(out, "model.octm"))
    rows = []
    if report is not None:
        for step, (loss, parts) in enumerate(zip(report.losses, report.components)):
            rows.append({"step": step, "loss": loss, **parts})
    write_csv(os.path.join(out, "loss_curve.csv"),
              ["step", "loss", "reconstruction", "latent", "commitment", "codebook"], rows)
    test = splits.test
    metrics = {"steps": report.steps if report else 0,
               "initial_loss": report.initial_loss if report else None,
               "final_loss": report.final_loss if report else None,
               "test_reconstruction_mse": model.reconstruction_error(test.samples, test.private)}
    write_metrics(out, "train-global", cfg, metrics)
    return metrics


def cmd_fine_tune(cfg, out):
    splits = load_splits(cfg)
    model = dv.load_model(cfg["model"]["path"])
    f = cfg["federation"]
    parts = fs.partition(splits.nodes, f["partition"], f["nodes"], cfg["seed"], f["partition_fraction"])
    shard = parts.take(splits.nodes)[cfg["fine_tune"]["node"]]
    if len(shard) < 2:
        raise ds.DatasetError(f"node {cfg['fine_tune']['node']} holds {len(shard)} samples; need at least 2")
    # hold back a tenth of the shard to measure the effect of fine-tuning
    cut = max(1, len(shard) // 10)
    local, held = shard.subset(np.arange(cut, len(shard))), shard.subset(np.arange(cut))
    ft = cfg["fine_tune"]
    tuned = dv.fine_tune_local(model, local.samples, local.private, ft["mode"], ft["epochs"],
                               cfg["training"]["batch_size"], cfg["training"]["lr"], cfg["seed"],
                               cfg["training"]["group_size"] or None)
    dv.save_model(tuned, os.path.join(out, "model_finetuned.octm"))
    metrics = {"node": ft["node"], "local_samples": len(local), "held_out": len(held),
               "held_out_mse_before": model.reconstruction_error(held.samples, held.private),
               "held_out_mse_after": tuned.reconstruction_error(held.samples, held.private),
               "atoms_changed": bool(not np.array_equal(model.codebook.atoms, tuned.codebook.atoms))}
    write_metrics(out, "fine-tune", cfg, metrics)
    return metrics


def cmd_simulate(cfg, out):
    splits = load_splits(cfg)
    base = dv.load_model(cfg["model"]["path"]) if cfg["model"]["path"] else None
    result = fs.run_octopus(octopus_config(cfg), splits, base)
    private = fs.node_private_vectors(result.nodes, cfg["training"]["group_size"] or None)
    leaks = fs.scan_messages(result.messages, splits.nodes.samples, private)
    metrics = dict(result.metrics, privacy_scan_violations=len(leaks))
    fs.write_ledger(result.ledger, os.path.join(out, "ledger.json"), os.path.join(out, "ledger.csv"), metrics)
    write_metrics(out, "simulate", cfg, dict(metrics, ledger=result.ledger.to_dict()))
    return metrics


def cmd_train_downstream(cfg, out):
    splits = load_splits(cfg)
    model, _ = global_model(cfg, splits)
    ccfg = _classifier_config(cfg["downstream"], cfg["seed"])
    mode = cfg["downstream"]["feature_mode"]
    train, test = splits.nodes, splits.test
    idx = model.quantize(model.encode(train.samples)).slice_indices
    test_idx = model.quantize(model.encode(test.samples)).slice_indices
    clf = dn.train_classifier(dn.latent_features(idx, model.codebook, mode), train.content, ccfg,
                              (train.content_count,))
    raw = dn.train_classifier(train.samples.reshape(len(train), -1), train.content, ccfg, (train.content_count,))
    with open(os.path.join(out, "classifier.octc"), "wb") as fh:
        fh.write(clf.to_bytes())
    latent_acc = clf.accuracy(dn.latent_features(test_idx, model.codebook, mode), test.content)
    raw_acc = raw.accuracy(test.samples.reshape(len(test), -1), test.content)
    rows = [{"task": "content", "features": f"latent_{mode}", "accuracy": latent_acc},
            {"task": "content", "features": "raw", "accuracy": raw_acc}]
    write_csv(os.path.join(out, "downstream.csv"), ["task", "features", "accuracy"], rows)
    metrics = {"latent_accuracy": latent_acc, "raw_accuracy": raw_acc, "gap": raw_acc - latent_acc,
               "train_size": len(train), "test_size": len(test)}
    write_metrics(out, "train-downstream", cfg, metrics)
    return metrics


PRIVACY_FIELDS = ["task", "view", "accuracy", "entropy_bits", "K", "G", "n_c", "seed", "class_count", "n_test"]


def cmd_eval_privacy(cfg, out):
    splits = load_splits(cfg)
    model, _ = global_model(cfg, splits)
    data = splits.nodes
    p = cfg["privacy"]
    ccfg = _classifier_config(p, cfg["seed"])
    tr, te = dn.stratified_holdout(data.private, p["test_fraction"], cfg["seed"])
    c = data.private_count
    group = cfg["training"]["group_size"] or None
    reports = []
    for view in p["views"]:
        feats = dn.view_features(model, data.samples, data.private, view, group)
        reports.append(dn.evaluate_adversary(feats[tr], data.private[tr], feats[te], data.private[te], view,
                                             ccfg, c))
    reports.append(dn.uniform_report(data.private[te], c))
    rows = [dict(r.to_dict(), task="private_label", K=model.codebook.K, G=model.codebook.group_count,
                 n_c=model.codebook.slice_count, seed=cfg["seed"]) for r in reports]
    write_csv(os.path.join(out, "privacy.csv"), PRIVACY_FIELDS, [{k: r[k] for k in PRIVACY_FIELDS} for r in rows])
    write_json(os.path.join(out, "privacy.json"), {"schema_version": SCHEMA_VERSION, "rows": rows})
    metrics = {r["view"]: {"accuracy": r["accuracy"], "entropy_bits": r["entropy_bits"]} for r in rows}
    metrics["residual_source"] = model.residual_source
    write_metrics(out, "eval-privacy", cfg, metrics)
    return metrics


COST_FIELDS = list(COST_KEYS) + ["cost_fl", "cost_split", "cost_octopus", "rho"]


def cost_rows(section):
    axes = [section[k] if isinstance(section[k], list) else [section[k]] for k in COST_KEYS]
    rows = []
    for point in itertools.product(*axes):
        params = fs.CostModelParams(**dict(zip(COST_KEYS, point)))
        try:
            rho = fs.efficiency_ratio(params)
        except ZeroDivisionError:
            rho = None
        rows.append(dict(zip(COST_KEYS, point), cost_fl=fs.cost_fl(params), cost_split=fs.cost_split(params),
                         cost_octopus=fs.cost_octopus(params), rho=rho))
    return rows


def cmd_cost_report(cfg, out):
    rows = cost_rows(cfg["cost"])
    write_csv(os.path.join(out, "cost_report.csv"), COST_FIELDS, rows)
    write_json(os.path.join(out, "cost_report.json"), {"schema_version": SCHEMA_VERSION, "rows": rows})
    metrics = {"points": len(rows)}
    write_metrics(out, "cost-report", cfg, metrics)
    return metrics


HANDLERS = {
    "train-global": cmd_train_global,
    "fine-tune": cmd_fine_tune,
    "simulate": cmd_simulate,
    "train-downstream": cmd_train_downstream,
    "eval-privacy": cmd_eval_privacy,
    "cost-report": cmd_cost_report,
}


# -------------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(prog="octopus", description="Privatized latent-code collection toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. model.K=64 (repeatable)")
        p.add_argument("--output-dir", help=f"output directory (beats ${OUTPUT_ENV} and the config)")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = validate(resolve_config(args.config, args.set, args.output_dir), args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        print(yaml.safe_dump(cfg, sort_keys=True), end="")
        return EXIT_OK
    out = cfg["output_dir"]
    try:
        os.makedirs(out, exist_ok=True)
        metrics = HANDLERS[args.command](cfg, out)
    except fs.PhaseError as exc:
        print(f"runtime error in phase {exc.phase}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except dv.TrainingDivergedError as exc:
        print(f"runtime error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ds.DatasetError, ds.IdxFormatError, dv.ModelFormatError, fs.ProtocolError, fs.PrivacyViolation,
            OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(_clean(metrics), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
