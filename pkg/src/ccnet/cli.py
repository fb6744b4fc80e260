"""``ccnet`` command line: gradcheck, train, eval, missing, sweep.

Each command resolves one JSON config (built-in defaults, then ``--config``
file, then flags), writes it to ``<out>/config.json`` and only then starts
working.  Rerunning with ``--config <out>/config.json`` reproduces every CSV.

Exit codes: 0 success, 1 failed check or aborted run, 2 config error,
3 I/O or file-format error.
"""

import argparse
import copy
import csv
import io
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import data, experiments
from . import evaluation as ev
from . import gradcheck as gc
from . import model as mdl
from .errors import CCNetError, ConfigError, FormatError, MetricError, TrainingError
from .training import TrainConfig, fit, log_to_csv

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

DEFAULTS = {
    "seed": None,
    "out": None,
    "manifest": None,
    "synth": {k: v for k, v in asdict(data.SynthConfig()).items() if k != "seed"},
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "checkpoint": None,
    "embeddings": None,
    "export": None,
    "protocols": ["time_label"],
    "subsets": list(ev.DEFAULT_SUBSETS),
    "center": False,
    "missing": {"ratios": list(ev.MISSING_RATIOS), "trials": 10},
    "grid": {"lambdas": list(experiments.LAMBDA_GRID), "alphas": list(experiments.ALPHA_GRID),
             "fixed_alpha": 0.6, "fixed_lambda": 0.3},
    "gradcheck": {"grad_scale": 1.0, "tolerance": gc.TOLERANCE, "cdc_batches": 10},
}

# flag -> dotted config key
FLAG_KEYS = {
    "seed": "seed", "out": "out", "manifest": "manifest", "checkpoint": "checkpoint",
    "embeddings": "embeddings", "export": "export",
    "loss": "train.loss_variant", "norm": "train.norm_variant", "lambda": "train.lam",
    "alpha": "train.alpha", "epochs": "train.epochs", "lr": "train.lr_initial",
    "P": "train.P", "K": "train.K", "metric_on": "train.metric_on",
    "trials": "missing.trials", "grad_scale": "gradcheck.grad_scale",
}


# ---------------------------------------------------------------- config

def _merge(base, over, path=""):
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[k], v, where + ".")
        else:
            base[k] = v


def _set_dotted(cfg, key, value):
    *parents, leaf = key.split(".")
    node = cfg
    for p in parents:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if leaf not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[leaf] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args, env=os.environ):
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc.msg})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        loaded.pop("command", None)
        _merge(cfg, loaded)
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            _set_dotted(cfg, key, v)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        _set_dotted(cfg, key.strip(), _parse_value(value))
    if getattr(args, "protocol", None):
        cfg["protocols"] = list(args.protocol)
    if getattr(args, "subset", None):
        cfg["subsets"] = list(args.subset)
    if getattr(args, "center_row", False):
        cfg["center"] = True

    if cfg["seed"] is None:
        raw = env.get("CCNET_SEED")
        try:
            cfg["seed"] = int(raw) if raw not in (None, "") else 0
        except ValueError:
            raise ConfigError(f"CCNET_SEED must be an integer, got {raw!r}") from None
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {cfg['seed']!r}")
    if cfg["out"] is None:
        cfg["out"] = os.path.join("runs", args.command)
    cfg["command"] = args.command
    validate(cfg)
    return cfg


def train_config(cfg, **over):
    t = dict(cfg["train"], seed=cfg["seed"], **over)
    try:
        return TrainConfig(**t)
    except TypeError as exc:
        raise ConfigError(f"train section: {exc}") from None


def synth_config(cfg):
    try:
        return data.SynthConfig(seed=cfg["seed"], **cfg["synth"])
    except TypeError as exc:
        raise ConfigError(f"synth section: {exc}") from None


def missing_config(cfg):
    m = cfg["missing"]
    return ev.MissingConfig(tuple(float(r) for r in m["ratios"]), int(m["trials"]), cfg["seed"])


def validate(cfg):
    """Build every typed config once so bad values fail before any work."""
    train_config(cfg)
    synth_config(cfg)
    missing_config(cfg)
    for p in cfg["protocols"]:
        if p not in ev.PROTOCOLS:
            raise ConfigError(f"unknown protocol {p!r}; choose from {sorted(ev.PROTOCOLS)}")
    if not cfg["protocols"]:
        raise ConfigError("at least one protocol is required")
    for s in cfg["subsets"]:
        ev.parse_subset(s)
    g = cfg["gradcheck"]
    if not g["tolerance"] > 0 or int(g["cdc_batches"]) < 1:
        raise ConfigError("gradcheck tolerance must be positive and cdc_batches >= 1")
    if not cfg["grid"]["lambdas"] and not cfg["grid"]["alphas"]:
        raise ConfigError("sweep grid is empty")
    if cfg["command"] in ("eval", "missing"):
        if cfg["embeddings"] is None and cfg["checkpoint"] is None:
            raise ConfigError("eval needs --checkpoint or --embeddings")


def echo_config(cfg):
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "config.json"), "w") as fh:
        fh.write(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------- data/features

def load_data(cfg):
    if cfg["manifest"]:
        return data.load_manifest(cfg["manifest"]).validate()
    return data.generate_synthetic(synth_config(cfg))


EMBED_FILES = tuple(f"{m}.ccnf" for m in data.MODALITIES)


def read_embedding_dir(path):
    """Per-split (N, M, D) features and metadata from ``<m>.ccnf`` files plus ``meta.jsonl``."""
    blocks = [data.read_embeddings(os.path.join(path, f)) for f in EMBED_FILES]
    if len({b.shape for b in blocks}) != 1:
        raise FormatError(f"{path}: modality files disagree in shape {[b.shape for b in blocks]}")
    feats = np.stack(blocks, axis=1).astype(np.float64)
    meta = []
    with open(os.path.join(path, "meta.jsonl")) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"meta.jsonl line {lineno}: invalid JSON ({exc.msg})") from None
                for key in ("id", "time", "split"):
                    if key not in rec:
                        raise FormatError(f"meta.jsonl line {lineno}: missing field {key!r}")
                meta.append(rec)
    if len(meta) != len(feats):
        raise FormatError(f"{path}: {len(meta)} metadata rows for {len(feats)} embeddings")
    out = {}
    for split in ("query", "gallery"):
        idx = [i for i, r in enumerate(meta) if r["split"] == split]
        keys = sorted(set().union(*(meta[i].keys() for i in idx)) - {"split"}) if idx else ["id", "time"]
        md = {}
        for k in keys:
            if all(k in meta[i] for i in idx):
                md[k] = np.array([meta[i][k] for i in idx])
        out[split] = (feats[idx], md)
    return out["query"][0], out["gallery"][0], out["query"][1], out["gallery"][1]


def write_embedding_dir(path, qf, gf, qm, gm):
    os.makedirs(path, exist_ok=True)
    feats = np.concatenate([qf, gf])
    for m, name in enumerate(EMBED_FILES):
        data.write_embeddings(os.path.join(path, name), feats[:, m])
    with open(os.path.join(path, "meta.jsonl"), "w") as fh:
        for split, md in (("query", qm), ("gallery", gm)):
            for i in range(len(md["id"])):
                rec = {"id": int(md["id"][i]), "time": int(md["time"][i]), "split": split}
                fh.write(json.dumps(rec) + "\n")


def load_features(cfg):
    if cfg["embeddings"]:
        return read_embedding_dir(cfg["embeddings"])
    params = mdl.load_checkpoint(cfg["checkpoint"])
    return experiments.test_features(params, load_data(cfg))


# ---------------------------------------------------------------- commands

def cmd_gradcheck(cfg):
    g = cfg["gradcheck"]
    results = gc.run_suite(cfg["seed"], float(g["grad_scale"]), float(g["tolerance"]),
                           int(g["cdc_batches"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("check", "max_rel_error", "tolerance", "status"))
    for r in results:
        w.writerow((r.name, f"{r.max_rel_error:.6e}", f"{r.tolerance:.1e}", "pass" if r.passed else "fail"))
    _write(os.path.join(cfg["out"], "gradcheck.csv"), buf.getvalue())
    worst = max(results, key=lambda r: r.max_rel_error / r.tolerance)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"gradcheck: {len(failed)} of {len(results)} checks failed; worst {worst.name} "
              f"(max rel. error {worst.max_rel_error:.3e} >= {worst.tolerance:.1e})", file=sys.stderr)
        return EXIT_FAIL
    print(f"gradcheck: all {len(results)} checks passed; worst {worst.name} "
          f"({worst.max_rel_error:.3e})")
    return EXIT_OK


def cmd_train(cfg):
    manifest = load_data(cfg)
    params, log = fit(manifest, train_config(cfg))
    mdl.save_checkpoint(os.path.join(cfg["out"], "model.ccnl"), params)
    _write(os.path.join(cfg["out"], "train_log.csv"), log_to_csv(log))
    last = log[-1]
    print(f"train: {len(log)} epochs, final L_total {last['L_total']:.4f}, "
          f"intra-modality distance {last['intra_modality_dist']:.4f}")
    return EXIT_OK


def eval_rows(qf, gf, qm, gm, protocols, subsets, center):
    rows = []
    for p in protocols:
        for s in subsets:
            m = ev.modality_subset_eval(qf, gf, qm, gm, s, p)
            rows.append({"protocol": p, "subset": s, **ev._scalars(m)})
        if center:
            rows.append({"protocol": p, "subset": "center", **ev._scalars(ev.center_eval(qf, gf, qm, gm, p))})
    return rows


def cmd_eval(cfg):
    qf, gf, qm, gm = load_features(cfg)
    if cfg["export"]:
        write_embedding_dir(cfg["export"], qf, gf, qm, gm)
    rows = eval_rows(qf, gf, qm, gm, cfg["protocols"], cfg["subsets"], cfg["center"])
    ev.emit_report(rows, os.path.join(cfg["out"], "eval"))
    for r in rows:
        print(f"{r['protocol']:>10} {r['subset']:>6}  mAP {r['mAP']:.4f}  rank1 {r['rank1']:.4f}")
    return EXIT_OK


def cmd_missing(cfg):
    qf, gf, qm, gm = load_features(cfg)
    mcfg = missing_config(cfg)
    rows, trial_rows = [], []
    for p in cfg["protocols"]:
        summary, trials = ev.missing_experiment(qf, gf, qm, gm, mcfg, p)
        rows += [{"protocol": p, "subset": "center", "trial": "mean", **r} for r in summary]
        trial_rows += [{"protocol": p, "subset": "center", **r} for r in trials]
    ev.emit_report(rows, os.path.join(cfg["out"], "missing"))
    _write(os.path.join(cfg["out"], "missing_trials.csv"), ev.report_rows_to_csv(trial_rows))
    for r in rows:
        print(f"{r['protocol']:>10} ratio {r['ratio']:.2f}  mAP {r['mAP']:.4f}  rank1 {r['rank1']:.4f}")
    return EXIT_OK


SWEEP_HEADER = ("param", "lambda", "alpha", "mAP", "rank1", "rank5", "rank10")


def cmd_sweep(cfg):
    manifest = load_data(cfg)
    g = cfg["grid"]
    cells = experiments.sweep_grid(tuple(g["lambdas"]), tuple(g["alphas"]),
                                   g["fixed_alpha"], g["fixed_lambda"])
    rows = experiments.run_sweep(manifest, train_config(cfg), cells, cfg["protocols"][0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r["param"], f"{r['lambda']:g}", f"{r['alpha']:g}"]
                   + [ev._fmt(r[k]) for k in SWEEP_HEADER[3:]])
    _write(os.path.join(cfg["out"], "sweep.csv"), buf.getvalue())
    print(f"sweep: {len(rows)} cells written")
    return EXIT_OK


COMMANDS = {"gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval,
            "missing": cmd_missing, "sweep": cmd_sweep}


# ---------------------------------------------------------------- argv

def build_parser():
    parser = argparse.ArgumentParser(prog="ccnet", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (an echoed config.json works)")
        p.add_argument("--out", help="output directory (default runs/<command>)")
        p.add_argument("--seed", type=int, help="global seed (fallback: $CCNET_SEED, then 0)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key, e.g. synth.id_count=40 (JSON values)")

    def data_flags(p):
        p.add_argument("--manifest", help="JSONL manifest instead of synthetic data")

    def train_flags(p):
        p.add_argument("--loss", help="ce_only, center, hc, cdc_s, cdc_m or cdc")
        p.add_argument("--norm", help="none, IN, LN or ALNU")
        p.add_argument("--lambda", type=float, dest="lambda")
        p.add_argument("--alpha", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("-P", type=int, dest="P")
        p.add_argument("-K", type=int, dest="K")
        p.add_argument("--metric-on", dest="metric_on", choices=("feature", "neck"))

    def feature_flags(p):
        p.add_argument("--checkpoint", help="CCNL checkpoint (features from the data's test splits)")
        p.add_argument("--embeddings", help="directory with rgb/nir/tir.ccnf and meta.jsonl")
        p.add_argument("--protocol", action="append", choices=sorted(ev.PROTOCOLS),
                       help="repeat to evaluate several protocols")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--grad-scale", type=float, dest="grad_scale",
                   help="test hook: multiply the analytic CdC gradient by this constant")

    p = sub.add_parser("train", help="train one model")
    common(p), data_flags(p), train_flags(p)

    p = sub.add_parser("eval", help="modality-subset retrieval grid")
    common(p), data_flags(p), feature_flags(p)
    p.add_argument("--subset", action="append", help="R, N, T or '+' joins; repeatable")
    p.add_argument("--center", action="store_true", dest="center_row",
                   help="add a masked-center row per protocol")
    p.add_argument("--export", help="also write the evaluated features as an embeddings directory")

    p = sub.add_parser("missing", help="random missing-modality experiment")
    common(p), data_flags(p), feature_flags(p)
    p.add_argument("--trials", type=int)

    p = sub.add_parser("sweep", help="lambda / alpha grid")
    common(p), data_flags(p), train_flags(p)
    p.add_argument("--protocol", action="append", choices=sorted(ev.PROTOCOLS))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        echo_config(cfg)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, MetricError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except CCNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
