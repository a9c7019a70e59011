"""Command-line front end: synth, train, eval, export-repr, sweep."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataFormatError, load_dataset, save_dataset, split_train_test, synthesize
from .diffcore import DegeneracyError
from .evaluation import DegenerateGeometryError
from .losses import LossWeights
from .model import ArchConfig, load_checkpoint
from .rigidity import RigidityThresholds
from .trainer import ABLATIONS, TrainConfig, evaluate, predict, robustness_sweep, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
FORMATS = ("keypoints-json", "mocap-csv")


class CliError(Exception):
    def __init__(self, code, tag, msg):
        super().__init__(msg)
        self.code = code
        self.tag = tag


def _usage(msg):
    return CliError(EXIT_USAGE, "E_USAGE", msg)


def _data(msg):
    return CliError(EXIT_DATA, "E_DATA", msg)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _usage(f"{self.prog}: {message}")


_DEF = TrainConfig(ArchConfig(P=4))

# flat config key -> (type, default)
CONFIG_KEYS = {
    "epochs": (int, _DEF.epochs),
    "lr": (float, _DEF.lr),
    "decay": (float, _DEF.decay),
    "batch_size": (int, _DEF.batch_size),
    "seed": (int, _DEF.seed),
    "block": (int, _DEF.block),
    "bank_capacity": (int, _DEF.bank_capacity),
    "lambda1": (float, _DEF.weights.lambda1),
    "lambda2": (float, _DEF.weights.lambda2),
    "tau": (float, _DEF.thresholds.tau),
    "xi": (float, _DEF.thresholds.xi),
    "T": (int, _DEF.arch.T),
    "channels": (list, list(_DEF.arch.channels)),
    "rot_layers": (list, list(_DEF.arch.rot_layers)),
    "joint": (bool, _DEF.joint),
    "random_rotation": (bool, _DEF.random_rotation),
    "eval_every": (int, _DEF.eval_every),
    "checkpoint_every": (int, _DEF.checkpoint_every),
    "msr_cache_limit": (int, _DEF.msr_cache_limit),
    "ablation": (str, "full"),
}


HELP = {
    "epochs": "training epochs",
    "lr": "Adam learning rate",
    "decay": "learning-rate decay per epoch",
    "batch_size": "frames per batch",
    "seed": "seed for init, shuffling and permutations",
    "block": "epochs per alternation block",
    "bank_capacity": "memory bank size",
    "lambda1": "contrastive loss weight",
    "lambda2": "consistency loss weight",
    "tau": "msr threshold for positives",
    "xi": "msr threshold for negatives",
    "T": "recursions per module",
    "channels": "module widths, halving",
    "rot_layers": "rotation network widths, last must be 6",
    "joint": "use both regularizers every epoch",
    "random_rotation": "consistency with random cameras",
    "eval_every": "epochs between e3D evaluations, 0 disables",
    "checkpoint_every": "epochs between checkpoints, 0 disables",
    "msr_cache_limit": "largest dataset whose msr table is precomputed",
}


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_config(path):
    """Flat key/value TOML document; unknown keys and wrong types are usage errors."""
    try:
        doc = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise _usage(f"cannot read config {path}: {e.strerror}") from e
    except tomllib.TOMLDecodeError as e:
        raise _usage(f"config {path}: {e}") from e
    out = {}
    for key, val in doc.items():
        if key not in CONFIG_KEYS:
            raise _usage(f"config {path}: unknown field {key!r}")
        kind = CONFIG_KEYS[key][0]
        ok = {
            int: isinstance(val, int) and not isinstance(val, bool),
            float: isinstance(val, (int, float)) and not isinstance(val, bool),
            bool: isinstance(val, bool),
            str: isinstance(val, str),
            list: isinstance(val, list) and all(isinstance(v, int) for v in val),
        }[kind]
        if not ok:
            raise _usage(f"config {path}: field {key!r} must be {kind.__name__}, got {val!r}")
        out[key] = float(val) if kind is float else val
    return out


def build_config(P, settings):
    s = {k: d for k, (_, d) in CONFIG_KEYS.items()}
    s.update(settings)
    if s["ablation"] not in ABLATIONS:
        raise _usage(f"field 'ablation' must be one of {sorted(ABLATIONS)}, got {s['ablation']!r}")
    try:
        arch = ArchConfig(P=P, channels=tuple(s["channels"]), T=s["T"], rot_layers=tuple(s["rot_layers"]))
        cfg = TrainConfig(
            arch, epochs=s["epochs"], lr=s["lr"], decay=s["decay"], batch_size=s["batch_size"],
            weights=LossWeights(s["lambda1"], s["lambda2"]),
            thresholds=RigidityThresholds(s["tau"], s["xi"]),
            bank_capacity=s["bank_capacity"], block=s["block"], seed=s["seed"], joint=s["joint"],
            random_rotation=s["random_rotation"], eval_every=s["eval_every"],
            checkpoint_every=s["checkpoint_every"], msr_cache_limit=s["msr_cache_limit"],
        )
    except ValueError as e:
        raise _usage(f"invalid configuration: {e}") from e
    return cfg.with_ablation(s["ablation"]), s


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load(args):
    return load_dataset(args.dataset, args.format, getattr(args, "gt", None))


def _checkpoint_for(path, ds):
    params, extra = load_checkpoint(path)
    if params.cfg.P != ds.P:
        raise _data(f"incompatible inputs: checkpoint expects P={params.cfg.P}, dataset has P={ds.P}")
    return params, extra


def cmd_synth(args):
    if args.k < 1:
        raise _usage(f"--k must be >= 1, got {args.k}")
    try:
        ds = synthesize(args.p, args.f, args.k, camera_seed=args.seed,
                        shape_seed=args.seed if args.shape_seed is None else args.shape_seed,
                        noise_ratio=args.noise)
    except ValueError as e:
        raise _usage(str(e)) from e
    save_dataset(ds, args.out, "keypoints-json")
    print(f"wrote {len(ds)} frames (P={ds.P}, K={args.k}) to {args.out}")


def _train_settings(args):
    settings = read_config(args.config) if args.config else {}
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    return settings


def cmd_train(args):
    ds = _load(args)
    cfg, flat = build_config(ds.P, _train_settings(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = (split_train_test(ds) if args.split else (ds, None))
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": flat,
        "train_config": cfg.to_dict(),
        "dataset": {"path": str(args.dataset), "format": args.format, "sha256": _sha256(args.dataset),
                    "frames": len(ds), "P": ds.P, "split": bool(args.split)},
        "artifacts": {"log": "log.jsonl", "checkpoint": "checkpoint_final.npz"},
    }
    if args.gt:
        manifest["dataset"]["gt_sha256"] = _sha256(args.gt)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    params, recs = train(train_ds, cfg, test_ds, out_dir=out, log_path=out / "log.jsonl")
    last = recs[-1] if recs else {}
    summary = f"trained {cfg.epochs} epochs ({flat['ablation']}), {params.count()} parameters"
    if "loss_reproj" in last:
        summary += f", final loss_reproj={last['loss_reproj']:.6g}"
    for key in ("e3d_train", "e3d_test"):
        if key in last:
            summary += f", {key}={last[key]:.6g}"
    print(summary)


def cmd_eval(args):
    ds = _load(args)
    params, _ = _checkpoint_for(args.checkpoint, ds)
    if not ds.has_gt:
        raise _data(f"dataset {args.dataset} has no ground truth")
    report = evaluate(params, ds)
    if args.out:
        report.to_json(args.out)
    print(f"mean_e3d={report.mean_e3d:.6g} frames={report.frame_count} "
          f"reflections={sum(report.reflections)}")


def cmd_export_repr(args):
    ds = _load(args)
    params, _ = _checkpoint_for(args.checkpoint, ds)
    _, _, H = predict(params, ds)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"h{i}" for i in range(H.shape[1])])
        for f, h in zip(ds.frames, H):
            w.writerow([f.index] + [repr(float(v)) for v in h])
    print(f"wrote {len(H)} representations of dimension {H.shape[1]} to {args.out}")


def cmd_sweep(args):
    ds = _load(args)
    cfg, _ = build_config(ds.P, _train_settings(args))
    if not ds.has_gt:
        raise _data(f"dataset {args.dataset} has no ground truth")
    rows = robustness_sweep(ds, cfg, args.noise, args.keep)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["setting", "value", "e3d"])
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")


def _dataset_args(p, gt=True):
    p.add_argument("--dataset", required=True, help="input dataset file")
    p.add_argument("--format", choices=FORMATS, default="keypoints-json",
                   help="dataset format (default: keypoints-json)")
    if gt:
        p.add_argument("--gt", help="ground-truth CSV for mocap-csv datasets")


def _training_args(p):
    p.add_argument("--config", help="flat TOML file with training settings; flags override it")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default=None,
                   help="model variant (default: full)")
    flag_types = {int: int, float: float, bool: _bool, list: _int_list, str: str}
    for key, (kind, default) in CONFIG_KEYS.items():
        if key == "ablation":
            continue
        shown = ",".join(map(str, default)) if isinstance(default, list) else default
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=flag_types[kind], default=None,
                       metavar=kind.__name__.upper(), help=f"{HELP[key]} (default: {shown})")


def build_parser():
    parser = _Parser(prog="prrrn", description="Non-rigid structure from motion with residual-recursive networks.")
    parser.add_argument("--version", action="version", version=f"prrrn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic low-rank deformable dataset")
    p.add_argument("--p", type=int, default=20, help="keypoints per frame (default: 20)")
    p.add_argument("--f", type=int, default=800, help="frame count (default: 800)")
    p.add_argument("--k", type=int, default=3, help="basis shape count (default: 3)")
    p.add_argument("--noise", type=float, default=0.0, help="noise ratio ||noise||/||W|| (default: 0.0)")
    p.add_argument("--seed", type=int, default=0, help="camera seed (default: 0)")
    p.add_argument("--shape-seed", type=int, default=None, help="shape seed (default: same as --seed)")
    p.add_argument("--out", required=True, help="output keypoints-json file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write manifest, log and checkpoints")
    _dataset_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", action="store_true",
                   help="hold out the last 20%% of frames as a test set (default: off)")
    _training_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Procrustes-aligned 3D error of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _dataset_args(p)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-repr", help="write unit-norm shape representations as CSV")
    p.add_argument("--checkpoint", required=True)
    _dataset_args(p, gt=False)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_export_repr)

    p = sub.add_parser("sweep", help="robustness table over noise ratios and down-sampling")
    _dataset_args(p)
    p.add_argument("--noise", type=_float_list, default=[0.0], help="noise ratios (default: 0.0)")
    p.add_argument("--keep", type=_float_list, default=[1.0], help="keep fractions (default: 1.0)")
    p.add_argument("--out", required=True, help="output CSV of setting,value,e3d")
    _training_args(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except CliError as e:
        print(f"error[{e.tag}]: {e}", file=sys.stderr)
        return e.code
    except (DataFormatError, FileNotFoundError, IsADirectoryError) as e:
        print(f"error[E_DATA]: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error[E_DATA]: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DegeneracyError, DegenerateGeometryError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"error[E_NUMERIC]: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error[E_IO]: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
