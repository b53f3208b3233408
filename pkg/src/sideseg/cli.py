"""Command-line entry point.

Subcommands: train, eval, gradcheck, count-params, synth. The config file is a
JSON document with "model" and "train" sections mirroring ModelConfig /
TrainConfig field names 1:1, plus an optional "data" section:

    {"model": {...}, "train": {...},
     "data": {"synthetic": {"n": 8, "seed": 7, "difficulty": "low"}}}
    {"data": {"images_dir": "path", "masks_dir": "path"}}

Exit codes: 0 success, 2 usage, 3 config/checkpoint error, 4 data error,
5 numeric failure. Every run writes one run_manifest.json with artifact hashes.
"""

import argparse
import datetime
import hashlib
import json
import os
import sys
import time

from .data import generate_synthetic, load_folder, save_dataset
from .errors import CheckpointError, ConfigError, DataError, NumericError, ShapeError
from .model import ModelConfig, build, model_from_checkpoint, tiny_config
from .trainer import TrainConfig, evaluate, grad_check, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load_config(path):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _dataset_from_config(doc):
    data = doc.get("data")
    if not data:
        raise ConfigError('config needs a "data" section (synthetic or folder)')
    if "synthetic" in data:
        syn = data["synthetic"]
        try:
            return generate_synthetic(
                n=syn["n"], size=tuple(syn.get("size", (64, 64))),
                seed=syn.get("seed", 0), difficulty=syn.get("difficulty", "low"))
        except KeyError as exc:
            raise ConfigError(f"synthetic data section missing key {exc}") from exc
    if "images_dir" in data:
        return load_folder(data["images_dir"], data.get("masks_dir", data["images_dir"]))
    raise ConfigError('data section must contain "synthetic" or "images_dir"')


def _write_manifest(out_dir, command, args_info, artifacts, started, wall):
    manifest = {
        "command": command,
        **args_info,
        "artifacts": {name: {"path": p, "sha256": _sha256(p)} for name, p in artifacts.items()},
        "started": started,
        "ended": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "wall_time_s": wall,
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return path


def cmd_train(args):
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    t0 = time.monotonic()
    doc = _load_config(args.config)
    model_cfg = ModelConfig.from_dict(doc.get("model", {}))
    if args.seed is not None:
        model_cfg.seed = args.seed
    train_doc = dict(doc.get("train", {}))
    if args.seed is not None:
        train_doc["seed"] = args.seed
    if args.task is not None:
        train_doc["task"] = args.task
    train_cfg = TrainConfig.from_dict(train_doc)
    samples = _dataset_from_config(doc)

    model = build(model_cfg)
    model.store.meta["task"] = train_cfg.task
    os.makedirs(args.out, exist_ok=True)
    _, log, ckpts = train(model, samples, train_cfg, out_dir=args.out)
    log_path = os.path.join(args.out, "train_log.ndjson")
    log.write_ndjson(log_path)
    artifacts = {"log": log_path, "checkpoint": ckpts[-1]}
    _write_manifest(args.out, "train",
                    {"config": os.path.abspath(args.config),
                     "seed": train_cfg.seed, "task": train_cfg.task},
                    artifacts, started, time.monotonic() - t0)
    print(f"trained {train_cfg.epochs} epoch(s); final checkpoint: {ckpts[-1]}")
    return EXIT_OK


def cmd_eval(args):
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    t0 = time.monotonic()
    model = model_from_checkpoint(args.ckpt)
    task = (model.store.meta or {}).get("task", "cod")
    samples = load_folder(args.images, args.masks)
    report = evaluate(model, samples, task=task)
    out_dir = os.path.dirname(os.path.abspath(args.report)) or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(args.report, "w") as f:
        f.write(report.to_json())
    table_path = args.report + ".txt"
    with open(table_path, "w") as f:
        f.write(report.table())
    _write_manifest(out_dir, "eval",
                    {"checkpoint": os.path.abspath(args.ckpt), "task": task,
                     "seed": None},
                    {"report": args.report, "table": table_path}, started,
                    time.monotonic() - t0)
    print(report.table(), end="")
    return EXIT_OK


def cmd_gradcheck(args):
    doc = _load_config(args.config) if args.config else {}
    if doc.get("model"):
        model_cfg = ModelConfig.from_dict(doc["model"])
        model_cfg.dtype = "float64"
    else:
        model_cfg = tiny_config()
    model = build(model_cfg)
    sample = generate_synthetic(1, model_cfg.image_size, seed=args.seed)[0]
    worst = []
    for loss_name in args.losses.split(","):
        report = grad_check(model, loss_name.strip(), sample, tolerance=args.tolerance)
        print(f"== loss {loss_name.strip()} ==")
        print(report.format())
        worst.append(report.passed)
    if not all(worst):
        print("gradient audit FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradient audit passed")
    return EXIT_OK


def cmd_count_params(args):
    doc = _load_config(args.config)
    model_cfg = ModelConfig.from_dict(doc.get("model", {}))
    model = build(model_cfg)
    store = model.store
    rows = []
    prefixes = sorted({name.split(".", 1)[0] for name, _ in store.param_items()})
    for prefix in prefixes:
        rows.append((prefix, store.group_count(prefix + ".", args.filter)))
    total = store.count(args.filter)
    width = max(len(r[0]) for r in rows) + 2
    for name, count in rows:
        print(f"{name:<{width}}{count}")
    print(f"{'total':<{width}}{total}  ({args.filter})")
    return EXIT_OK


def cmd_synth(args):
    h, w = args.size
    samples = generate_synthetic(args.n, (h, w), args.seed, args.difficulty)
    save_dataset(samples, args.out, manifest_extra={
        "seed": args.seed, "size": [h, w], "difficulty": args.difficulty})
    print(f"wrote {len(samples)} samples under {args.out}")
    return EXIT_OK


def _parser():
    p = argparse.ArgumentParser(prog="sideseg",
                                description="Two-stream side-network segmentation runs")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on a config-described dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--task", choices=("cod", "sod", "shadow"), default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on an image/mask folder")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--images", required=True)
    e.add_argument("--masks", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    g.add_argument("--config", default=None,
                   help="model config JSON; defaults to the built-in tiny config")
    g.add_argument("--losses", default="bce_iou,bbce")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("count-params", help="exact parameter counts per module")
    c.add_argument("--config", required=True)
    c.add_argument("--filter", choices=("all", "trainable", "frozen"), default="all")
    c.set_defaults(func=cmd_count_params)

    s = sub.add_parser("synth", help="materialize a synthetic dataset folder")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, nargs=2, default=(64, 64))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--difficulty", choices=("low", "high"), default="low")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
