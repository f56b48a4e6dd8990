"""Command-line entry point: data generation, training, evaluation,
ablations, and SVG export, each wrapped in a run manifest.

Config files are flat ``key = value`` text; blank lines and ``#``
comments are ignored. Recognized keys:

  model: kind hidden n_particles alpha encoder_width map_channels
         map_kernel map_feat input_dim output_dim use_bn_relu resample
  train: lr batch_size clip_norm l2 epochs seed bptt_len beta pred_weight
  run:   data eval_seeds

``map_channels`` and ``eval_seeds`` are comma-separated integers, flag
values beat config values, and ``PFRNN_SEED`` is the fallback when no
seed is given anywhere. Exit codes: 0 success, 2 bad arguments or
config, 3 I/O failure, 4 run aborted on non-finite numbers.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict

from . import maze as maze_mod
from . import plots
from .autodiff import RngStream
from .training import (ModelSpec, TrainConfig, ablation_suite, build_model,
                       compile_trajectories, evaluate, load_checkpoint,
                       restore_model, save_checkpoint, train, write_csv)

log = logging.getLogger(__name__)


class ConfigError(Exception):
    """Unusable configuration: unknown key, bad value, missing input."""


# ---------------------------------------------------------------------------
# config files


def _parse_bool(text):
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(text)


def _parse_int_tuple(text):
    return tuple(int(part) for part in text.split(","))


def _parse_int_pair(text):
    pair = _parse_int_tuple(text)
    if len(pair) != 2:
        raise ValueError(text)
    return pair


_MODEL_KEYS = {
    "kind": str, "hidden": int, "n_particles": int, "alpha": float,
    "encoder_width": int, "map_channels": _parse_int_pair,
    "map_kernel": int, "map_feat": int, "input_dim": int, "output_dim": int,
    "use_bn_relu": _parse_bool, "resample": _parse_bool,
}
_TRAIN_KEYS = {
    "lr": float, "batch_size": int, "clip_norm": float, "l2": float,
    "epochs": int, "seed": int, "bptt_len": int, "beta": float,
    "pred_weight": float,
}
_RUN_KEYS = {"data": str, "eval_seeds": _parse_int_tuple}


def load_config(path):
    """Read a flat key=value file into a raw string dict."""
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, sep, value = stripped.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value, "
                                  f"got {stripped!r}")
            raw[key.strip()] = value.strip()
    return raw


def _env_seed():
    text = os.environ.get("PFRNN_SEED")
    if text is None:
        return None
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"PFRNN_SEED must be an integer, got {text!r}")


def resolve_config(raw):
    """Raw string dict -> (ModelSpec, TrainConfig, run-options dict)."""
    spec_kw, train_kw, run = {}, {}, {}
    for key, text in raw.items():
        for table, dest in ((_MODEL_KEYS, spec_kw), (_TRAIN_KEYS, train_kw),
                            (_RUN_KEYS, run)):
            if key in table:
                try:
                    dest[key] = table[key](text)
                except (ValueError, TypeError):
                    raise ConfigError(f"bad value for {key}: {text!r}")
                break
        else:
            raise ConfigError(f"unknown config key: {key!r}")
    if "seed" not in train_kw:
        env = _env_seed()
        if env is not None:
            train_kw["seed"] = env
    try:
        spec = ModelSpec(**spec_kw)
        config = TrainConfig(**train_kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc))
    return spec, config, run


def _apply_overrides(raw, args):
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        raw[key.strip()] = value.strip()
    for flag in ("seed", "epochs", "data"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = str(value)
    return raw


def _load_run_config(args):
    raw = _apply_overrides(load_config(args.config), args)
    spec, config, run = resolve_config(raw)
    if "data" not in run:
        raise ConfigError("no dataset: set data= in the config or pass --data")
    return spec, config, run


# ---------------------------------------------------------------------------
# run manifests


def _blob_hash(data):
    head = b"blob %d\x00" % len(data)
    return hashlib.sha1(head + data).hexdigest()


def hash_input(path):
    """Content hash of a file, or of a directory's (name, hash) listing."""
    if os.path.isdir(path):
        lines = []
        for name in sorted(os.listdir(path)):
            sub = os.path.join(path, name)
            if os.path.isfile(sub):
                lines.append(f"{hash_input(sub)} {name}")
        return _blob_hash("\n".join(lines).encode())
    with open(path, "rb") as fh:
        return _blob_hash(fh.read())


def write_manifest(out_dir, command, args, config_snapshot, seeds, inputs):
    """Record what is about to run; written before any output exists."""
    manifest = {
        "command": command,
        "argv": list(getattr(args, "argv", [])),
        "config_path": getattr(args, "config", None),
        "config": config_snapshot,
        "seeds": list(seeds),
        "input_hashes": {path: hash_input(path) for path in inputs},
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "written_at_unix": round(time.time(), 3),
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _config_snapshot(spec, config, run):
    snap = {"model": asdict(spec), "train": asdict(config)}
    snap["run"] = {k: list(v) if isinstance(v, tuple) else v
                   for k, v in run.items()}
    return snap


def _load_dataset(data_dir, splits):
    maze, meta = maze_mod.load_metadata(data_dir)
    out = {}
    for split in splits:
        trajs = maze_mod.load_trajectories(data_dir, split)
        out[split] = compile_trajectories(trajs, maze.n)
    return maze, meta, out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    seed = args.seed
    if seed is None:
        seed = _env_seed()
    if seed is None:
        seed = 0
    if args.num_traj < 1 or args.traj_len < 1:
        raise ConfigError("--num-traj and --traj-len must be positive")
    counts = {"train": args.num_traj,
              "val": max(1, args.num_traj // 10),
              "test": max(1, args.num_traj // 5)}
    snapshot = {"maze_size": args.maze_size, "traj_len": args.traj_len,
                "counts": counts, "seed": seed}
    write_manifest(args.out, "gen-data", args, snapshot, [seed], [])
    maze = maze_mod.generate_maze(args.maze_size, seed=seed)
    paths = maze_mod.generate_dataset(maze, args.out, counts, args.traj_len,
                                      seed)
    print(json.dumps({"out": args.out, "counts": counts,
                      "files": sorted(os.path.basename(p)
                                      for p in paths.values())}))
    return 0


def cmd_train(args):
    spec, config, run = _load_run_config(args)
    maze, _, data = _load_dataset(run["data"], ("train", "val"))
    write_manifest(args.out, "train", args, _config_snapshot(spec, config, run),
                   [config.seed], [args.config, run["data"]])
    model = build_model(spec, maze, RngStream(config.seed))
    ckpt, history = train(model, data["train"], data["val"], config)
    ckpt_path = os.path.join(args.out, "checkpoint.ckpt")
    save_checkpoint(ckpt, ckpt_path)
    if history:
        write_csv(history, os.path.join(args.out, "metrics.csv"))
    if ckpt.diverged:
        print("run aborted on non-finite numbers; last good state saved",
              file=sys.stderr)
        return 4
    best = min(row["val_last_step_mse"] for row in history)
    print(json.dumps({"checkpoint": ckpt_path, "epochs_run": len(history),
                      "best_val_last_step_mse": best}))
    return 0


def _eval_seeds(args, run=None):
    if getattr(args, "eval_seeds", None):
        try:
            return _parse_int_tuple(args.eval_seeds)
        except ValueError:
            raise ConfigError(f"bad --eval-seeds: {args.eval_seeds!r}")
    if run and "eval_seeds" in run:
        return run["eval_seeds"]
    return (101, 211, 307)


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    data_maze, _, data = _load_dataset(args.data, (args.split,))
    if data_maze.grid_strings() != model.maze.grid_strings():
        raise ConfigError("dataset map differs from the checkpoint map")
    seeds = _eval_seeds(args)
    if args.out:
        write_manifest(args.out, "eval", args,
                       {"split": args.split, "eval_seeds": list(seeds)},
                       list(seeds), [args.checkpoint, args.data])
    inputs, targets = data[args.split]
    result = evaluate(model, inputs, targets, eval_seeds=seeds)
    text = json.dumps(result, sort_keys=True)
    if args.out:
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_ablate(args):
    spec, config, run = _load_run_config(args)
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    maze, _, data = _load_dataset(run["data"], ("train", "val", "test"))
    write_manifest(args.out, "ablate", args,
                   _config_snapshot(spec, config, run),
                   [config.seed], [args.config, run["data"]])
    csv_path = os.path.join(args.out, "ablation.csv")
    rows = ablation_suite(spec, config, maze, data["train"], data["val"],
                          data["test"], csv_path=csv_path,
                          workers=args.workers)
    failed = [r["variant"] for r in rows if r["status"] != "ok"]
    print(json.dumps({"csv": csv_path, "variants": len(rows),
                      "failed": failed}))
    return 0


def _plot_metrics(path, out_dir):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"empty CSV: {path}")
    columns = rows[0].keys()
    if "epoch" in columns:
        y_keys = [k for k in ("train_loss", "val_last_step_mse",
                              "val_sequence_mse") if k in columns]
        if not y_keys:
            raise ConfigError(f"{path}: no loss columns next to 'epoch'")
        chart = plots.line_chart(rows, "epoch", y_keys, title="training run")
        out = os.path.join(out_dir, "loss_curves.svg")
    elif "variant" in columns or "kind" in columns:
        label_key = "variant" if "variant" in columns else "kind"
        metric = next((k for k in ("test_last_step_mse", "val_last_step_mse")
                       if k in columns), None)
        if metric is None:
            raise ConfigError(f"{path}: no last-step MSE column to compare")
        labels, values = [], []
        for row in rows:
            if row.get(metric):
                labels.append(row[label_key])
                values.append(float(row[metric]))
        if not labels:
            raise ConfigError(f"{path}: column {metric} has no values")
        chart = plots.bar_chart(labels, values, title=metric, y_label=metric)
        out = os.path.join(out_dir, "comparison.svg")
    else:
        raise ConfigError(
            f"{path}: expected an 'epoch' column or a 'variant'/'kind' column")
    plots.write_svg(chart, out)
    return [out]


def cmd_plot(args):
    if not args.metrics and not args.checkpoint:
        raise ConfigError("nothing to plot: pass --metrics and/or --checkpoint")
    os.makedirs(args.out, exist_ok=True)
    inputs = [p for p in (args.metrics, args.checkpoint, args.data) if p]
    write_manifest(args.out, "plot", args,
                   {"traj_index": args.traj_index, "split": args.split},
                   [args.seed if args.seed is not None else 0], inputs)
    wrote = []
    if args.metrics:
        wrote += _plot_metrics(args.metrics, args.out)
    if args.checkpoint:
        if not args.data:
            raise ConfigError("--checkpoint needs --data for a trajectory")
        model = restore_model(load_checkpoint(args.checkpoint))
        trajs = maze_mod.load_trajectories(args.data, args.split)
        if not 0 <= args.traj_index < len(trajs):
            raise ConfigError(f"--traj-index out of range (0..{len(trajs)-1})")
        seed = args.seed
        if seed is None:
            seed = _env_seed() or 0
        wrote += plots.particle_frames(model, trajs[args.traj_index], args.out,
                                       seed=seed, max_frames=args.max_frames)
    print(json.dumps({"wrote": wrote}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pfrnn",
        description="Particle filter recurrent networks on maze localization.")
    sub = parser.add_subparsers(dest="cmd", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="simulate and write a dataset")
    p.add_argument("--maze-size", type=int, default=10,
                   help="maze side length (default 10)")
    p.add_argument("--num-traj", type=int, default=1000,
                   help="training trajectories; val/test are 1/10 and 1/5")
    p.add_argument("--traj-len", type=int, default=50,
                   help="steps per trajectory (default 50)")
    p.add_argument("--seed", type=int, default=None,
                   help="map and simulation seed (default PFRNN_SEED or 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="dataset directory (overrides config)")
    p.add_argument("--seed", type=int, help="training seed (overrides config)")
    p.add_argument("--epochs", type=int, help="epochs (overrides config)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", help="split name (default test)")
    p.add_argument("--eval-seeds", metavar="S1,S2,...",
                   help="particle evaluation seeds (default 101,211,307)")
    p.add_argument("--out", help="also write eval.json and a manifest here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ten-variant ablation table")
    p.add_argument("--config", required=True, help="base config (particle model)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes (default 1)")
    p.add_argument("--data", help="dataset directory (overrides config)")
    p.add_argument("--seed", type=int, help="training seed (overrides config)")
    p.add_argument("--epochs", type=int, help="epochs (overrides config)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="export SVG charts and particle frames")
    p.add_argument("--metrics", help="metrics or ablation CSV to chart")
    p.add_argument("--checkpoint", help="checkpoint for particle frames")
    p.add_argument("--data", help="dataset directory for particle frames")
    p.add_argument("--split", default="test", help="split name (default test)")
    p.add_argument("--traj-index", type=int, default=0,
                   help="trajectory to draw (default 0)")
    p.add_argument("--max-frames", type=int, default=None,
                   help="cap on frames written (default: all steps)")
    p.add_argument("--seed", type=int, default=None,
                   help="particle sampling seed (default PFRNN_SEED or 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    args.argv = list(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"error: aborted on non-finite numbers: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
