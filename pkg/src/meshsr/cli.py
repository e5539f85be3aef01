"""Command-line entry point: gen-data, train, eval, select-hr, probe-landscape.

Exit codes: 0 success, 2 configuration or validation error, 3 divergence or
other runtime failure, 4 I/O or parse error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

from . import datagen, train
from .errors import (ConfigError, ContractError, DimensionError, DivergenceError, ParseError,
                     SolverError, ValidationError)
from .meshcore import dataset_fingerprint, load_dataset, save_dataset
from .models import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
SEED_ENV = "MESHSR_SEED"
RUN_MANIFEST = "run.json"


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(path, f"line {exc.lineno}", exc.msg) from None


def _write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _resolve_seed(flag, file_cfg):
    if flag is not None:
        return int(flag)
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: expected an integer, got {env!r}") from None
    return 0


def _prepare_out(out, inputs=()):
    out = Path(out)
    for src in inputs:
        if src is not None and Path(src).resolve() == out.resolve():
            raise ConfigError(f"--out {out} would overwrite an input directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(command, config, seed, fingerprint, started, artifacts):
    return {"command": command, "config": config, "seed": seed,
            "dataset_fingerprint": fingerprint, "started": started, "finished": _now(),
            "artifacts": sorted(str(a) for a in artifacts)}


# --- gen-data -----------------------------------------------------------------

SPECS = {"poisson": datagen.PoissonSpec, "jitter": datagen.JitterSpec}
DEFAULT_TEST = {"poisson": 20, "jitter": 10}


def _spec_from(kind, obj):
    cls = SPECS[kind]
    known = {f.name for f in fields(cls)}
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"unknown {kind} spec fields: {sorted(extra)}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})
    except TypeError as exc:
        raise ConfigError(f"{kind} spec: {exc}") from None


def cmd_gen_data(args):
    started = _now()
    file_cfg = _read_json(args.config) if args.config else {}
    kind = args.kind or file_cfg.get("kind", "poisson")
    if kind not in SPECS:
        raise ConfigError(f"kind: expected one of {sorted(SPECS)}, got {kind!r}")
    n = args.n if args.n is not None else file_cfg.get("n", 200)
    n_h = args.nh if args.nh is not None else file_cfg.get("nh", 20)
    n_test = args.n_test if args.n_test is not None else file_cfg.get("n_test", DEFAULT_TEST[kind])
    seed = _resolve_seed(args.seed, file_cfg)
    spec = _spec_from(kind, file_cfg.get("spec", {}))
    if n_h < 2:
        raise ValidationError(f"nh: need at least 2 paired samples, got {n_h}")
    if n < n_h:
        raise ValidationError(f"n: total count {n} is smaller than nh={n_h}")
    if n_test < 0:
        raise ValidationError(f"n_test: must be >= 0, got {n_test}")

    out = _prepare_out(args.out)
    gen = datagen.gen_poisson_dataset if kind == "poisson" else datagen.gen_jitter_dataset
    ds = gen(spec, n, n_h, seed, n_test=n_test)
    save_dataset(ds, out)
    config = {"kind": kind, "n": n, "nh": n_h, "n_test": n_test, "spec": asdict(spec)}
    _write_json(_manifest("gen-data", config, seed, dataset_fingerprint(out), started,
                          ["manifest.json", "meshes.jsonl", "samples.jsonl"]), out / RUN_MANIFEST)
    n_paired, n_unpaired = ds.counts
    print(f"wrote {out}: N={n_paired + n_unpaired} N_h={n_paired} test={len(ds.test)}")
    if "max_residual" in ds.provenance:
        print(f"max solver residual: {ds.provenance['max_residual']:.3e}")
    return EXIT_OK


# --- train --------------------------------------------------------------------

TRAIN_FLAGS = ("mode", "mpnn", "hidden", "n_lr_layers", "n_hr_layers", "k", "lr", "max_epochs",
               "patience", "val_fraction", "steps_per_epoch", "loss_weights")


def train_config(args, file_cfg):
    cfg = dict(file_cfg)
    cfg.pop("seed", None)
    for name in TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    if args.centering is not None:
        cfg["node_centering"], cfg["message_centering"] = train.CENTERING[args.centering]
    cfg["seed"] = _resolve_seed(args.seed, file_cfg)
    return train.TrainConfig.from_dict(cfg)


def _load_selection(path, dataset):
    sel = _read_json(path)
    if "indices" not in sel:
        raise ParseError(path, "selection", "missing 'indices'")
    return dataset.restrict_paired(sel["indices"])


def cmd_train(args):
    started = _now()
    file_cfg = _read_json(args.config) if args.config else {}
    config = train_config(args, file_cfg)
    out = _prepare_out(args.out, [args.data])
    dataset = load_dataset(args.data)
    if args.select:
        dataset = _load_selection(args.select, dataset)
    if config.mode == "supervised":
        dataset = dataset.paired_only()
    params, metrics = train.run_training(config, dataset, dump_dir=out)

    save_checkpoint(params, out / "checkpoint", extra={"seed": config.seed})
    train.write_metrics_csv(metrics, out / "metrics.csv")
    train.write_timing_csv(metrics, out / "timing.csv")
    train.write_summary(metrics, config, out / "summary.json")
    echo = config.to_dict()
    echo.update(data=str(args.data), select=args.select)
    _write_json(_manifest("train", echo, config.seed, dataset_fingerprint(args.data), started,
                          ["checkpoint", "metrics.csv", "timing.csv", "summary.json"]),
                out / RUN_MANIFEST)
    print(f"best epoch {metrics.best_epoch}  val RMSE {metrics.best_val_rmse:.6g}  "
          f"test RMSE {metrics.test_rmse}  kNN RMSE {metrics.knn_test_rmse}")
    return EXIT_OK


# --- eval ---------------------------------------------------------------------

def _check_compatible(params, dataset):
    arch = params.arch
    if (arch.d, arch.dim) != (dataset.d, dataset.dim):
        raise DimensionError(
            f"checkpoint expects d={arch.d} field columns on D={arch.dim} meshes, "
            f"dataset has d={dataset.d}, D={dataset.dim}")


def cmd_eval(args):
    started = _now()
    params = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    _check_compatible(params, dataset)
    pairs = dataset.test if args.split == "test" else dataset.paired
    report = train.rmse_report(params, pairs)
    report["split"] = args.split
    print(f"RMSE {report['rmse']:.6g}  per column {report['per_column']}")
    print(f"kNN baseline RMSE {report['knn_rmse']:.6g}")
    if args.out:
        out = _prepare_out(args.out, [args.data, args.checkpoint])
        _write_json(report, out / "eval.json")
        _write_json(_manifest("eval", {"checkpoint": str(args.checkpoint), "data": str(args.data),
                                       "split": args.split},
                              None, dataset_fingerprint(args.data), started, ["eval.json"]),
                    out / RUN_MANIFEST)
    return EXIT_OK


# --- select-hr ----------------------------------------------------------------

def cmd_select_hr(args):
    started = _now()
    dataset = load_dataset(args.data)
    pool = [p.lr for p in dataset.paired]
    if args.nh < 1 or args.nh > len(pool):
        raise ValidationError(f"nh: cannot select {args.nh} samples from a pool of {len(pool)}")
    emb = datagen.lr_embeddings(pool, dataset.stats)
    bandwidth = args.bandwidth if args.bandwidth is not None else datagen.median_bandwidth(emb)
    indices, mmd, _ = datagen.select_hr_mmd(emb, args.nh, bandwidth=bandwidth, seed=args.seed)
    result = {"indices": [int(i) for i in indices], "mmd": float(mmd),
              "bandwidth": float(bandwidth), "pool_size": len(pool)}
    out = Path(args.out)
    if out.parent.resolve() == Path(args.data).resolve():
        raise ConfigError(f"--out {out} would write into the input dataset directory")
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(result, out)
    manifest = _manifest("select-hr", {"data": str(args.data), "nh": args.nh,
                                       "bandwidth": args.bandwidth},
                         args.seed, dataset_fingerprint(args.data), started, [out.name])
    _write_json(manifest, out.with_name(out.stem + ".run.json"))
    print(f"selected {args.nh} of {len(pool)}: MMD {mmd:.6g}")
    return EXIT_OK


# --- probe-landscape ------------------------------------------------------------

def cmd_probe(args):
    started = _now()
    params = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    _check_compatible(params, dataset)
    seed = _resolve_seed(args.seed, {})
    points = train.probe_loss_landscape(params, dataset, args.steps, multiplier=args.multiplier,
                                        lr=args.lr, mode=args.mode, seed=seed)
    out = _prepare_out(args.out, [args.data, args.checkpoint])
    with open(out / "landscape.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("step", "loss", "perturbed_loss"))
        for i, p in enumerate(points):
            w.writerow([i, repr(p.loss), repr(p.perturbed_loss)])
    config = {"checkpoint": str(args.checkpoint), "data": str(args.data), "steps": args.steps,
              "multiplier": args.multiplier, "lr": args.lr, "mode": args.mode}
    _write_json(_manifest("probe-landscape", config, seed, dataset_fingerprint(args.data),
                          started, ["landscape.csv"]), out / RUN_MANIFEST)
    n_bad = sum(not p.finite for p in points)
    print(f"wrote {len(points)} probe points to {out / 'landscape.csv'} ({n_bad} non-finite)")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def _weights(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="meshsr",
                                     description="Mesh super-resolution with complementary learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=sorted(SPECS))
    p.add_argument("--n", type=int, help="total LR samples (paired + unpaired)")
    p.add_argument("--nh", type=int, help="paired samples with an HR solution")
    p.add_argument("--n-test", type=int, dest="n_test", help="held-out test pairs")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file with kind/n/nh/n_test/seed and a 'spec' object")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file mirroring the training config fields")
    p.add_argument("--mode", choices=train.MODES)
    p.add_argument("--mpnn", choices=("gcn", "sage", "gin", "mgn"))
    p.add_argument("--centering", choices=sorted(train.CENTERING))
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr-layers", type=int, dest="n_lr_layers")
    p.add_argument("--hr-layers", type=int, dest="n_hr_layers")
    p.add_argument("--k", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.add_argument("--steps-per-epoch", type=int, dest="steps_per_epoch")
    p.add_argument("--loss-weights", type=_weights, dest="loss_weights")
    p.add_argument("--seed", type=int)
    p.add_argument("--select", help="selection file from select-hr restricting the paired pool")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report RMSE of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "paired"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select-hr", help="choose paired samples by greedy MMD")
    p.add_argument("--data", required=True)
    p.add_argument("--nh", type=int, required=True)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output JSON file")
    p.set_defaults(func=cmd_select_hr)

    p = sub.add_parser("probe-landscape", help="loss along a scaled gradient step")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--multiplier", type=float, default=4.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--mode", choices=train.MODES, default="complementary")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.dump_path is not None:
            print(f"state dumped to {exc.dump_path}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValidationError, DimensionError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
