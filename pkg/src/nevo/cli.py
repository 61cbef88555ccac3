"""Command-line front end.

Commands compose the pipeline: fetch -> train -> evolve -> eval /
corrupt -> report, plus gridsearch for the hyper-parameter sweep.

Run-directory layout produced by `train` and extended by `evolve`:

    config.json     byte-identical copy of the input config
    manifest.json   run id, config digest, dataset fingerprint, artifacts
    metrics.jsonl   one record per epoch/generation (deterministic fields)
    timings.jsonl   wall-clock per epoch/generation (kept out of metrics
                    so metrics files are comparable across machines and
                    worker counts)
    summary.json    final per-stage results
    ring/           end-of-epoch checkpoint ring
    final.ckpt      last gradient-stage parameters
    de_best.ckpt    best evolved parameters
    de_pop/         final population

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
failure (divergence).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as datasets
from .errors import MissingArtifactError, NevoError, NumericError
from .evaluation import count_costs, evaluate, report
from .evolution import (ensure_fitness, grid_search, run_de, sample_context,
                        seed_population)
from .network import param_count
from .persistence import (Checkpoint, load_checkpoint, load_manifest,
                          load_ring, parse_config, save_checkpoint,
                          save_population, save_ring, write_manifest)
from .rng import RngStream
from .training import TrainingDiverged, train

_NS_AUGMENT = 5


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="nevo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    f = sub.add_parser("fetch", help="download and verify a dataset")
    f.add_argument("--dataset", required=True,
                   choices=("mnist", "fashion_mnist"))
    f.add_argument("--out", default=None, help="cache directory")
    f.add_argument("--base-url", default=None)
    f.set_defaults(func=_cmd_fetch)

    t = sub.add_parser("train", help="gradient stage; writes a run directory")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="run directory to create")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evolve", help="evolution stage on an existing run")
    e.add_argument("--run", required=True)
    e.add_argument("--config", default=None,
                   help="override the run's stored config")
    e.add_argument("--soup", action="store_true",
                   help="seed from fresh random networks instead of the ring")
    e.add_argument("--jitter", type=float, default=0.0,
                   help="sd of noise used to top up an underfull ring")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=_cmd_evolve)

    v = sub.add_parser("eval", help="evaluate a checkpoint")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--dataset", default="synthetic",
                   help="synthetic, mnist, fashion_mnist, or cifar10")
    v.add_argument("--data-dir", default=None)
    v.add_argument("--split", default="test", choices=("train", "test"))
    v.add_argument("--corrupted", default=None,
                   help="directory of precomputed NPY corruption sets")
    v.add_argument("--batch-size", type=int, default=256)
    v.set_defaults(func=_cmd_eval)

    c = sub.add_parser("corrupt", help="synthesize a corrupted split")
    c.add_argument("--dataset", default="synthetic")
    c.add_argument("--data-dir", default=None)
    c.add_argument("--split", default="test", choices=("train", "test"))
    c.add_argument("--kind", required=True)
    c.add_argument("--severity", type=int, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=_cmd_corrupt)

    r = sub.add_parser("report", help="merge run summaries into a table")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--format", default="csv", choices=("csv", "json"))
    r.add_argument("--out", default=None, help="write here instead of stdout")
    r.set_defaults(func=_cmd_report)

    g = sub.add_parser("gridsearch", help="hyper-parameter sweep")
    g.add_argument("--config", required=True)
    g.add_argument("--out", default=None,
                   help="directory for grid_results.json (stdout only if unset)")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--jitter", type=float, default=0.0,
                   help="sd of noise used to top up an underfull ring")
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=_cmd_gridsearch)

    z = sub.add_parser("costs", help="operation-count report for a model")
    z.add_argument("--config", required=True)
    z.add_argument("--n-g", type=int, default=1)
    z.add_argument("--n-e", type=int, default=1)
    z.set_defaults(func=_cmd_costs)
    return p


def _load_split_pair(data_cfg):
    """(train, test) datasets for a parsed data section."""
    if data_cfg.name not in ("synthetic", "mnist", "fashion_mnist", "cifar10"):
        raise MissingArtifactError(f"unknown dataset {data_cfg.name!r}")
    if data_cfg.name == "synthetic":
        s = data_cfg.synthetic
        train_ds, test_ds = datasets.make_synthetic_pair(
            s.n_train, s.n_test, s.classes, s.shape, s.noise,
            RngStream(s.seed))
    elif data_cfg.name in ("mnist", "fashion_mnist"):
        ds_dir = Path(data_cfg.dir) if data_cfg.dir else \
            datasets.cache_dir() / data_cfg.name
        if not ds_dir.is_dir():
            raise MissingArtifactError(
                f"dataset directory {ds_dir} not found; run "
                f"`nevo fetch --dataset {data_cfg.name}` first")
        train_ds, test_ds = datasets.load_idx_dir(ds_dir, data_cfg.name)
    else:
        ds_dir = Path(data_cfg.dir) if data_cfg.dir else \
            datasets.cache_dir() / "cifar10"
        batch_files = [ds_dir / f"data_batch_{i}.bin" for i in range(1, 6)]
        train_ds = datasets.load_cifar10(batch_files, "cifar10/train")
        test_ds = datasets.load_cifar10(ds_dir / "test_batch.bin",
                                        "cifar10/test")
    train_ds = train_ds.take(data_cfg.train_limit)
    test_ds = test_ds.take(data_cfg.test_limit)
    return train_ds, test_ds


def _dataset_fingerprint(data_cfg, train_ds, test_ds) -> dict:
    fp = {"name": data_cfg.name, "n_train": len(train_ds),
          "n_test": len(test_ds)}
    if data_cfg.name == "synthetic":
        fp["seed"] = data_cfg.synthetic.seed
    return fp


class _RunWriter:
    """Appends JSONL records; deterministic fields and wall clocks go to
    separate files so metrics can be compared byte-for-byte."""

    def __init__(self, run_dir: Path):
        self.metrics = open(run_dir / "metrics.jsonl", "a")
        self.timings = open(run_dir / "timings.jsonl", "a")

    def record(self, fields: dict, wall_key: dict, wall_ms: float):
        self.metrics.write(json.dumps(fields, sort_keys=True) + "\n")
        self.timings.write(json.dumps({**wall_key, "wall_ms": wall_ms},
                                      sort_keys=True) + "\n")

    def close(self):
        self.metrics.close()
        self.timings.close()


def _read_config_arg(path) -> tuple:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifactError(f"no such config: {p}")
    text = p.read_text()
    return text, parse_config(text)


def _cmd_fetch(args) -> int:
    paths = datasets.fetch(args.dataset, base_url=args.base_url,
                           out_dir=args.out)
    for logical, path in paths.items():
        print(f"{logical}: {path}")
    return 0


def _cmd_train(args) -> int:
    text, cfg = _read_config_arg(args.config)
    bp = cfg.bp if args.seed is None else replace(cfg.bp, seed=args.seed)
    run_dir = Path(args.out)
    if (run_dir / "config.json").exists():
        raise MissingArtifactError(
            f"run directory {run_dir} is already initialized; pick a new --out")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(text)

    train_ds, test_ds = _load_split_pair(cfg.data)
    if cfg.data.augment_multiplier > 1:
        train_ds = datasets.augment(train_ds, cfg.data.augment_multiplier,
                                    cfg.data.max_shift_px,
                                    cfg.data.max_rotate_deg,
                                    RngStream(bp.seed).child(_NS_AUGMENT))
    writer = _RunWriter(run_dir)

    def on_epoch(m):
        writer.record({"stage": "bp", "epoch": m.epoch,
                       "train_loss": m.train_loss, "test_loss": m.test_loss,
                       "test_acc": m.test_acc},
                      {"stage": "bp", "epoch": m.epoch}, m.wall_ms)

    try:
        theta, ring, history = train(cfg.spec, train_ds, bp,
                                     test_data=test_ds, callback=on_epoch)
    except TrainingDiverged as exc:
        if exc.ring is not None and len(exc.ring):
            save_ring(exc.ring, run_dir / "ring", cfg.spec, {"seed": bp.seed})
        writer.close()
        raise
    finally:
        writer.close()

    save_ring(ring, run_dir / "ring", cfg.spec, {"seed": bp.seed})
    last_epoch = history[-1].epoch if history else 0
    last_loss = history[-1].train_loss if history else None
    save_checkpoint(Checkpoint(cfg.spec, theta,
                               {"stage": "bp", "epoch": last_epoch,
                                "loss": last_loss, "seed": bp.seed}),
                    run_dir / "final.ckpt")

    clean = evaluate(cfg.spec, theta, test_ds, cfg.eval.batch_size)
    summary = {
        "model": cfg.model_name or "custom",
        "dataset": cfg.data.name,
        "params": param_count(cfg.spec),
        "stages": [{"stage": "bp", "epochs": last_epoch,
                    "train_loss": last_loss,
                    "test_accuracy": clean.accuracy,
                    "test_ce": clean.mean_ce}],
    }
    (run_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")

    manifest = {
        "run_id": run_dir.name,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "seed": bp.seed,
        "dataset": _dataset_fingerprint(cfg.data, train_ds, test_ds),
        "artifacts": {"config": "config.json", "metrics": "metrics.jsonl",
                      "timings": "timings.jsonl", "summary": "summary.json",
                      "ring": "ring", "final": "final.ckpt"},
    }
    write_manifest(run_dir, manifest)
    print(f"trained {summary['model']} on {train_ds.name}: "
          f"test accuracy {clean.accuracy:.4f} "
          f"({len(ring)} ring checkpoints)")
    return 0


def _cmd_evolve(args) -> int:
    run_dir = Path(args.run)
    config_path = Path(args.config) if args.config else run_dir / "config.json"
    text, cfg = _read_config_arg(config_path)
    de = cfg.de if args.seed is None else replace(cfg.de, seed=args.seed)
    pool = ThreadPoolExecutor(args.threads) if args.threads > 1 else None
    mode = "soup" if args.soup else "ancestors"

    train_ds, test_ds = _load_split_pair(cfg.data)
    base = RngStream(de.seed)
    m = cfg.bp.ring_size
    if args.soup:
        spec = cfg.spec
        pop = seed_population("soup", spec, m, stream=base)
    else:
        ring, spec = load_ring(run_dir / "ring")
        pop = seed_population("ancestors", ring, m, args.jitter,
                              base.child(4))

    def factory(r):
        return sample_context(spec, train_ds, de.fitness_subset,
                              base.child(3, r), r)

    ensure_fitness(pop, factory(0), pool)
    seed_best_i = pop.best_index
    seed_fit = float(pop.fitness[seed_best_i])
    seed_eval = evaluate(spec, pop.members[seed_best_i], test_ds,
                         cfg.eval.batch_size)

    writer = _RunWriter(run_dir)

    def on_gen(g):
        writer.record({"stage": "de", "mode": mode, "gen": g.generation,
                       "best_fit": g.best_fit, "mean_fit": g.mean_fit,
                       "accepts": g.accepts},
                      {"stage": "de", "gen": g.generation}, g.wall_ms)

    try:
        out = run_de(pop, de, factory, stream=base.child(2), pool=pool,
                     callback=on_gen)
    finally:
        writer.close()
        if pool is not None:
            pool.shutdown()

    suffix = "_soup" if args.soup else ""
    save_population(out.population, run_dir / f"de_pop{suffix}", spec,
                    {"stage": "de", "mode": mode, "seed": de.seed})
    best_eval = evaluate(spec, out.best, test_ds, cfg.eval.batch_size)
    save_checkpoint(Checkpoint(spec, out.best,
                               {"stage": "de", "mode": mode,
                                "generation": out.population.generation,
                                "fitness": out.best_fitness,
                                "seed": de.seed}),
                    run_dir / f"de_best{suffix}.ckpt")

    summary_path = run_dir / "summary.json"
    if summary_path.is_file():
        summary = json.loads(summary_path.read_text())
    else:
        summary = {"model": cfg.model_name or "custom",
                   "dataset": cfg.data.name,
                   "params": param_count(spec), "stages": []}
    summary["stages"].append({
        "stage": "de", "mode": mode,
        "generations": len(out.history),
        "seed_best_fitness": seed_fit,
        "seed_test_accuracy": seed_eval.accuracy,
        "best_fitness": out.best_fitness,
        "test_accuracy": best_eval.accuracy,
        "test_ce": best_eval.mean_ce,
    })
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    try:
        manifest = load_manifest(run_dir)
    except NevoError:
        manifest = {"run_id": run_dir.name, "artifacts": {}}
    manifest["artifacts"][f"de_best{suffix}"] = f"de_best{suffix}.ckpt"
    manifest["artifacts"][f"de_pop{suffix}"] = f"de_pop{suffix}"
    write_manifest(run_dir, manifest)
    print(f"evolved ({mode}) for {len(out.history)} generations: fitness "
          f"{seed_fit:.6f} -> {out.best_fitness:.6f}, test accuracy "
          f"{seed_eval.accuracy:.4f} -> {best_eval.accuracy:.4f}")
    return 0


def _nchw(images: np.ndarray) -> np.ndarray:
    if images.ndim == 3:
        return images[:, None, :, :]
    if images.ndim == 4 and images.shape[1] not in (1, 3) \
            and images.shape[3] in (1, 3):
        return images.transpose(0, 3, 1, 2)
    return images


def _corrupted_sets(root: Path):
    """Yield (name, images.npy path, labels.npy path) under root."""
    def pair_in(d: Path):
        for img_name in ("images.npy", "test_images.npy"):
            img = d / img_name
            lab = d / img_name.replace("images", "labels")
            if img.is_file() and lab.is_file():
                return img, lab
        return None

    own = pair_in(root)
    if own:
        yield root.name, own[0], own[1]
        return
    found = False
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        pair = pair_in(sub)
        if pair:
            found = True
            yield sub.name, pair[0], pair[1]
    if not found:
        raise MissingArtifactError(
            f"{root}: no images.npy/labels.npy pairs found")


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    rows = []
    if args.corrupted:
        for name, img_path, lab_path in _corrupted_sets(Path(args.corrupted)):
            images = _nchw(datasets.load_npy(img_path)).astype(np.float32)
            labels = datasets.load_npy(lab_path, scale_u8=False)
            ds = datasets.Dataset(images, labels.astype(np.int64).ravel(),
                                  name)
            rows.append(evaluate(ckpt.spec, ckpt.params, ds, args.batch_size))
    else:
        from .persistence import DataSection
        train_ds, test_ds = _load_split_pair(
            DataSection(name=args.dataset, dir=args.data_dir))
        ds = train_ds if args.split == "train" else test_ds
        rows.append(evaluate(ckpt.spec, ckpt.params, ds, args.batch_size))
    doc = [{"dataset": r.dataset, "n": r.n_samples, "accuracy": r.accuracy,
            "error": r.error, "mean_ce": r.mean_ce} for r in rows]
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _cmd_corrupt(args) -> int:
    from .persistence import DataSection
    train_ds, test_ds = _load_split_pair(
        DataSection(name=args.dataset, dir=args.data_dir))
    ds = train_ds if args.split == "train" else test_ds
    out = datasets.corrupt(ds, args.kind, args.severity,
                           RngStream(args.seed))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets.save_npy(out_dir / "images.npy", out.images)
    datasets.save_npy(out_dir / "labels.npy", out.labels)
    (out_dir / "meta.json").write_text(json.dumps(
        {"source": ds.name, "kind": args.kind, "severity": args.severity,
         "seed": args.seed, "n": len(out)}, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(out)} corrupted samples to {out_dir}")
    return 0


def _cmd_report(args) -> int:
    text, problems = report(args.runs, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    for problem in problems:
        print(f"warning: {problem}", file=sys.stderr)
    return 0


def _cmd_gridsearch(args) -> int:
    text, cfg = _read_config_arg(args.config)
    master_seed = args.seed if args.seed is not None else cfg.de.seed
    pool = ThreadPoolExecutor(args.threads) if args.threads > 1 else None
    train_ds, test_ds = _load_split_pair(cfg.data)
    try:
        rows = grid_search(cfg.spec, train_ds, test_ds, cfg.bp, cfg.de,
                           cfg.grid, master_seed, jitter_sigma=args.jitter,
                           pool=pool)
    finally:
        if pool is not None:
            pool.shutdown()
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        doc = [{"lr": r.lr, "F": r.F, "Cr": r.Cr,
                "seed_fitness": r.seed_fitness,
                "best_fitness": r.best_fitness,
                "test_accuracy": r.test_accuracy} for r in rows]
        (out_dir / "grid_results.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"{'lr':>8} {'F':>6} {'Cr':>6} {'fitness':>12} {'accuracy':>9}")
    for r in rows:
        print(f"{r.lr:>8g} {r.F:>6g} {r.Cr:>6g} {r.best_fitness:>12.6f} "
              f"{r.test_accuracy:>9.4f}")
    return 0


def _cmd_costs(args) -> int:
    text, cfg = _read_config_arg(args.config)
    rep = count_costs(cfg.spec, args.n_g, args.n_e)
    print(json.dumps(rep.as_dict(), indent=2, sort_keys=True))
    return 0


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except NevoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(cli_main())
