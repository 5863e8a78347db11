"""Command-line interface.

Subcommands: ``train``, ``eval``, ``identify``, ``sweep``,
``inspect-checkpoint`` and ``replay``. Every run command resolves its
arguments into a JSON-able job description, executes it and writes a
``manifest.json`` holding that description, the dataset hashes, the produced
artifacts (with hashes) and timings. ``replay`` re-executes a manifest.

Output goes to ``--out``, else ``$ITR_OUTPUT_DIR``, else ``./itr-output``.
Exit codes: 0 success, 1 internal error, 2 user or config error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import itertools
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .checkpoint import inspect_checkpoint, load_checkpoint, save_checkpoint
from .data import file_sha256, load_dataset, validate_dataset
from .errors import ConfigError, ITRError
from .evaluation import (K_VALUES, evaluate_group_rec, evaluate_user_rec, metrics_csv, metrics_report,
                         silhouette)
from .gim import DEFAULT_Q, identify_groups, nearest_center
from .trainer import HISTORY_FIELDS, PROFILES, TrainConfig, run

log = logging.getLogger("itr")

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2
OUTPUT_ENV = "ITR_OUTPUT_DIR"
CHECKPOINT = "checkpoint.itr"


class UsageError(ITRError):
    """Bad command-line input."""


# ---------------------------------------------------------------- config

def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        return key, yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in override {text!r}: {exc}") from exc


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise ConfigError(f"{path}: config must be a flat key: value mapping")
    return data


def resolve_config(path=None, overrides=(), seed=None) -> tuple[TrainConfig, str | None]:
    """Merge profile defaults, the config file and ``key=value`` overrides.

    Returns the training config and the dataset directory (key ``data``),
    which is kept out of the config so checkpoints do not depend on paths.
    """
    raw = read_config_file(path) if path else {}
    for text in overrides:
        key, value = parse_override(text)
        raw[key] = value
    if seed is not None:
        raw["seed"] = seed
    data = raw.pop("data", None)
    profile = raw.pop("profile", None)
    if "q_grid" in raw and raw["q_grid"] is not None:
        raw["q_grid"] = tuple(raw["q_grid"]) if isinstance(raw["q_grid"], (list, tuple)) else (raw["q_grid"],)
    try:
        cfg = TrainConfig.from_profile(profile, **raw) if profile else TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, data


def output_dir(arg) -> Path:
    out = Path(arg or os.environ.get(OUTPUT_ENV) or "itr-output")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- io helpers

def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _artifacts(paths: dict[str, Path]) -> dict:
    return {k: {"path": str(p), "sha256": file_sha256(p)} for k, p in sorted(paths.items())}


def write_manifest(out: Path, command: str, job: dict, artifacts: dict[str, Path], timings: dict,
                   dataset_files: dict | None = None) -> Path:
    seeds = job.get("seeds") or ([job["config"]["seed"]] if "config" in job else [job.get("seed")])
    manifest = {
        "command": command,
        "job": job,
        "seeds": seeds,
        "dataset_files": dataset_files or {},
        "artifacts": _artifacts(artifacts),
        "timings": timings,
        "version": f"v{__version__}",
    }
    return _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def history_csv(model) -> str:
    buf = io.StringIO()
    extra = []
    for row in model.eval_history:
        extra.extend(k for k in row if k != "epoch" and k not in extra)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(HISTORY_FIELDS) + ["wall_time"] + extra)
    evals = {r["epoch"]: r for r in model.eval_history}
    walls = list(model.wall_times) + [""] * (len(model.history) - len(model.wall_times))
    for row, wall in zip(model.history, walls):
        e = evals.get(row["epoch"], {})
        w.writerow([repr(row[f]) if isinstance(row[f], float) else row[f] for f in HISTORY_FIELDS]
                   + [wall] + [repr(e[k]) if k in e else "" for k in extra])
    return buf.getvalue()


def evaluate_all(model, ds, group_mode="member-mean", k_values=K_VALUES) -> dict:
    results = {"user": evaluate_user_rec(model, ds.user_eval, k_values)}
    if ds.group_eval is not None and ds.groups is not None:
        results["group"] = evaluate_group_rec(model, ds.groups, ds.group_eval, k_values, group_mode)
    else:
        log.warning("group files absent: group evaluation unavailable")
    return results


def metric_rows(results: dict, **extra) -> list[dict]:
    rows = []
    for task, met in results.items():
        rows.append({**extra, "task": task, "mode": met.mode, **met.as_row()})
    return rows


def _load_valid(data_dir):
    if data_dir is None:
        raise ConfigError("no dataset directory: pass --data or set 'data' in the config")
    ds = load_dataset(data_dir)
    report = validate_dataset(ds)
    for w in report.warnings:
        log.warning("dataset: %s", w)
    if not report.ok:
        raise ConfigError("dataset validation failed: " + "; ".join(report.errors[:5]))
    return ds


# ---------------------------------------------------------------- jobs

def job_train(job: dict, out: Path) -> tuple[dict, dict, dict]:
    t0 = time.perf_counter()
    cfg = TrainConfig.from_dict({**job["config"], "q_grid": tuple(job["config"]["q_grid"])})
    ds = _load_valid(job["data"])
    model = load_checkpoint(job["resume"]) if job.get("resume") else None

    def on_epoch(m, report):
        if cfg.eval_every and (report.epoch + 1) % cfg.eval_every == 0:
            res = evaluate_all(m, ds, cfg.group_mode)
            row = {"epoch": report.epoch}
            for task, met in res.items():
                row.update(met.as_row(prefix=f"{task}_"))
            m.eval_history.append(row)

    model = run(cfg, ds, model=model, epoch_callback=on_epoch)
    t_train = time.perf_counter() - t0
    arts = {"checkpoint": save_checkpoint(model, out / CHECKPOINT),
            "history": _write(out / "history.csv", history_csv(model))}
    results = evaluate_all(model, ds, cfg.group_mode)
    arts["metrics"] = _write(out / "metrics.csv", metrics_csv(metric_rows(results, seed=cfg.seed)))
    arts["report"] = _write(out / "report.json", metrics_report(results, group_mode=cfg.group_mode,
                                                                 seed=cfg.seed, epochs=cfg.epochs))
    if job.get("dump_pseudo_labels") and model.labels is not None:
        arts["pseudo_labels"] = _write(out / "pseudo_labels.json",
                                       json.dumps(model.labels.summary(), indent=2, sort_keys=True) + "\n")
    for task, met in results.items():
        print(f"{task:>5}: " + " ".join(f"{k}={v:.4f}" for k, v in met.as_row().items() if k != "n_cases"))
    return arts, {"train_s": t_train, "total_s": time.perf_counter() - t0}, ds.files


def job_eval(job: dict, out: Path):
    t0 = time.perf_counter()
    model = load_checkpoint(job["checkpoint"])
    ds = _load_valid(job["data"])
    if model.U.shape[0] != ds.train.n_users or model.I.shape[0] != ds.train.n_items:
        raise ConfigError(f"checkpoint has {model.U.shape[0]} users/{model.I.shape[0]} items, dataset has "
                          f"{ds.train.n_users}/{ds.train.n_items}")
    k_values = tuple(job["k"])
    results = evaluate_all(model, ds, job["group_mode"], k_values)
    arts = {"metrics": _write(out / "metrics.csv", metrics_csv(metric_rows(results))),
            "report": _write(out / "report.json", metrics_report(results, group_mode=job["group_mode"],
                                                                 checkpoint_epoch=model.epoch))}
    for task, met in results.items():
        print(f"{task:>5}: " + " ".join(f"{k}={v:.4f}" for k, v in met.as_row().items() if k != "n_cases"))
    return arts, {"total_s": time.perf_counter() - t0}, ds.files


def _read_points(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"points file not found: {path}")
    try:
        X = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return X


def job_identify(job: dict, out: Path):
    t0 = time.perf_counter()
    if job["kind"] == "checkpoint":
        X = load_checkpoint(job["input"]).U
    else:
        X = _read_points(job["input"])
    if X.shape[0] < 2:
        raise ConfigError(f"identification needs at least two points, got {X.shape[0]}")
    cset = identify_groups(X, tuple(job["q_grid"]), np.random.default_rng(job["seed"]),
                           explore_budget=job["explore_budget"])
    centers = cset.centers
    assign = nearest_center(X, centers)
    sc = silhouette(X, assign) if np.unique(assign).size >= 2 else None
    result = {
        "k_prime": cset.k_prime,
        "centers": centers.tolist(),
        "radii": cset.radii.tolist(),
        "densities": cset.densities.tolist(),
        "assignment": assign.tolist(),
        "silhouette": sc,
        "n_points": int(X.shape[0]),
        "n_explored": cset.n_explored,
        "n_pruned": cset.n_pruned,
    }
    arts = {"groups": _write(out / "groups.json", json.dumps(result, indent=1, sort_keys=True) + "\n")}
    print(f"k'={cset.k_prime} silhouette={'n/a' if sc is None else f'{sc:.4f}'}")
    return arts, {"total_s": time.perf_counter() - t0}, {Path(job["input"]).name: file_sha256(job["input"])}


def _sweep_point(args):
    cfg_dict, data, run_dir = args
    cfg = TrainConfig.from_dict({**cfg_dict, "q_grid": tuple(cfg_dict["q_grid"])})
    ds = _load_valid(data)
    model = run(cfg, ds)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, run_dir / CHECKPOINT)
    (run_dir / "history.csv").write_text(history_csv(model))
    results = evaluate_all(model, ds, cfg.group_mode)
    row = {}
    for task, met in results.items():
        row.update(met.as_row(prefix=f"{task}_"))
    return row, ds.files


def job_sweep(job: dict, out: Path):
    t0 = time.perf_counter()
    keys = list(job["grid"])
    points = list(itertools.product(*[job["grid"][k] for k in keys]))
    tasks, meta = [], []
    for idx, (values, seed) in enumerate(itertools.product(points, job["seeds"])):
        cfg = {**job["config"], **dict(zip(keys, values)), "seed": seed}
        TrainConfig.from_dict({**cfg, "q_grid": tuple(cfg["q_grid"])})
        tasks.append((cfg, job["data"], str(out / "runs" / f"{idx:03d}")))
        meta.append({"run": idx, **dict(zip(keys, values)), "seed": seed})
    workers = max(1, int(job.get("workers", 1)))
    if workers == 1:
        results = [_sweep_point(t) for t in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_point, tasks))
    rows = [{**m, **r} for m, (r, _) in zip(meta, results)]
    arts = {"sweep": _write(out / "sweep.csv", metrics_csv(rows))}
    print(f"{len(rows)} runs written to {arts['sweep']}")
    files = results[0][1] if results else {}
    return arts, {"total_s": time.perf_counter() - t0}, files


JOBS = {"train": job_train, "eval": job_eval, "identify": job_identify, "sweep": job_sweep}


def execute(command: str, job: dict, out: Path) -> Path:
    arts, timings, files = JOBS[command](job, out)
    return write_manifest(out, command, job, arts, timings, files)


# ---------------------------------------------------------------- argument handling

def _abs(p):
    return None if p is None else str(Path(p).resolve())


def build_job(args) -> dict:
    if args.command == "train":
        cfg, data = resolve_config(args.config, args.set, args.seed)
        return {"config": cfg.to_dict(), "data": _abs(args.data or data), "resume": _abs(args.resume),
                "dump_pseudo_labels": bool(args.dump_pseudo_labels)}
    if args.command == "eval":
        _, data = resolve_config(args.config, args.set) if args.config else (None, None)
        return {"checkpoint": _abs(args.checkpoint), "data": _abs(args.data or data),
                "group_mode": args.group_mode, "k": sorted(set(args.k))}
    if args.command == "identify":
        if (args.points is None) == (args.checkpoint is None):
            raise UsageError("identify needs exactly one of --points or --checkpoint")
        q = tuple(args.q) if args.q else DEFAULT_Q
        return {"input": _abs(args.points or args.checkpoint), "kind": "points" if args.points else "checkpoint",
                "q_grid": list(q), "seed": args.seed, "explore_budget": args.explore_budget}
    if args.command == "sweep":
        cfg, data = resolve_config(args.config, args.set)
        grid = {}
        for spec in args.grid or []:
            key, value = parse_override(spec)
            values = value if isinstance(value, list) else [value]
            if key not in TrainConfig.__dataclass_fields__:
                raise ConfigError(f"unknown sweep key {key!r}")
            grid[key] = values
        if not grid or any(len(v) == 0 for v in grid.values()):
            raise UsageError("sweep needs a non-empty --grid, e.g. --grid a=[0.01,10]")
        seeds = args.seeds or [cfg.seed]
        return {"config": cfg.to_dict(), "data": _abs(args.data or data), "grid": grid, "seeds": seeds,
                "workers": args.workers}
    raise UsageError(f"no job for {args.command}")


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"itr {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat YAML config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config key (repeatable)")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./itr-output)")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", help="dataset directory (overrides 'data' in the config)")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--dump-pseudo-labels", action="store_true", help="write D/A'/Q' summaries")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--group-mode", choices=("member-mean", "nearest-center"), default="member-mean")
    e.add_argument("--k", type=int, nargs="+", default=list(K_VALUES))

    i = sub.add_parser("identify", help="discover groups in points or checkpoint user embeddings")
    common(i, config=False)
    i.add_argument("--points", help="text file, one vector per line")
    i.add_argument("--checkpoint")
    i.add_argument("--q", type=float, nargs="+", help=f"quantile grid (default {list(DEFAULT_Q)})")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--explore-budget", type=int)

    s = sub.add_parser("sweep", help="train and evaluate over a hyper-parameter grid")
    common(s)
    s.add_argument("--data")
    s.add_argument("--grid", action="append", metavar="KEY=[V1,V2,...]")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--workers", type=int, default=1)

    c = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary")
    c.add_argument("checkpoint")

    r = sub.add_parser("replay", help="re-run the job recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out")
    return p


def _dispatch(args) -> int:
    if args.command == "inspect-checkpoint":
        print(json.dumps(inspect_checkpoint(args.checkpoint), indent=2, sort_keys=True))
        return EXIT_OK
    if args.command == "replay":
        path = Path(args.manifest)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        try:
            manifest = json.loads(path.read_text())
            command, job = manifest["command"], manifest["job"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"{path}: not a run manifest ({exc})") from exc
        if command not in JOBS:
            raise ConfigError(f"{path}: unknown command {command!r}")
        execute(command, job, output_dir(args.out))
        return EXIT_OK
    job = build_job(args)
    execute(args.command, job, output_dir(args.out))
    return EXIT_OK


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ITRError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
