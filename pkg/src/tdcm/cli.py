"""Command-line front end: generate, train, eval, baseline, sweep,
trace-centroids and report.

Exit codes: 0 when every output was written, 2 for usage or configuration
errors (checked before any compute), 1 for runtime failures.  Relative output
paths resolve under ``$TDCM_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from tdcm import experiments as ex
from tdcm.datagen import DomainSpec, ParseError, load_pair, make_pair, save_pair
from tdcm.model import ConfigError
from tdcm.trainer import (
    RunRecord,
    embed,
    evaluate_transfer,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

log = logging.getLogger("tdcm")

OUTPUT_ROOT_ENV = "TDCM_OUTPUT_ROOT"
TRACE_SUBSAMPLE = 500


class UsageError(Exception):
    pass


def out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _ensure_dir(p: Path) -> Path:
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {p}: {exc.strerror}") from None
    if not os.access(p, os.W_OK):
        raise UsageError(f"output directory {p} is not writable")
    return p


def _write_json(path: Path, doc) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    tmp.replace(path)


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve_config(args) -> ex.ExperimentConfig:
    overrides = _parse_sets(getattr(args, "set", None))
    for flag, key in (("epochs", "epochs"), ("seed", "seed"), ("tau", "tau"), ("num_blocks", "num_blocks"),
                      ("k", "n_clusters"), ("batch_size", "batch_size"), ("lr", "learning_rate")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = str(v)
    for flag in ("variant_R", "variant_O", "variant_E"):
        if getattr(args, flag, False):
            overrides[flag] = "true"
    return ex.load_config(getattr(args, "config", None), overrides)


def _load_pair_checked(path):
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    try:
        return load_pair(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def _check_k(cfg: ex.ExperimentConfig, pair) -> None:
    if pair.source.labels is not None:
        k = int(max(pair.source.labels.max(), pair.target.labels.max())) + 1
        if k != cfg.train.n_clusters:
            raise UsageError(f"dataset has {k} clusters but config n_clusters = {cfg.train.n_clusters} (use --k)")


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    if args.num_pairs < 1:
        raise UsageError("--num-pairs must be >= 1")
    try:
        specs = [DomainSpec(args.k, args.dim, args.n_per_cluster, args.center_box, args.cov_scale, args.seed + i)
                 for i in range(args.num_pairs)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.perturbation < 0:
        raise UsageError("--perturbation must be non-negative")
    root = _ensure_dir(out_path(args.out))
    for i, spec in enumerate(specs):
        files = save_pair(make_pair(spec, args.perturbation), root / f"pair_{i:03d}")
        log.info("wrote %s", ", ".join(str(f) for f in files))
    print(f"wrote {len(specs)} pair(s) under {root}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    pair = _load_pair_checked(args.data)
    _check_k(cfg, pair)
    out = _ensure_dir(out_path(args.out))
    start = time.perf_counter()
    ckpt, history = train(pair.source.X, cfg.train, log_every=args.log_every)
    record = evaluate_transfer(ckpt, pair, history)
    record.wall_time = time.perf_counter() - start
    record.model = ex.variant_name(cfg.train)
    record.config = dict(cfg.to_flat(), data=str(args.data))
    save_checkpoint(ckpt, out / "checkpoint.json")
    record.save(out / "run.json")
    print(record.summary())
    return 0


def cmd_eval(args) -> int:
    pair = _load_pair_checked(args.data)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    if pair.source.X.shape[1] != ckpt.input_dim:
        raise UsageError(f"checkpoint expects {ckpt.input_dim} features, dataset has {pair.source.X.shape[1]}")
    out = _ensure_dir(out_path(args.out))
    record = evaluate_transfer(ckpt, pair)
    record.model = ex.variant_name(ckpt.config)
    record.config = dict(ckpt.config.to_dict(), data=str(args.data), checkpoint=str(ckpt_path))
    record.save(out / "run.json")
    print(record.summary())
    return 0


def cmd_baseline(args) -> int:
    cfg = _resolve_config(args)
    pair = _load_pair_checked(args.data)
    _check_k(cfg, pair)
    out = _ensure_dir(out_path(args.out))
    echo = dict(cfg.to_flat(), baseline=args.algo, data=str(args.data))
    record = ex.run_baseline(pair, args.algo, seed=cfg.train.seed, tau=cfg.train.tau, echo=echo)
    record.save(out / "run.json")
    print(record.summary())
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    try:
        values = ex.parse_sweep_values(args.axis, args.values)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    seeds = args.seeds if args.seeds is not None else cfg.num_seeds
    if seeds < 1:
        raise UsageError("--seeds must be >= 1")
    ex.sweep_jobs(cfg, args.axis, values, seeds)  # validates every point
    out = _ensure_dir(out_path(args.out))
    rows = ex.run_sweep(cfg, args.axis, values, seeds, jobs=args.jobs)
    ex.write_sweep_csv(rows, out / "sweep.csv")
    _write_json(out / "sweep_config.json", {
        "axis": args.axis, "values": values, "seeds": seeds, "config": cfg.to_flat(),
        "summary": ex.summarize_sweep(rows),
    })
    for s in ex.summarize_sweep(rows):
        print(f"{args.axis}={s['value']}: source NMI {s['source_nmi']:.3f} target NMI {s['target_nmi']:.3f} "
              f"diff {s['diff_nmi']:.3f} ({s['runs']} runs)")
    return 0


def _pca_2d(points: np.ndarray, *others):
    mean = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - mean, full_matrices=False)
    basis = vt[:2].T
    return [((o - mean) @ basis) for o in (points,) + others]


def cmd_trace_centroids(args) -> int:
    pair = _load_pair_checked(args.data)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    if pair.source.X.shape[1] != ckpt.input_dim:
        raise UsageError(f"checkpoint expects {ckpt.input_dim} features, dataset has {pair.source.X.shape[1]}")
    out = out_path(args.out)
    _ensure_dir(out.parent)
    dom = pair.target if args.domain == "target" else pair.source
    _, traces = predict(ckpt, dom.X)
    doc = {
        "config": dict(ckpt.config.to_dict(), data=str(args.data), checkpoint=str(ckpt_path), domain=args.domain),
        "batches": [t.to_dict() for t in traces],
    }
    Z = embed(ckpt, dom.X)
    rng = np.random.default_rng(0)
    pick = np.sort(rng.choice(len(Z), size=min(TRACE_SUBSAMPLE, len(Z)), replace=False))
    if Z.shape[1] > 2:
        snapshots = [np.asarray(c) for c in traces[0].centroids]
        _, sample2d, *cents2d = _pca_2d(Z, Z[pick], *snapshots)
        doc["projection"] = {
            "method": "pca",
            "centroids": [c.tolist() for c in cents2d],
            "sample": sample2d.tolist(),
            "sample_labels": dom.labels[pick].tolist() if dom.labels is not None else None,
        }
    else:
        doc["projection"] = {
            "method": "none",
            "centroids": [np.asarray(c).tolist() for c in traces[0].centroids],
            "sample": Z[pick].tolist(),
            "sample_labels": dom.labels[pick].tolist() if dom.labels is not None else None,
        }
    _write_json(out, doc)
    print(f"wrote {len(traces[0].centroids)} centroid snapshots to {out}")
    return 0


def _collect_runs(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found += sorted(p.rglob("run.json"))
        elif p.exists():
            found.append(p)
        else:
            raise UsageError(f"no such run file or directory: {p}")
    if not found:
        raise UsageError("no run records found")
    return found


def cmd_report(args) -> int:
    files = _collect_runs(args.runs)
    records = []
    for f in files:
        try:
            records.append(RunRecord.load(f))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UsageError(f"{f} is not a run record: {exc}") from None
    table = ex.aggregate(records)
    print(ex.format_report(table))
    if args.out:
        out = out_path(args.out)
        _ensure_dir(out.parent)
        _write_json(out, {"inputs": [str(f) for f in files], "table": table})
    return 0


# ---------------------------------------------------------------- parser


def _add_config_flags(p, data=True):
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--tau", type=float)
    p.add_argument("--num-blocks", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--variant-R", dest="variant_R", action="store_true", help="drop the symmetric constraint")
    p.add_argument("--variant-O", dest="variant_O", action="store_true", help="drop the orthogonality penalty")
    p.add_argument("--variant-E", dest="variant_E", action="store_true", help="drop the entropy term")
    if data:
        p.add_argument("--data", required=True, help="pair directory with source.csv/target.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdcm", description="Transferable deep clustering experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic source/target pairs")
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--num-pairs", type=int, default=1)
    g.add_argument("--perturbation", type=float, default=0.5)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--n-per-cluster", type=int, default=500)
    g.add_argument("--center-box", type=float, default=5.0)
    g.add_argument("--cov-scale", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0, help="seed of the first pair; pair i uses seed + i")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on the source domain and evaluate transfer")
    _add_config_flags(t)
    t.add_argument("--out", required=True, help="directory for checkpoint.json and run.json")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a pair")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="frozen-centroid baseline on a pair")
    b.add_argument("algo", choices=ex.BASELINES)
    _add_config_flags(b)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)

    s = sub.add_parser("sweep", help="one run per value per seed along one axis")
    s.add_argument("--axis", required=True, choices=list(ex.SWEEP_AXES))
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", type=int, help="training seeds per value (default: num_seeds)")
    s.add_argument("--jobs", type=int, default=1)
    _add_config_flags(s, data=False)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    tc = sub.add_parser("trace-centroids", help="dump per-block centroids for plotting")
    tc.add_argument("--checkpoint", required=True)
    tc.add_argument("--data", required=True)
    tc.add_argument("--domain", choices=("source", "target"), default="target")
    tc.add_argument("--out", required=True, help="trace JSON path")
    tc.set_defaults(func=cmd_trace_centroids)

    r = sub.add_parser("report", help="average run records per model")
    r.add_argument("runs", nargs="+", help="run.json files or directories to search")
    r.add_argument("--out", help="optional JSON summary path")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError) as exc:
        print(f"tdcm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime and numerical failures
        print(f"tdcm {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
