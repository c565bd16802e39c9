"""``obmreg`` command line: gen-data, train, register, bench, ablate.

Exit codes: 0 success, 2 usage or config error, 3 data error (missing or
malformed files, generation failure), 4 numerical failure (degenerate
correspondences, non-finite values, diverged training).

Seed precedence: an explicit ``--seed`` flag, then the ``OBMREG_SEED``
environment variable, then the config file, then the built-in default.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data import SHAPES, CloudFormatError, GenerationError, generate_dataset, read_cloud, read_manifest, write_cloud
from .diffmath import NonFiniteError
from .geometry import PointCloud, RegistrationMetrics, registration_metrics
from .model import CheckpointError, OBMNet
from .solver import DegenerateError, icp_baseline, register_iterative
from .train import EVAL_STREAM, STANDARD_ABLATIONS, TrainingDiverged, ablate, parse_toggles, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "OBMREG_SEED"

log = logging.getLogger("obmreg")


class UsageError(Exception):
    pass


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    env = _env_seed()
    if env is not None:
        cfg = cfg.replace(seed=env)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    flag_map = {
        "epochs": "epochs",
        "lr": "lr",
        "decay_factor": "lr_decay_factor",
        "decay_epochs": "lr_decay_epochs",
        "seed": "seed",
        "iters": "n_iter",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = v
    return apply_overrides(cfg, overrides)


# -- gen-data ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    shapes = tuple(s.strip() for s in args.shapes.split(",") if s.strip())
    bad = [s for s in shapes if s not in SHAPES]
    if not shapes or bad:
        raise UsageError(f"--shapes must list kinds from {SHAPES}")
    if args.pairs < 0 or args.val_pairs < 0 or args.test_pairs < 0:
        raise UsageError("pair counts must be non-negative")
    if args.pairs + args.val_pairs + args.test_pairs == 0:
        raise UsageError("nothing to generate")
    if not 0.1 < args.overlap <= 1.0:
        raise UsageError("--overlap must be in (0.1, 1]")
    if args.noise < 0:
        raise UsageError("--noise must be >= 0")
    if args.points < 64:
        raise UsageError("--points must be >= 64")
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    path = generate_dataset(
        args.out,
        shapes,
        args.pairs,
        args.test_pairs,
        args.val_pairs,
        args.overlap,
        args.noise,
        seed,
        args.rot_max,
        args.trans_max,
        args.points,
    )
    print(path)
    return EXIT_OK


# -- train ------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    manifest = read_manifest(args.manifest)
    res = train(manifest, cfg, args.out, resume=args.resume)
    print(res.best_path)
    return EXIT_OK


# -- register ---------------------------------------------------------------------


def format_matrix(m: np.ndarray) -> str:
    return "\n".join(" ".join(_fmt(v) for v in row) for row in m)


def cmd_register(args) -> int:
    model = OBMNet.load(args.checkpoint)
    cfg = model.cfg
    seed = args.seed if args.seed is not None else (_env_seed() if _env_seed() is not None else cfg.seed)
    n_iter = args.iters if args.iters is not None else cfg.n_iter
    if n_iter < 1:
        raise UsageError("--iters must be >= 1")
    src, tgt = read_cloud(args.source), read_cloud(args.target)
    rng = np.random.default_rng([seed, EVAL_STREAM, 0])
    res = register_iterative(src, tgt, model, n_iter, rng, cfg.tau_end, cfg.early_stop_rot_deg, cfg.early_stop_trans)
    print(format_matrix(res.transform.matrix()))
    if args.out:
        write_cloud(PointCloud(res.transform.apply(src.points)), args.out)
    return EXIT_OK


# -- bench ------------------------------------------------------------------------

METRIC_KEYS = ("mae_r", "mae_t", "mie_r", "mie_t")


@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)
    timing: bool = False

    def methods(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r["method"] not in seen:
                seen.append(r["method"])
        return seen

    def aggregates(self) -> list[dict]:
        out = []
        for m in self.methods():
            ok = [r for r in self.rows if r["method"] == m and r["error"] == ""]
            agg = {"method": m, "pairs": len(ok)}
            for k in METRIC_KEYS:
                vals = [r[k] for r in ok]
                agg[k] = float(np.mean(vals)) if vals else float("nan")
                agg[f"median_{k}"] = float(np.median(vals)) if vals else float("nan")
            if self.timing:
                agg["seconds"] = float(np.mean([r["seconds"] for r in ok])) if ok else float("nan")
            out.append(agg)
        return out

    def row_columns(self) -> list[str]:
        cols = ["index", "seed", "method", *METRIC_KEYS, "error"]
        return cols + ["seconds"] if self.timing else cols

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "aggregates": self.aggregates()}, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.row_columns()
        w.writerow(["kind", *cols])
        for r in self.rows:
            w.writerow(["pair", *[_cell(r[c]) for c in cols]])
        agg_cols = ["method", "pairs"] + [k for k in METRIC_KEYS] + [f"median_{k}" for k in METRIC_KEYS]
        if self.timing:
            agg_cols.append("seconds")
        w.writerow(["aggregate_header", *agg_cols])
        for a in self.aggregates():
            w.writerow(["aggregate", *[_cell(a[c]) for c in agg_cols]])
        return buf.getvalue()


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _metric_row(entry, method: str, metrics: RegistrationMetrics | None, error: str, seconds: float | None) -> dict:
    row = {"index": entry.index, "seed": entry.seed, "method": method, "error": error}
    for k in METRIC_KEYS:
        row[k] = float("nan") if metrics is None else float(getattr(metrics, k))
    if seconds is not None:
        row["seconds"] = seconds
    return row


def run_bench(model: OBMNet, manifest, split: str, baselines: list[str], n_iter: int, seed: int, timing: bool) -> BenchReport:
    entries = sorted(manifest.split(split), key=lambda e: e.index)
    if not entries:
        raise CloudFormatError(f"manifest has no {split!r} pairs")
    report = BenchReport(timing=timing)
    cfg = model.cfg
    for i, e in enumerate(entries):
        pair = manifest.load_pair(e)
        methods = [("model", None)] + [(b, b) for b in baselines]
        for name, _ in methods:
            t0 = time.perf_counter()
            err, metrics = "", None
            try:
                if name == "model":
                    rng = np.random.default_rng([seed, EVAL_STREAM, i])
                    xf = register_iterative(
                        pair.source, pair.target, model, n_iter, rng, cfg.tau_end, cfg.early_stop_rot_deg, cfg.early_stop_trans
                    ).transform
                else:
                    xf = icp_baseline(pair.source, pair.target)
                metrics = registration_metrics(xf, pair.gt_transform)
            except (DegenerateError, NonFiniteError, FloatingPointError) as exc:
                err = f"{type(exc).__name__}: {exc}".replace("\n", " ")
            secs = time.perf_counter() - t0 if timing else None
            report.rows.append(_metric_row(e, name, metrics, err, secs))
    return report


def cmd_bench(args) -> int:
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    model = OBMNet.load(args.checkpoint)
    manifest = read_manifest(args.manifest)
    seed = args.seed if args.seed is not None else (_env_seed() if _env_seed() is not None else model.cfg.seed)
    n_iter = args.iters if args.iters is not None else model.cfg.n_iter
    baselines = [] if args.baseline == "none" else [args.baseline]
    report = run_bench(model, manifest, args.split, baselines, n_iter, seed, args.timing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(report.to_csv())
    (out / "bench.json").write_text(report.to_json())
    for a in report.aggregates():
        print(
            f"{a['method']}: median MIE(R) {a['median_mie_r']:.4f} deg, median MIE(t) {a['median_mie_t']:.5f}, "
            f"MAE(R) {a['mae_r']:.4f}, MAE(t) {a['mae_t']:.5f} over {a['pairs']} pairs"
        )
    failed = [r for r in report.rows if r["error"]]
    if failed:
        for r in failed:
            print(f"pair {r['index']} ({r['method']}) failed: {r['error']}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- ablate -----------------------------------------------------------------------


def _parse_sets(text: str | None) -> dict:
    if not text:
        return dict(STANDARD_ABLATIONS)
    sets = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        name, _, toggles = part.partition("=")
        sets[name.strip()] = parse_toggles(toggles if toggles else name)
    return sets


ABLATION_COLUMNS = ("name", "toggles", "mae_r", "mae_t", "mie_r", "mie_t", "median_mie_r", "median_mie_t")


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    manifest = read_manifest(args.manifest)
    rows = ablate(cfg, _parse_sets(args.sets), manifest, args.out, eval_split=args.split)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([_cell(r[c]) for c in ABLATION_COLUMNS])
    out = Path(args.out)
    (out / "ablation.csv").write_text(buf.getvalue())
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-epochs", dest="decay_epochs", help="comma-separated epochs at which lr decays")
    p.add_argument("--decay-factor", dest="decay_factor", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="obmreg", description="Unsupervised partial point-cloud registration.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic scene pairs and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--shapes", default="composite", help=f"comma-separated from {','.join(SHAPES)}")
    g.add_argument("--pairs", type=int, default=4, help="training pairs")
    g.add_argument("--val-pairs", dest="val_pairs", type=int, default=0)
    g.add_argument("--test-pairs", dest="test_pairs", type=int, default=0)
    g.add_argument("--overlap", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int)
    g.add_argument("--rot-max", dest="rot_max", type=float, default=45.0, help="max rotation in degrees")
    g.add_argument("--trans-max", dest="trans_max", type=float, default=0.5)
    g.add_argument("--points", type=int, default=256)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a manifest's train split")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="run directory for checkpoints and metrics.csv")
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.npz")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="align a source cloud to a target cloud")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--iters", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="write the transformed source here (.ply or .xyz)")
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("bench", help="evaluate a checkpoint and baselines on a split")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--manifest", required=True)
    b.add_argument("--split", default="test")
    b.add_argument("--baseline", choices=("icp", "none"), default="icp")
    b.add_argument("--iters", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True, help="directory for bench.csv and bench.json")
    b.add_argument("--timing", action="store_true", help="add wall-clock seconds per pair (not reproducible)")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="train and evaluate toggle combinations")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--split", default="test")
    a.add_argument(
        "--sets",
        help="'name=OS,BP,...;name2=...' (default: full, no_nmm, baseline, loss_g_s, loss_g)",
    )
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"obmreg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CloudFormatError, GenerationError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"obmreg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DegenerateError, TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"obmreg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"obmreg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
