"""Command line: ``generate``, ``run``, ``diagnose`` and ``report``.

Failures print ``[stage] message`` on stderr and exit nonzero: 2 for
configuration problems, 1 for anything that breaks during a stage.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, plots
from .config import ExperimentConfig, from_dict, load_config
from .datagen import (
    ConfigError,
    IngestionError,
    attach_truth,
    draw_ground_truth,
    generate_synthetic,
    load_csv,
    read_truth,
    write_csv,
    write_truth,
)
from .evaluation import METRIC_COLUMNS, mean_std, weighted_cov
from .experiment import (
    METHODS,
    StageError,
    WorkItem,
    item_dir,
    item_seeds,
    make_split,
    read_hospital_weights,
    read_patient_weights,
    run_item,
)

log = logging.getLogger("fediptw")

MANIFEST = "manifest.json"
CHECKSUM_SKIP = {MANIFEST}
CHECKSUM_SKIP_SUFFIXES = (".jsonl", ".png")  # wall times / renderer bytes


# ---------------------------------------------------------------- logging


class JsonLinesFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({
            "time": round(record.created, 3),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }, sort_keys=True)


def setup_logging(out: Optional[Path], name: str) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    root.setLevel(logging.INFO)
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.WARNING)
    err.setFormatter(JsonLinesFormatter())
    root.addHandler(err)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out / f"{name}.log.jsonl", mode="a", encoding="utf-8")
        fh.setFormatter(JsonLinesFormatter())
        root.addHandler(fh)


# ---------------------------------------------------------------- helpers


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> dict:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return {"package": __version__, "source_sha256": h.hexdigest()}


def inventory(out: Path) -> dict:
    files = {}
    for p in sorted(out.rglob("*")):
        if not p.is_file() or p.name in CHECKSUM_SKIP or p.suffix in CHECKSUM_SKIP_SUFFIXES:
            continue
        files[p.relative_to(out).as_posix()] = sha256_file(p)
    return files


def write_csv_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def fmt(v) -> str:
    return "" if v is None else repr(float(v))


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.method:
        cfg.methods = [m.strip() for m in args.method.split(",") if m.strip()]
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    if cfg.data.source == "csv":
        base = Path(args.config).parent if args.config else Path.cwd()
        cfg.data.paths = [str((base / p).resolve()) if not Path(p).is_absolute() else p for p in cfg.data.paths]
    cfg.validate()
    return cfg


def truth_sidecar(csv_path: Path) -> Path:
    return csv_path.with_name(csv_path.stem + ".truth.json")


def load_replication(cfg: ExperimentConfig, replication: int):
    if cfg.data.source == "synthetic":
        return generate_synthetic(cfg.synthetic(replication))
    path = Path(cfg.data.paths[replication])
    datasets = load_csv(path)
    side = truth_sidecar(path)
    if side.exists():
        truth, latent = read_truth(side)
        datasets = attach_truth(datasets, truth, latent)
    return datasets


@lru_cache(maxsize=4)
def _cached_replication(cfg_json: str, replication: int):
    return load_replication(from_dict(json.loads(cfg_json)), replication)


def _work(payload):
    """Worker entry point: one item, single-threaded BLAS."""
    cfg_json, item, stage = payload
    cfg = from_dict(json.loads(cfg_json))
    with threadpool_limits(limits=1):
        datasets = _cached_replication(cfg_json, item.replication)
        report = run_item(item, datasets, cfg.settings(), Path(cfg.out), stage)
    return item, (None if report is None else report.to_dict())


def _map(fn, payloads, jobs: int):
    if jobs <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, payloads))


# ---------------------------------------------------------------- generate


def _generate_one(payload):
    cfg_json, r = payload
    cfg = from_dict(json.loads(cfg_json))
    out = Path(cfg.out)
    syn = cfg.synthetic(r)
    truth = draw_ground_truth(syn)
    datasets = generate_synthetic(syn, truth)
    path = out / f"rep_{r:03d}.csv"
    write_csv(path, datasets)
    write_truth(truth_sidecar(path), syn, truth, datasets)
    return path.name


def cmd_generate(cfg: ExperimentConfig, jobs: int) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True)
    names = _map(_generate_one, [(cfg_json, r) for r in range(cfg.data.replications)], jobs)
    manifest = {"command": "generate", "config": cfg.to_dict(), "code_version": code_version(),
                "files": inventory(out)}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d replication files to %s", len(names), out)
    return 0


# ---------------------------------------------------------------- run


METRICS_HEADER = ["method", "replication", "repeat", "best_round", *METRIC_COLUMNS]


def write_metrics(out: Path, results: list) -> None:
    rows = []
    for item, rep in sorted(results, key=lambda x: (x[0].method, x[0].replication, x[0].repeat)):
        rows.append([item.method, item.replication, item.repeat, rep["best_round"]]
                    + [fmt(rep[c]) for c in METRIC_COLUMNS])
    write_csv_rows(out / "metrics.csv", METRICS_HEADER, rows)


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        recs = list(csv.DictReader(fh))
    for rec in recs:
        for c in METRIC_COLUMNS:
            rec[c] = float(rec[c]) if rec[c] != "" else None
    return recs


def summarize(recs: list[dict], methods: Sequence[str]) -> list[list]:
    rows = []
    for m in methods:
        sel = [r for r in recs if r["method"] == m]
        for c in METRIC_COLUMNS:
            vals = [r[c] for r in sel]
            mean, std = mean_std(vals)
            med = None if mean is None else float(np.median([v for v in vals if v is not None]))
            n = sum(v is not None for v in vals)
            rows.append([m, c, fmt(mean), fmt(std), fmt(med), n])
    return rows


def cmd_run(cfg: ExperimentConfig, jobs: int, stage: str) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True)
    items = [WorkItem(m, r, k) for m in cfg.methods for r in range(cfg.n_replications)
             for k in range(cfg.protocol.n_repeats)]
    settings = cfg.settings()
    manifest = {
        "command": "run",
        "stage": stage,
        "config": cfg.to_dict(),
        "code_version": code_version(),
        "seeds": {f"{it.method}/{it.replication}/{it.repeat}": item_seeds(settings, it.replication, it.repeat)
                  for it in items},
    }
    started = time.time()
    try:
        results = _map(_work, [(cfg_json, it, stage) for it in items], jobs)
    except StageError as exc:
        manifest["failure"] = {"stage": exc.stage, "message": exc.detail}
        _write_manifest(out, manifest)
        raise
    if stage != "propensity":
        write_metrics(out, results)
        recs = read_metrics(out / "metrics.csv")
        write_csv_rows(out / "summary.csv", ["method", "metric", "mean", "std", "median", "n"],
                       summarize(recs, cfg.methods))
    manifest["elapsed_seconds"] = round(time.time() - started, 1)
    _write_manifest(out, manifest)
    log.info("run finished: %d items in %.1fs", len(items), manifest["elapsed_seconds"])
    return 0


def _write_manifest(out: Path, manifest: dict) -> None:
    manifest["files"] = inventory(out)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- diagnose


def cmd_diagnose(run_dir: Path) -> int:
    man_path = run_dir / MANIFEST
    if not man_path.exists():
        raise StageError("diagnose", f"no {MANIFEST} in {run_dir}")
    manifest = json.loads(man_path.read_text(encoding="utf-8"))
    cfg = from_dict(manifest["config"])
    settings = cfg.settings()
    rows, per_client = [], []
    baseline_done = set()
    for m in cfg.methods:
        for r in range(cfg.n_replications):
            datasets = None
            for k in range(cfg.protocol.n_repeats):
                d = item_dir(run_dir, m, r, k)
                pw, hw = d / "patient_weights.csv", d / "hospital_weights.csv"
                if not (pw.exists() and hw.exists()):
                    raise StageError("diagnose", f"missing weight files in {d}")
                if datasets is None:
                    datasets = load_replication(cfg, r)
                split = make_split(datasets, settings, r, k)
                ids = [x.client_id for x in split.train]
                X = [x.X for x in split.train]
                t = [x.t for x in split.train]
                if (r, k) not in baseline_done:
                    baseline_done.add((r, k))
                    rows.append(["unweighted", r, k, fmt(weighted_cov(X, t, None, level="local").summary),
                                 fmt(weighted_cov(X, t, None).summary)])
                w = read_patient_weights(pw, ids)
                raw = read_hospital_weights(hw)
                wc = [raw[str(c)] for c in ids]
                local = weighted_cov(X, t, w, level="local")
                glob = weighted_cov(X, t, w, wc, level="global")
                rows.append([m, r, k, fmt(local.summary), fmt(glob.summary)])
                per_client += [[m, r, k, str(c), fmt(v)] for c, v in zip(ids, local.per_client_summary)]
    rows.sort(key=lambda x: (x[0], x[1], x[2]))
    write_csv_rows(run_dir / "covariance.csv", ["method", "replication", "repeat", "cov_local", "cov_global"], rows)
    write_csv_rows(run_dir / "covariance_by_client.csv",
                   ["method", "replication", "repeat", "client_id", "cov_local"], per_client)
    summary = []
    for m in ["unweighted", *cfg.methods]:
        sel = [x for x in rows if x[0] == m]
        lm, ls = mean_std([float(x[3]) for x in sel])
        gm, gs = mean_std([float(x[4]) for x in sel])
        summary.append([m, fmt(lm), fmt(ls), fmt(gm), fmt(gs)])
    write_csv_rows(run_dir / "covariance_summary.csv",
                   ["method", "cov_local_mean", "cov_local_std", "cov_global_mean", "cov_global_std"], summary)
    log.info("covariance diagnostics written to %s", run_dir)
    return 0


# ---------------------------------------------------------------- report


REPORT_COLUMNS = [("rpehe", "sqrt_PEHE"), ("mae_ate", "MAE_ATE"), ("if_pehe", "IF_PEHE"),
                  ("auroc", "AUROC"), ("auprc", "AUPRC"), ("prop_auroc", "propensity_AUROC"),
                  ("prop_auprc", "propensity_AUPRC"), ("cov_local", "COV_l"), ("cov_global", "COV_g")]


def cmd_report(run_dir: Path) -> int:
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise StageError("report", f"no metrics.csv in {run_dir}; run the factual stage first")
    recs = read_metrics(metrics)
    methods = list(dict.fromkeys(r["method"] for r in recs))
    rows = []
    for m in methods:
        sel = [r for r in recs if r["method"] == m]
        row = [m, len(sel)]
        for key, _ in REPORT_COLUMNS:
            mean, std = mean_std([r[key] for r in sel])
            row.append("" if mean is None else f"{mean:.4f} ± {std:.4f}")
        rows.append(row)
    write_csv_rows(run_dir / "table.csv", ["method", "n", *[c for _, c in REPORT_COLUMNS]], rows)

    fig_dir = run_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    for key, label in (("rpehe", "sqrt PEHE"), ("mae_ate", "MAE of ATE")):
        vals = {m: [r[key] for r in recs if r["method"] == m and r[key] is not None] for m in methods}
        if any(vals.values()):
            plots.metric_boxplot(vals, label, fig_dir / f"{key}.png")
    points = {}
    for m in methods:
        lm, ls = mean_std([r["cov_local"] for r in recs if r["method"] == m])
        gm, gs = mean_std([r["cov_global"] for r in recs if r["method"] == m])
        if lm is not None and gm is not None:
            points[m] = (lm, ls, gm, gs)
    if points:
        plots.covariance_scatter(points, fig_dir / "covariance.png")
    for stage in ("propensity", "factual"):
        curves = {}
        for m in methods:
            first = sorted((run_dir / "items" / m).glob(f"rep*/repeat*/rounds_{stage}.jsonl"))
            if first and first[0].stat().st_size:
                curves[m] = plots.read_round_losses(first[0])
        if curves:
            plots.validation_curves(curves, fig_dir / f"validation_{stage}.png")
    log.info("report written to %s", run_dir)
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fediptw", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="YAML config or a run manifest")
        p.add_argument("--method", metavar="NAME", help=f"comma-separated subset of {', '.join(METHODS)}")
        p.add_argument("--seed", metavar="N", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--jobs", metavar="N", type=int, default=1)

    common(sub.add_parser("generate", help="write synthetic replications as CSV with ground-truth sidecars"))
    run = sub.add_parser("run", help="train and evaluate the configured methods")
    common(run)
    run.add_argument("--stage", choices=("all", "propensity", "factual"), default="all",
                     help="run both stages, or one of them (factual reuses cached weights)")
    common(sub.add_parser("diagnose", help="covariance table from a finished run directory"))
    common(sub.add_parser("report", help="aggregate table and figures from a finished run directory"))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.command
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command in ("diagnose", "report"):
            run_dir = Path(args.out) if args.out else (Path(load_config(args.config).out) if args.config else None)
            if run_dir is None:
                raise ConfigError("pass --out DIR (the run directory)")
            setup_logging(run_dir if run_dir.exists() else None, args.command)
            return cmd_diagnose(run_dir) if args.command == "diagnose" else cmd_report(run_dir)
        cfg = resolve_config(args)
        setup_logging(Path(cfg.out), args.command)
        if args.command == "generate":
            if cfg.data.source != "synthetic":
                raise ConfigError("generate needs data.source: synthetic")
            return cmd_generate(cfg, args.jobs)
        return cmd_run(cfg, args.jobs, args.stage)
    except ConfigError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2
    except IngestionError as exc:
        print(f"[ingest] {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"[{stage}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
