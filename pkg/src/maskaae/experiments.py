"""Single runs, capacity sweeps, CSV exports and NAC comparison tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import statistics
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from maskaae import config as cfgmod
from maskaae.errors import InvalidArgumentError, NumericError, StateError
from maskaae.synthetic_data import Dataset, load_dataset
from maskaae.trainer import read_metrics, train, write_json

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("variant", "m", "repeat", "final_frechet", "final_nac", "m_A", "wall_seconds")
UCURVE_COLUMNS = ("variant", "m", "repeats", "median_frechet", "min_frechet", "max_frechet", "median_m_A")
NAC_COLUMNS = ("dataset", "variant", "m", "m_A", "nac", "extractor", "lower_nac")


class MissingRunsError(StateError):
    def __init__(self, cells):
        self.cells = list(cells)
        super().__init__("missing or incomplete runs: " + ", ".join(self.cells))


def write_manifest(path, cfg: dict, command: str, **extra) -> None:
    """Record the fully resolved config before any computation starts."""
    write_json(path, {"command": command, "config": cfg, "code_version": cfg_version(),
                      "status": "started", **extra})


def cfg_version() -> str:
    return cfgmod.code_version()


def update_manifest(path, **fields) -> None:
    with open(path) as fh:
        man = json.load(fh)
    man.update(fields)
    write_json(path, man)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# single run

def run_training(cfg: dict, dataset: Dataset, run_dir, variant: str, m: int, seed: int) -> dict:
    """Train one model in ``run_dir`` and return its summary fields."""
    run_dir = Path(run_dir)
    tc = cfgmod.train_config(cfg, variant=variant, seed=seed)
    bc = cfgmod.bundle_config(cfg, data_dim=dataset.d, latent_dim=m, variant=variant)
    t0 = time.perf_counter()
    res = train(tc, dataset, bundle_config=bc, run_dir=run_dir)
    wall = time.perf_counter() - t0
    last = res.trace[-1] if res.trace else None
    return {
        "final_frechet": None if last is None else last.frechet,
        "final_nac": None if last is None else last.nac,
        "m_A": None if last is None else last.m_A,
        "wall_seconds": wall,
    }


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class SweepSpec:
    dataset_path: str
    variants: list[str]
    m_values: list[int]
    config: dict
    repeats: int = 3
    out_dir: str = "runs/sweep"
    jobs: int = 1
    base_seed: int = field(default=0)

    def __post_init__(self):
        if not self.m_values or any(int(m) < 1 for m in self.m_values):
            raise InvalidArgumentError("m_values must be nonempty with entries >= 1")
        if self.repeats < 1:
            raise InvalidArgumentError("repeats must be >= 1")
        if not self.variants:
            raise InvalidArgumentError("variants must be nonempty")
        if self.jobs < 1:
            raise InvalidArgumentError("jobs must be >= 1")

    def cells(self):
        return [(v, int(m), r) for v in self.variants for m in sorted(self.m_values) for r in range(self.repeats)]


def cell_name(variant: str, m: int, repeat: int) -> str:
    return f"{variant}_m{m}_r{repeat}"


def cell_seed(base_seed: int, variant: str, m: int, repeat: int) -> int:
    # the repeat index alone decides the seed, so paired variants share initial weights
    ss = np.random.SeedSequence([base_seed & (2**63 - 1), m, repeat])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _cell_config_fingerprint(spec: SweepSpec, variant, m, repeat, data_fp) -> str:
    return config_hash({"config": spec.config, "variant": variant, "m": m, "repeat": repeat,
                        "seed": cell_seed(spec.base_seed, variant, m, repeat), "dataset": data_fp})


def _run_cell(args):
    spec, variant, m, repeat = args
    torch.set_num_threads(1)
    cell_dir = Path(spec.out_dir) / cell_name(variant, m, repeat)
    dataset = load_dataset(spec.dataset_path)
    fp = _cell_config_fingerprint(spec, variant, m, repeat, dataset.spec_fingerprint)
    man_path = cell_dir / "manifest.json"
    if man_path.exists():
        with open(man_path) as fh:
            man = json.load(fh)
        if man.get("status") == "completed" and man.get("fingerprint") == fp:
            return {"variant": variant, "m": m, "repeat": repeat, **man["result"], "skipped": True}
    seed = cell_seed(spec.base_seed, variant, m, repeat)
    resolved = {**spec.config, "variant": variant, "latent_dim": m}
    resolved["train"] = {**spec.config["train"], "seed": seed, "variant": variant}
    try:
        cell_dir.mkdir(parents=True, exist_ok=True)
        for stale in ("metrics.jsonl", "mask_trace.csv"):
            (cell_dir / stale).unlink(missing_ok=True)
        write_manifest(man_path, resolved, "sweep-cell", fingerprint=fp, dataset=str(spec.dataset_path),
                       dataset_fingerprint=dataset.spec_fingerprint, cell=[variant, m, repeat])
        result = run_training(spec.config, dataset, cell_dir, variant, m, seed)
    except Exception as exc:  # isolate the cell; the sweep carries on
        if man_path.exists():
            update_manifest(man_path, status="failed", error=f"{type(exc).__name__}: {exc}",
                            traceback=traceback.format_exc())
        return {"variant": variant, "m": m, "repeat": repeat, "failed": True,
                "error": f"{type(exc).__name__}: {exc}", "numeric": isinstance(exc, NumericError)}
    update_manifest(man_path, status="completed", result=result)
    return {"variant": variant, "m": m, "repeat": repeat, **result}


def _fmt(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_summary(path, rows) -> None:
    rows = sorted(rows, key=lambda r: (r["variant"], int(r["m"]), int(r["repeat"])))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r["variant"], r["m"], r["repeat"]] + [_fmt(r.get(c)) for c in SUMMARY_COLUMNS[3:]])


def read_summary(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            conv = {"variant": row["variant"], "m": int(row["m"]), "repeat": int(row["repeat"])}
            for c in ("final_frechet", "final_nac", "wall_seconds"):
                conv[c] = float(row[c]) if row[c] != "" else None
            conv["m_A"] = int(row["m_A"]) if row["m_A"] != "" else None
            out.append(conv)
    return out


@dataclass
class SweepResult:
    rows: list[dict]
    failed: list[dict]
    summary_path: Path

    @property
    def numeric_failure(self) -> bool:
        return any(f.get("numeric") for f in self.failed)


def run_sweep(spec: SweepSpec) -> SweepResult:
    if not Path(spec.dataset_path).exists():
        raise InvalidArgumentError(f"dataset {spec.dataset_path} does not exist")
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "sweep_manifest.json", {
        "dataset": str(spec.dataset_path), "variants": list(spec.variants),
        "m_values": sorted(int(m) for m in spec.m_values), "repeats": spec.repeats,
        "base_seed": spec.base_seed, "cells": [cell_name(*c) for c in spec.cells()],
        "config": spec.config, "code_version": cfg_version()})
    jobs = [(spec, v, m, r) for v, m, r in spec.cells()]
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_cell(job))
            log.info("cell %s done", cell_name(*job[1:]))
    failed = [r for r in results if r.get("failed")]
    write_summary(out / "sweep_summary.csv", results)
    return SweepResult(results, failed, out / "sweep_summary.csv")


# ---------------------------------------------------------------------------
# exports

def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _try_chart(draw, path) -> bool:
    """Best-effort rendering; any failure is logged and swallowed."""
    if path is None:
        return False
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        draw(ax)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        return True
    except Exception as exc:  # noqa: BLE001
        log.warning("chart rendering skipped: %s", exc)
        return False


def export_ucurve(sweep_dir, out_csv, chart=None) -> list[tuple]:
    """Per (variant, m): repeat count and median/min/max final Frechet, sorted by variant then m."""
    sweep_dir = Path(sweep_dir)
    summary_path = sweep_dir / "sweep_summary.csv"
    if not summary_path.exists():
        raise MissingRunsError([str(summary_path)])
    rows = read_summary(summary_path)
    man_path = sweep_dir / "sweep_manifest.json"
    expected = json.loads(man_path.read_text())["cells"] if man_path.exists() else []
    present = {cell_name(r["variant"], r["m"], r["repeat"]) for r in rows if r["final_frechet"] is not None}
    missing = [c for c in expected if c not in present]
    if missing:
        raise MissingRunsError(missing)
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r["variant"], r["m"]), []).append(r)
    table = []
    for (variant, m) in sorted(groups):
        fr = [r["final_frechet"] for r in groups[(variant, m)]]
        ma = [r["m_A"] for r in groups[(variant, m)] if r["m_A"] is not None]
        table.append((variant, m, len(fr), repr(statistics.median(fr)), repr(min(fr)), repr(max(fr)),
                      repr(float(statistics.median(ma))) if ma else ""))
    Path(out_csv).write_bytes(_csv_bytes(UCURVE_COLUMNS, table))

    def draw(ax):
        for variant in sorted({t[0] for t in table}):
            pts = [(t[1], float(t[3])) for t in table if t[0] == variant]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=variant)
        ax.set_xlabel("latent dimension m")
        ax.set_ylabel("median Frechet distance")
        ax.set_xscale("log", base=2)
        ax.legend()

    _try_chart(draw, chart)
    return table


def export_mask_trace(run_dir, out_csv, chart=None) -> list[list]:
    run_dir = Path(run_dir)
    path = run_dir / "metrics.jsonl"
    if not path.exists():
        raise MissingRunsError([str(run_dir)])
    recs = read_metrics(path)
    m = len(recs[0].mu) if recs else 0
    rows = [[r.step] + [repr(float(v)) for v in r.mu] for r in recs]
    Path(out_csv).write_bytes(_csv_bytes(["step"] + [f"mu_{j}" for j in range(m)], rows))

    def draw(ax):
        steps = [r.step for r in recs]
        for j in range(m):
            ax.plot(steps, [r.mu[j] for r in recs], lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("mask value")
        ax.set_ylim(-0.05, 1.05)

    _try_chart(draw, chart)
    return rows


# ---------------------------------------------------------------------------
# NAC comparison

def _run_info(run_dir: Path) -> dict:
    man_path = run_dir / "manifest.json"
    if not man_path.exists() or not (run_dir / "metrics.jsonl").exists():
        raise MissingRunsError([str(run_dir)])
    man = json.loads(man_path.read_text())
    recs = read_metrics(run_dir / "metrics.jsonl")
    if not recs:
        raise MissingRunsError([str(run_dir)])
    cfg = man["config"]
    last = recs[-1]
    return {
        "dataset": man.get("dataset_fingerprint") or "unknown",
        "variant": cfg["variant"],
        "m": int(cfg["latent_dim"]),
        "m_A": last.m_A,
        "nac": last.nac,
        "extractor": cfg["train"]["eval"]["extractor"],
    }


def nac_table(run_dirs, out_csv=None) -> list[dict]:
    """Final NAC per run; within each (dataset, m) group the lowest NAC is marked."""
    infos = [_run_info(Path(d)) for d in run_dirs]
    extractors = {i["extractor"] for i in infos}
    if len(extractors) > 1:
        raise InvalidArgumentError(
            f"runs use different feature extractors {sorted(extractors)}; their metrics are not comparable")
    groups: dict[tuple, list] = {}
    for info in infos:
        groups.setdefault((info["dataset"], info["m"]), []).append(info)
    for members in groups.values():
        for info in members:
            info["lower_nac"] = False
        scored = [i for i in members if i["nac"] is not None]
        if len(members) > 1 and scored:
            min(scored, key=lambda i: i["nac"])["lower_nac"] = True
    rows = sorted(infos, key=lambda i: (i["dataset"], i["m"], i["variant"]))
    if out_csv is not None:
        body = [[r["dataset"], r["variant"], r["m"], _fmt(r["m_A"]), _fmt(r["nac"]), r["extractor"],
                 "*" if r["lower_nac"] else ""] for r in rows]
        Path(out_csv).write_bytes(_csv_bytes(NAC_COLUMNS, body))
    return rows
