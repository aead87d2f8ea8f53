"""Device-count sweeps with paired seeds, plus CSV output.

Repetition ``r`` of every cell at user count ``n`` runs with
``derive_seed(base_seed, n, r)`` regardless of policy or clustering mode, so
cells can be compared seed by seed.
"""

from __future__ import annotations

import copy
import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._rng import derive_seed
from .engine import MetricsReport, run
from .model import ClusteringMode, ExperimentConfig, PlacementMetric, Policy, validate_config

METRIC_FIELDS = [f.name for f in fields(MetricsReport)]
KEY_FIELDS = ["policy", "clustering_mode", "placement_metric", "n_users"]
RAW_COLUMNS = KEY_FIELDS + ["repetition", "seed"] + [
    f for f in METRIC_FIELDS if f not in KEY_FIELDS and f != "seed"] + ["error"]
NUMERIC = [f for f in RAW_COLUMNS if f not in KEY_FIELDS + ["repetition", "seed", "error", "empty"]]
AGG_COLUMNS = KEY_FIELDS + ["runs", "errors"] + [f"{m}_{s}" for m in NUMERIC for s in ("mean", "sd")]

_POLICY_RANK = {p.value: i for i, p in enumerate(Policy)}
_MODE_RANK = {m.value: i for i, m in enumerate(ClusteringMode)}


class MissingSeries(LookupError):
    """A figure table needs a policy/mode combination the sweep did not run."""

    def __init__(self, missing: dict, written: Sequence[Path] = ()):
        self.missing = missing
        self.written = list(written)
        parts = [f"{name}: {', '.join(series)}" for name, series in missing.items()]
        super().__init__("missing series for " + "; ".join(parts))


@dataclass
class SweepSpec:
    user_counts: list[int] = field(default_factory=lambda: [100, 200, 300, 400, 500, 600])
    repetitions: int = 25
    policies: list[Policy] = field(default_factory=lambda: list(Policy))
    clustering_modes: list[ClusteringMode] = field(default_factory=lambda: [ClusteringMode.LAX])
    base_seed: int = 1
    # the monolithic baseline ranks devices by physical distance unless told otherwise
    monolithic_metric: PlacementMetric = PlacementMetric.GEOGRAPHIC

    def cells(self):
        """(policy, mode, metric) triples; Strict only applies to DualLayer."""
        out = []
        for p in self.policies:
            p = Policy(p)
            for m in self.clustering_modes:
                m = ClusteringMode(m)
                if m == ClusteringMode.STRICT and p != Policy.DUAL_LAYER:
                    continue
                if p == Policy.MONOLITHIC and m != ClusteringMode.LAX:
                    continue
                metric = PlacementMetric(self.monolithic_metric) if p == Policy.MONOLITHIC else PlacementMetric.LATENCY
                out.append((p, m, metric))
        return out

    def jobs(self, cfg: ExperimentConfig):
        for n in self.user_counts:
            for r in range(self.repetitions):
                seed = derive_seed(self.base_seed, n, r)
                for p, m, metric in self.cells():
                    c = copy.deepcopy(cfg)
                    c.policy, c.clustering_mode, c.placement_metric, c.n_users = p, m, metric, int(n)
                    yield c, r, seed


def spec_from_config(cfg: ExperimentConfig, **overrides) -> SweepSpec:
    spec = SweepSpec(user_counts=list(cfg.device_counts_sweep), repetitions=cfg.n_repetitions,
                     base_seed=cfg.rng_seed)
    for k, v in overrides.items():
        if v is not None:
            setattr(spec, k, v)
    return spec


def _run_cell(job) -> dict:
    cfg, rep, seed = job
    row = {"policy": cfg.policy.value, "clustering_mode": cfg.clustering_mode.value,
           "placement_metric": cfg.placement_metric.value, "n_users": cfg.n_users,
           "repetition": rep, "seed": seed, "error": ""}
    try:
        rep_ = run(cfg, seed)
    except Exception as exc:  # recorded per cell, the sweep goes on
        row.update({k: math.nan for k in NUMERIC})
        row["empty"] = True
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    for f in METRIC_FIELDS:
        if f not in row:
            row[f] = getattr(rep_, f)
    return row


def sort_rows(rows: list[dict]) -> list[dict]:
    return sorted(rows, key=lambda r: (_POLICY_RANK.get(r["policy"], 99), _MODE_RANK.get(r["clustering_mode"], 99),
                                       r["placement_metric"], int(r["n_users"]), int(r["repetition"])))


def run_sweep(spec: SweepSpec, cfg: ExperimentConfig, jobs: Optional[int] = None, progress=None) -> list[dict]:
    """Run every (policy, mode, count, repetition) cell; returns canonically sorted raw rows."""
    validate_config(cfg)
    work = list(spec.jobs(cfg))
    jobs = jobs or os.cpu_count() or 1
    rows = []
    if jobs <= 1:
        for i, job in enumerate(work):
            rows.append(_run_cell(job))
            if progress:
                progress(i + 1, len(work))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, row in enumerate(pool.map(_run_cell, work, chunksize=1)):
                rows.append(row)
                if progress:
                    progress(i + 1, len(work))
    return sort_rows(rows)


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and sample standard deviation per (policy, mode, metric, count), errored cells skipped."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in KEY_FIELDS), []).append(r)
    out = []
    for key, grp in groups.items():
        ok = [r for r in grp if not r.get("error")]
        agg = dict(zip(KEY_FIELDS, key))
        agg["runs"] = len(ok)
        agg["errors"] = len(grp) - len(ok)
        for m in NUMERIC:
            vals = np.array([float(r[m]) for r in ok], dtype=float)
            vals = vals[~np.isnan(vals)]
            agg[f"{m}_mean"] = float(vals.mean()) if vals.size else math.nan
            agg[f"{m}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else math.nan)
        out.append(agg)
    return sorted(out, key=lambda r: (_POLICY_RANK.get(r["policy"], 99), _MODE_RANK.get(r["clustering_mode"], 99),
                                      r["placement_metric"], int(r["n_users"])))


def _fmt(v) -> str:
    if isinstance(v, bool) or isinstance(v, np.bool_):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def csv_text(rows: list[dict], columns: Optional[Sequence[str]] = None) -> str:
    if not rows:
        raise ValueError("refusing to write an empty table")
    columns = list(columns or rows[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def emit_csv(rows: list[dict], path, columns: Optional[Sequence[str]] = None) -> Path:
    """Write ``rows`` as UTF-8 CSV with a header; floats use their shortest round-trip repr."""
    text = csv_text(rows, columns)
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# figure tables: file name, metric column, scale, series as (label, policy, mode)
_ALL_POLICIES = [("Monolithic", "Monolithic", "Lax"), ("SingleLayer", "SingleLayer", "Lax"),
                 ("DualLayer", "DualLayer", "Lax")]
FIGURES = [
    ("fig2_delay.csv", "mean_delay_ms", 1.0, "delay_ms", _ALL_POLICIES),
    ("fig3_capacity_failures.csv", "capacity_failure_rate", 100.0, "capacity_failure_pct", _ALL_POLICIES),
    ("fig4_mobility_failures.csv", "mobility_failure_rate", 100.0, "mobility_failure_pct", _ALL_POLICIES),
    ("fig5_cluster_churn.csv", "mean_churn_pct", 1.0, "churn_pct",
     [("SingleLayer", "SingleLayer", "Lax"), ("DualLayer", "DualLayer", "Lax")]),
    ("fig6_lax_vs_strict_churn.csv", "mean_churn_pct", 1.0, "churn_pct",
     [("Lax", "DualLayer", "Lax"), ("Strict", "DualLayer", "Strict")]),
]
FIGURE_COLUMNS = ["n_users", "series", "metric", "mean", "sd", "runs"]


def figure_rows(agg: list[dict], metric: str, scale: float, label: str, series) -> tuple[list[dict], list[str]]:
    rows, missing = [], []
    for name, policy, mode in series:
        sel = [a for a in agg if a["policy"] == policy and a["clustering_mode"] == mode]
        if not sel:
            missing.append(f"{policy}/{mode}")
            continue
        for a in sel:
            rows.append({"n_users": int(a["n_users"]), "series": name, "metric": label,
                         "mean": scale * a[f"{metric}_mean"], "sd": scale * a[f"{metric}_sd"], "runs": a["runs"]})
    rows.sort(key=lambda r: (r["n_users"], [s[0] for s in series].index(r["series"])))
    return rows, missing


def emit_figures_data(rows: list[dict], outdir) -> list[Path]:
    """Write the five pre-aggregated figure tables; raises MissingSeries after writing the rest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    agg = aggregate(rows)
    written, missing = [], {}
    for fname, metric, scale, label, series in FIGURES:
        frows, miss = figure_rows(agg, metric, scale, label, series)
        if miss:
            missing[fname] = miss
            continue
        written.append(emit_csv(frows, outdir / fname, FIGURE_COLUMNS))
    if missing:
        raise MissingSeries(missing, written)
    return written
