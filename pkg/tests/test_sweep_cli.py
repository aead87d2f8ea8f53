import json
import math
import subprocess
import sys

import pytest

from edgeseg._rng import derive_seed
from edgeseg.cli import main
from edgeseg.model import ClusteringMode, ExperimentConfig, Policy
from edgeseg.sweep import (AGG_COLUMNS, FIGURE_COLUMNS, FIGURES, RAW_COLUMNS, MissingSeries, SweepSpec, aggregate,
                           csv_text, emit_csv, emit_figures_data, read_csv, run_sweep)


def tiny_cfg():
    return ExperimentConfig(sim_duration_s=20.0, warmup_s=5.0)


@pytest.fixture(scope="module")
def tiny_rows():
    spec = SweepSpec(user_counts=[40, 60], repetitions=2,
                     clustering_modes=[ClusteringMode.LAX, ClusteringMode.STRICT])
    return run_sweep(spec, tiny_cfg(), jobs=1)


def test_one_count_one_rep_gives_one_row_per_policy():
    rows = run_sweep(SweepSpec(user_counts=[100], repetitions=1), tiny_cfg(), jobs=1)
    assert len(rows) == 3
    assert {r["policy"] for r in rows} == {p.value for p in Policy}
    assert not any(r["error"] for r in rows)


def test_cells_run_strict_for_dual_only():
    cells = SweepSpec(clustering_modes=[ClusteringMode.LAX, ClusteringMode.STRICT]).cells()
    assert len(cells) == 4
    assert [(p, m) for p, m, _ in cells if m == ClusteringMode.STRICT] == [(Policy.DUAL_LAYER, ClusteringMode.STRICT)]


def test_paired_seeds(tiny_rows):
    by_key = {}
    for r in tiny_rows:
        by_key.setdefault((r["n_users"], r["repetition"]), set()).add(r["seed"])
    for (n, rep), seeds in by_key.items():
        assert seeds == {derive_seed(1, n, rep)}
    assert len({s for v in by_key.values() for s in v}) == len(by_key)


def test_parallel_matches_serial(tiny_rows):
    spec = SweepSpec(user_counts=[40, 60], repetitions=2,
                     clustering_modes=[ClusteringMode.LAX, ClusteringMode.STRICT])
    par = run_sweep(spec, tiny_cfg(), jobs=2)
    assert csv_text(par, RAW_COLUMNS) == csv_text(tiny_rows, RAW_COLUMNS)


def test_csv_is_byte_identical_and_round_trips(tiny_rows, tmp_path):
    a = emit_csv(tiny_rows, tmp_path / "a.csv", RAW_COLUMNS).read_bytes()
    b = emit_csv(tiny_rows, tmp_path / "b.csv", RAW_COLUMNS).read_bytes()
    assert a == b
    back = read_csv(tmp_path / "a.csv")
    assert list(back[0].keys()) == RAW_COLUMNS
    for src, got in zip(tiny_rows, back):
        for c in ("mean_delay_ms", "capacity_failure_rate", "mean_churn_pct", "map_stress"):
            x, y = float(src[c]), float(got[c])
            assert (math.isnan(x) and math.isnan(y)) or y == pytest.approx(x, rel=1e-9, abs=1e-12)


def test_empty_table_is_refused(tmp_path):
    with pytest.raises(ValueError):
        emit_csv([], tmp_path / "x.csv", RAW_COLUMNS)


def test_aggregate_columns_and_counts(tiny_rows):
    agg = aggregate(tiny_rows)
    assert len(agg) == 2 * 4
    assert all(a["runs"] == 2 and a["errors"] == 0 for a in agg)
    assert set(AGG_COLUMNS) <= set(agg[0].keys())


def test_figures_written(tiny_rows, tmp_path):
    paths = emit_figures_data(tiny_rows, tmp_path)
    assert sorted(p.name for p in paths) == sorted(f[0] for f in FIGURES)
    rows = read_csv(tmp_path / "fig6_lax_vs_strict_churn.csv")
    assert list(rows[0].keys()) == FIGURE_COLUMNS
    assert {r["series"] for r in rows} == {"Lax", "Strict"}


def test_missing_strict_series_only_hits_fig6(tiny_rows, tmp_path):
    lax = [r for r in tiny_rows if r["clustering_mode"] == "Lax"]
    with pytest.raises(MissingSeries) as exc:
        emit_figures_data(lax, tmp_path)
    assert list(exc.value.missing) == ["fig6_lax_vs_strict_churn.csv"]
    assert len(exc.value.written) == 4


def test_errored_cell_is_recorded_not_fatal():
    cfg = tiny_cfg()
    cfg.n_devices = 2  # segmented policies cannot build a map
    rows = run_sweep(SweepSpec(user_counts=[10], repetitions=1), cfg, jobs=1)
    errs = {r["policy"]: r["error"] for r in rows}
    assert errs["Monolithic"] == ""
    assert errs["DualLayer"].startswith("SimulationError")
    dual = next(r for r in rows if r["policy"] == "DualLayer")
    assert math.isnan(dual["mean_delay_ms"])


# --- command line

def _cli(tmp_path, *args):
    return main([*args, "--set", "sim_duration_s=20", "--set", "warmup_s=5"]
                + (["--out", str(tmp_path)] if args[0] != "validate-config" else []))


def test_cli_validate_ok(capsys):
    assert main(["validate-config"]) == 0
    assert json.loads(capsys.readouterr().out)["ok"] is True


def test_cli_invalid_config_exit_code_and_json(capsys):
    assert main(["validate-config", "--set", "kmeans.outlier_radius=-3"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "InvalidConfig"
    assert any(d["path"] == "kmeans.outlier_radius" for d in err["details"])


def test_cli_missing_config_file(capsys, tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) != 0
    assert "error" in json.loads(capsys.readouterr().err)


def test_cli_run_writes_metrics(tmp_path, capsys):
    assert _cli(tmp_path, "run", "--seed", "3", "--set", "n_users=30") == 0
    data = json.loads((tmp_path / "metrics.json").read_text())
    assert data["seed"] == 3 and data["n_users"] == 30


def test_cli_dumps(tmp_path, capsys):
    assert _cli(tmp_path, "dump-map", "--at", "10", "--set", "n_users=20") == 0
    rows = read_csv(tmp_path / "latency_map.csv")
    assert sum(r["kind"] == "user" for r in rows) == 20
    assert _cli(tmp_path, "dump-segmentation", "--set", "n_users=60") == 0
    assert read_csv(tmp_path / "segmentation.csv")


def test_cli_sweep_writes_everything(tmp_path, capsys):
    assert _cli(tmp_path, "sweep", "--counts", "30", "--reps", "1", "--jobs", "1") == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"sweep_raw.csv", "sweep_aggregate.csv", "sweep_summary.json"} <= names
    assert {f[0] for f in FIGURES} <= names


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "edgeseg", "validate-config", "--set", "n_devices=0"],
                         capture_output=True, text=True)
    assert out.returncode == 2
    assert json.loads(out.stderr)["error"] == "InvalidConfig"
