import csv
import json

import numpy as np
import pytest

from spminv.cli import main
from spminv.data import RunManifest, write_curves
from spminv.voltage import STAGE_FACTORS, synthesize_vt

SMALL_TASKS = """
counts: {train_positive: 4, train_negative: 3, test_positive: 2, test_negative: 1}
label_grid: {n_r: 64, substeps: 2}
"""
SMOKE_META = """
population: 8
generations: 10
subset_size: 4
hidden_width: 30
collocation: [21, 17]
"""


def _csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def tasks_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tasks.yaml"
    cfg.write_text(SMALL_TASKS)
    assert main(["gen-tasks", "--config", str(cfg), "--seed", "4", "--out", str(root / "t")]) == 0
    return root / "t"


@pytest.fixture(scope="module")
def curves_file(tmp_path_factory, basis):
    root = tmp_path_factory.mktemp("curves")
    t = np.linspace(0.0, 3600.0, 61)
    curves = []
    for i, k in enumerate(("early", "late")):
        c = synthesize_vt(STAGE_FACTORS[k], basis, t)
        c.battery_id, c.cycle = "b0", i + 1
        curves.append(c)
    write_curves(curves, root / "curves.csv")
    return root / "curves.csv"


def test_gen_tasks_outputs_and_manifest(tasks_dir):
    m = RunManifest.load(tasks_dir / "manifest.json")
    assert m.command == "gen-tasks" and m.seeds == {"seed": 4}
    assert len(list((tasks_dir / "tasks").glob("*.json"))) == 10
    assert len(list((tasks_dir / "labels").glob("*.csv"))) == 10
    for rel, digest in m.outputs.items():
        assert (tasks_dir / rel).exists()


def test_gen_tasks_same_seed_same_hashes(tasks_dir, tmp_path):
    cfg = tmp_path / "tasks.yaml"
    cfg.write_text(SMALL_TASKS)
    assert main(["gen-tasks", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "t")]) == 0
    a = RunManifest.load(tasks_dir / "manifest.json").outputs
    assert RunManifest.load(tmp_path / "t" / "manifest.json").outputs == a


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("ranges:\n  negative_diffusion: [1.0e-13, 1.0e-15]\n")
    assert main(["gen-tasks", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "negative_diffusion" in capsys.readouterr().err
    cfg.write_text("counts: {train_positive: 3}\nbogus: 1\n")
    assert main(["gen-tasks", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen-tasks", "--no-such-flag"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_train_meta_smoke_and_basis_usable(tasks_dir, tmp_path):
    cfg = tmp_path / "meta.yaml"
    cfg.write_text(SMOKE_META)
    out = tmp_path / "m"
    assert main(["train-meta", "--tasks", str(tasks_dir), "--config", str(cfg), "--jobs", "1",
                 "--out", str(out)]) == 0
    best = [float(r["best"]) for r in _csv_rows(out / "reports" / "fitness.csv")]
    assert len(best) == 10 and all(b <= a for a, b in zip(best, best[1:]))
    errs = [float(r["rel_l2"]) for r in _csv_rows(out / "reports" / "test_errors.csv")]
    assert len(errs) == 3 and np.all(np.isfinite(errs))
    assert json.loads((out / "reports" / "status.json").read_text())["generations_run"] == 10
    m = RunManifest.load(out / "manifest.json")
    assert any(k.startswith(str(tasks_dir)) for k in m.inputs)


def test_benchmark_table(tmp_path):
    out = tmp_path / "b"
    assert main(["benchmark", "--meshes", "16,32", "--repeats", "5", "--out", str(out)]) == 0
    rows = _csv_rows(out / "reports" / "benchmark.csv")
    names = [r[next(iter(r))] for r in rows]
    assert len(rows) == 3 and any("basis" in n or "surrogate" in n for n in names)
    m = RunManifest.load(out / "manifest.json")
    assert "reports/benchmark.csv" in m.timing_files
    assert main(["benchmark", "--meshes", "17", "--out", str(out)]) == 2


def test_infer_writes_per_cycle_summary(curves_file, tmp_path):
    out = tmp_path / "i"
    assert main(["infer", "--curves", str(curves_file), "--restarts", "4", "--generations", "3",
                 "--jobs", "1", "--out", str(out)]) == 0
    rows = _csv_rows(out / "reports" / "b0_summary.csv")
    assert {r["cycle"] for r in rows} == {"1", "2"}
    assert len(rows) == 8
    doc = json.loads((out / "inferences" / "b0.json").read_text())
    assert len(doc["cycles"]) == 2 and len(doc["cycles"][0]["runs"]) == 4
    assert main(["infer", "--curves", str(curves_file), "--restarts", "5", "--out", str(out)]) == 2


def test_sensitivity_outputs(tmp_path):
    out = tmp_path / "s"
    assert main(["sensitivity", "--state", "eta_Dp=0.5,eta_Dn=0.05,eta_Gp=3.5,eta_cmaxp=1",
                 "--out", str(out)]) == 0
    table = _csv_rows(out / "reports" / "sensitivity_max_deviation.csv")
    assert {r["factor"] for r in table} >= {"eta_Dp", "eta_Dn", "eta_Gp"}
    assert main(["sensitivity", "--state", "eta_Dp=abc", "--out", str(out)]) == 2


def test_validate_emits_correlation_tables(tmp_path):
    out = tmp_path / "v"
    assert main(["validate", "--restarts", "20", "--generations", "2", "--observed-engine", "surrogate",
                 "--sample-interval", "60", "--jobs", "1", "--out", str(out)]) == 0
    spear = _csv_rows(out / "reports" / "validate_early_spearman.csv")
    assert [int(float(r["threshold_pct"])) for r in spear] == [100, 75, 50, 25]
    runs = _csv_rows(out / "reports" / "validate_early_runs.csv")
    assert len(runs) == 20 and sum(r["filtered"] == "1" for r in runs) == 10
    assert (out / "reports" / "validate_summary.csv").exists()


def test_ingest_then_infer_chain(tmp_path, basis):
    t = np.linspace(0.0, 3600.0, 61)
    c = synthesize_vt(STAGE_FACTORS["early"], basis, t)
    raw = tmp_path / "cell7.csv"
    with open(raw, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "step", "time_s", "voltage_V", "current_A"])
        w.writerow([1, "rest", 0.0, 4.1, 0.0])
        for ti, v in zip(c.time, c.voltage):
            w.writerow([1, "discharge", 10.0 + ti, v, -1.35])
    out = tmp_path / "g"
    assert main(["ingest", "--in", str(raw), "--out", str(out)]) == 0
    curves = _csv_rows(out / "curves.csv")
    assert len(curves) == len(c) and curves[0]["battery"] == "cell7"
    warn = json.loads((out / "reports" / "warnings.json").read_text())
    assert warn == {"status": "ok", "warnings": [], "cycles": [1]}
    missing = tmp_path / "bad.csv"
    missing.write_text("cycle,step,time_s\n1,rest,0\n")
    assert main(["ingest", "--in", str(missing), "--out", str(out / "x")]) == 2


def test_replay_reproduces_primary_outputs(tasks_dir, tmp_path):
    assert main(["replay", str(tasks_dir / "manifest.json"), "--out", str(tmp_path / "r")]) == 0
    a = RunManifest.load(tasks_dir / "manifest.json").primary_hashes()
    assert RunManifest.load(tmp_path / "r" / "manifest.json").primary_hashes() == a
