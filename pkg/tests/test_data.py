import csv

import numpy as np
import pytest

from spminv.data import (CyclingRecordRow, IngestionError, IngestSchema, RunManifest, SchemaError,
                         extract_discharge, ingest_csv, read_curves, write_curves, write_rows_csv)
from spminv.voltage import STAGE_FACTORS, synthesize_vt

HEADER = ["cycle", "step", "time_s", "voltage_V", "current_A"]


def _write(path, rows, header=HEADER):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def cc_cv_cycle(cycle, t0, discharge_t, discharge_v, current=1.35):
    """Rest, CC charge, CV hold, rest and then the given discharge samples."""
    rows, t = [], t0
    for v in (3.6, 3.6):
        rows.append([cycle, "rest", t, v, 0.0])
        t += 10
    for v in np.linspace(3.6, 4.2, 15):
        rows.append([cycle, "charge_cc", t, v, 0.675])
        t += 60
    for i in np.linspace(0.6, 0.05, 10):
        rows.append([cycle, "charge_cv", t, 4.2, i])
        t += 60
    rows.append([cycle, "rest", t, 4.18, 0.0])
    t += 300
    for dt, v in zip(discharge_t, discharge_v):
        rows.append([cycle, "discharge", t + dt, v, -current])
    end = t + discharge_t[-1] + 10
    rows.append([cycle, "rest", end, 2.9, 0.0])
    return rows, end + 10


def test_two_cycles_partitioned(tmp_path):
    rows = [[c, "rest", float(t), 3.7, 0.0] for c in (1, 2) for t in range(5)]
    res = ingest_csv(_write(tmp_path / "a.csv", rows))
    assert res.cycles == [1, 2]
    for c in (1, 2):
        t = [r.time_s for r in res.rows if r.cycle == c]
        assert t == sorted(t) and len(t) == 5
    assert not res.rejects


def test_nan_voltage_rejected_with_line_number(tmp_path):
    rows = [[1, "rest", float(t), 3.7, 0.0] for t in range(20)]
    rows[4][3] = "NaN"
    res = ingest_csv(_write(tmp_path / "a.csv", rows))
    assert res.rejects == [(6, "voltage_V is not finite")]
    assert len(res.rows) == 19


def test_too_many_rejects_abort(tmp_path):
    rows = [[1, "rest", float(t), "x" if t % 3 == 0 else 3.7, 0.0] for t in range(20)]
    with pytest.raises(IngestionError):
        ingest_csv(_write(tmp_path / "a.csv", rows))


def test_missing_column_is_schema_error(tmp_path):
    p = _write(tmp_path / "a.csv", [[1, "rest", 0.0, 3.7]], HEADER[:-1])
    with pytest.raises(SchemaError, match="current_A"):
        ingest_csv(p)


def test_round_trip_rows(tmp_path):
    rows, _ = cc_cv_cycle(4, 0.0, np.arange(0.0, 200.0, 10.0), np.linspace(4.0, 3.6, 20))
    first = ingest_csv(_write(tmp_path / "a.csv", rows)).rows
    write_rows_csv(first, tmp_path / "b.csv")
    again = ingest_csv(tmp_path / "b.csv").rows
    assert again == first
    assert [r.line for r in again] == [r.line for r in first]


def test_schema_aliases_and_sign(tmp_path):
    rows = [[1, "DCHG", float(t), 3.7, 1.35] for t in range(12)]
    header = ["Cycle_Index", "Step", "Test_Time(s)", "Voltage(V)", "Current(A)"]
    cfg = tmp_path / "schema.yaml"
    cfg.write_text("discharge_current_sign: 1\n")
    res = ingest_csv(_write(tmp_path / "a.csv", rows, header), IngestSchema.from_file(cfg))
    assert all(r.step_kind == "discharge" and r.current_A == -1.35 for r in res.rows)
    cfg.write_text("colour: red\n")
    with pytest.raises(SchemaError):
        IngestSchema.from_file(cfg)


def test_synthetic_discharge_recovered_exactly(tmp_path, basis):
    t = np.linspace(0.0, 3600.0, 181)
    curves = [synthesize_vt(STAGE_FACTORS[k], basis, t) for k in ("early", "late")]
    rows, t0 = [], 0.0
    for cycle, c in enumerate(curves, start=1):
        part, t0 = cc_cv_cycle(cycle, t0, c.time, c.voltage)
        rows += part
    res = ingest_csv(_write(tmp_path / "cyc.csv", rows))
    got = extract_discharge(res.rows, battery_id="syn")
    assert got.status == "ok" and len(got.curves) == 2
    for want, have in zip(curves, got.curves):
        assert np.array_equal(have.time, want.time)
        assert np.array_equal(have.voltage, want.voltage)
        have.check()


def test_all_rest_gives_empty_result_with_warning():
    rows = [CyclingRecordRow(1, "rest", float(t), 3.7, 0.0) for t in range(50)]
    res = extract_discharge(rows)
    assert res.curves == [] and res.status == "warning" and res.warnings


def test_segment_truncated_at_cutoff():
    v = np.concatenate([np.linspace(3.9, 2.71, 30), [2.69, 2.65]])
    rows = [CyclingRecordRow(1, "discharge", float(10 * i), x, -1.35) for i, x in enumerate(v)]
    (curve,) = extract_discharge(rows).curves
    assert len(curve) == 30
    assert curve.voltage[-1] == pytest.approx(2.71) and curve.voltage.min() >= 2.7
    assert curve.time[0] == 0.0 and np.all(np.diff(curve.time) > 0)


def test_curve_file_round_trip(tmp_path, basis):
    c = synthesize_vt(STAGE_FACTORS["middle"], basis, np.linspace(0, 3600, 61))
    c.battery_id, c.cycle = "b1", 7
    write_curves([c], tmp_path / "curves.csv")
    (back,) = read_curves(tmp_path / "curves.csv")
    assert back.cycle == 7 and back.battery_id == "b1"
    assert np.array_equal(back.voltage, c.voltage)


def test_decimation_bounds_samples():
    from spminv.voltage import DischargeCurve
    c = DischargeCurve(np.arange(1500.0), np.linspace(4.0, 3.0, 1500))
    assert len(c.decimate(600)) <= 600
    assert c.decimate(600).time[0] == 0.0


def test_manifest_round_trip_and_primary_hashes(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "a.csv").write_text("x\n1\n")
    (out / "t.csv").write_text("seconds\n0.1\n")
    m = RunManifest("demo", {"k": 1}, {"seed": 0}, "0")
    m.add_outputs(out, [out / "a.csv", out / "t.csv"])
    m.timing_files = ["t.csv"]
    m.write(out / "manifest.json")
    back = RunManifest.load(out / "manifest.json")
    assert back.to_dict() == m.to_dict()
    assert set(back.primary_hashes()) == {"a.csv"}
