"""Acceptance suite: one recorded PASS/FAIL line per numbered criterion.

Every test computes its quantities from scratch, records the outcome with
the measured numbers and then asserts it.  Run with ``pytest -v -s
tests/test_acceptance.py``; the summary block at the end lists all ten.
"""
import csv
import json
import os
import time
from importlib import resources

import numpy as np
import pytest

from spminv.cli import main
from spminv.data import RunManifest, extract_discharge, ingest_csv, write_curves
from spminv.es import CMAES
from spminv.inverse import correlation_diagnostics, infer_battery, infer_cycle, sensitivity_scan
from spminv.lepinn import PhysicsSolver
from spminv.meta import LABEL_GRID, TaskCounts, label_task, make_task, sample_tasks, task_errors
from spminv.params import ElectrodeKind, ScalingFactors
from spminv.reference import (SolverGrid, analytic_constant_flux, label_radii, label_times,
                              relative_l2, solve_reference, time_call)
from spminv.voltage import STAGE_FACTORS, ForwardModel, ReferenceEngine, SurrogateEngine, synthesize_vt

pytestmark = pytest.mark.acceptance

JOBS = os.cpu_count() or 1
STAGES = ("early", "middle", "late")
FACTORS = ("eta_Dp", "eta_Dn", "eta_Gp", "eta_cmaxp")


def _run_record():
    text = resources.files("spminv").joinpath("data", "basis_default_run.json").read_text("utf-8")
    return json.loads(text)


# 1 ---------------------------------------------------------------------------

def test_criterion_1_reference_solver_correctness(record):
    t0 = time.perf_counter()
    r, t = np.meshgrid(label_radii(), label_times())
    errs = {}
    for a, b in ((0.1, -0.5), (1.0, 1.0), (5.0, 0.2)):
        fld = solve_reference(a, b, SolverGrid(n_r=1024, substeps=16))
        errs[(a, b)] = relative_l2(fld.values, analytic_constant_flux(a, b, r, t))
    exact = analytic_constant_flux(1.0, 1.0, r, t)
    meshes = np.array([16, 32, 64, 128])
    e = [relative_l2(solve_reference(1.0, 1.0, SolverGrid(n_r=int(m), substeps=64)).values, exact)
         for m in meshes]
    order = -np.polyfit(np.log(meshes), np.log(e), 1)[0]
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-6 and 1.8 <= order <= 2.2 and elapsed < 60
    record(1, ok, f"max rel L2 {worst:.2e} (<= 1e-6), order {order:.3f} in [1.8, 2.2], "
                  f"{elapsed:.1f} s (< 60 s)")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_criterion_2_mass_conservation(record):
    t0 = time.perf_counter()
    ts = sample_tasks(counts=TaskCounts(10, 10, 1, 1), seed=2024, with_labels=False)
    grid = SolverGrid(n_r=1024, n_t=961, substeps=1)  # every time step is an output row
    worst = 0.0
    for lt in ts.train:
        fld = solve_reference(lt.alpha, lt.beta, grid)
        worst = max(worst, float(np.max(np.abs(fld.mean - (1 + 3 * lt.alpha * lt.beta * fld.times)))))
    elapsed = time.perf_counter() - t0
    ok = len(ts.train) == 20 and worst <= 1e-8 and elapsed < 60
    record(2, ok, f"max |mean - (1 + 3 alpha beta t)| {worst:.2e} (<= 1e-8) over 20 tasks, "
                  f"{elapsed:.1f} s (< 60 s)")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_criterion_3_surrogate_accuracy(record, basis):
    run = _run_record()
    ts = sample_tasks(seed=run["tasks_seed"], with_labels=False)
    held_out = [label_task(lt.task, LABEL_GRID, lt.name) for lt in ts.test]
    errs = task_errors(basis, held_out)
    kinds = np.array([lt.task.kind is ElectrodeKind.POSITIVE for lt in held_out])
    pos, neg = float(np.mean(errs[kinds])), float(np.mean(errs[~kinds]))
    solver = PhysicsSolver(basis)
    zero = solver.grid_values(solver.weights(0.624, 0.0))
    zero_err = relative_l2(zero, np.ones_like(zero))
    ok = (len(held_out) == 50 and pos <= 1e-2 and neg <= 2e-2 and zero_err <= 1e-6
          and run["wall_s"] <= 3600)
    record(3, ok, f"held-out mean rel L2 positive {pos:.2e} (<= 1e-2), negative {neg:.2e} (<= 2e-2), "
                  f"zero flux {zero_err:.1e} (<= 1e-6), training {run['wall_s']:.0f} s (<= 3600 s)")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_criterion_4_out_of_distribution(record, basis):
    tasks = [label_task(make_task(ElectrodeKind.POSITIVE, 1.95e-15, 4.5), LABEL_GRID, "ood_pos"),
             label_task(make_task(ElectrodeKind.NEGATIVE, 1.95e-16), LABEL_GRID, "ood_neg")]
    pos, neg = task_errors(basis, tasks)
    ok = pos <= 5e-2 and neg <= 5e-2
    record(4, ok, f"rel L2 D_p=1.95e-15/G_p=4.5 {pos:.2e}, D_n=1.95e-16 {neg:.2e} (each <= 5e-2)")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_criterion_5_relative_speedup(record, basis):
    lt = sample_tasks(seed=_run_record()["tasks_seed"], with_labels=False).test[0]
    a, b = lt.alpha, lt.beta
    reference = solve_reference(a, b, LABEL_GRID).values
    coarse = SolverGrid(n_r=32)
    err32 = relative_l2(solve_reference(a, b, coarse).values, reference)
    t32, _ = time_call(lambda: solve_reference(a, b, coarse), 25)
    solver = PhysicsSolver(basis)  # basis-level setup, shared by every task
    err_s = relative_l2(solver.grid_values(solver.weights(a, b)), reference)
    t_s, _ = time_call(lambda: solver.grid_values(solver.weights(a, b)), 25)
    ok = t_s <= 0.2 * t32 and err_s <= err32
    record(5, ok, f"task {lt.name}: surrogate {t_s * 1e3:.2f} ms vs mesh-32 {t32 * 1e3:.2f} ms "
                  f"(ratio {t_s / t32:.3f}, <= 0.2); error {err_s:.2e} vs mesh-32 {err32:.2e} (<=)")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_criterion_6_synthetic_inverse_validation(record, basis):
    t0 = time.perf_counter()
    model = ForwardModel(SurrogateEngine(basis))
    times = np.arange(0.0, 3600.0 + 1e-9, 10.0)
    bracketed, dn_ok, rho_ok, notes = [], [], [], []
    for idx, name in enumerate(STAGES):
        truth = STAGE_FACTORS[name]
        observed = synthesize_vt(truth, ReferenceEngine(), times)
        observed.cycle = idx
        ci = infer_cycle(observed, model, restarts=100, seed=0, generations=50, population=20,
                         jobs=JOBS)
        tv = truth.as_dict()
        inside = [ci.summary[f]["min"] <= tv[f] <= ci.summary[f]["max"] for f in FACTORS]
        dn = ci.summary["eta_Dn"]["median"]
        rows = {r.threshold: r.rho for r in correlation_diagnostics(ci.runs, truth)}
        bracketed.append(all(inside))
        dn_ok.append(abs(dn - tv["eta_Dn"]) <= 0.2 * tv["eta_Dn"])
        rho_ok.append(rows[100] > 0.5 and rows[50] < rows[100])
        missed = [f for f, i in zip(FACTORS, inside) if not i]
        notes.append(f"{name}: missed {missed or 'none'}, eta_Dn median {dn:.3g}, "
                     f"rho100 {rows[100]:.2f} rho50 {rows[50]:.2f}")
    elapsed = time.perf_counter() - t0
    ok = all(bracketed) and all(dn_ok) and sum(rho_ok) >= 2 and elapsed < 900
    record(6, ok, "; ".join(notes) + f"; {elapsed:.0f} s (< 900 s) on {JOBS} worker(s)")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_criterion_7_sensitivity_regime_flip(record, basis):
    t0 = time.perf_counter()
    a = sensitivity_scan(ScalingFactors(0.5, 0.1, 3.5, 1.0), basis).max_deviation
    b = sensitivity_scan(ScalingFactors(0.5, 0.05, 3.5, 1.0), basis).max_deviation
    elapsed = time.perf_counter() - t0
    ok = a["eta_Dp"] > a["eta_Dn"] and b["eta_Dn"] > b["eta_Dp"] and elapsed < 60
    record(7, ok, f"eta_Dn=0.1: dV(Dp) {a['eta_Dp'] * 1e3:.1f} mV vs dV(Dn) {a['eta_Dn'] * 1e3:.1f} mV; "
                  f"eta_Dn=0.05: dV(Dp) {b['eta_Dp'] * 1e3:.1f} mV vs dV(Dn) {b['eta_Dn'] * 1e3:.1f} mV; "
                  f"{elapsed:.1f} s")
    assert ok


# 8 ---------------------------------------------------------------------------

def _write_cycling_csv(path, curves, rng):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "step", "time_s", "voltage_V", "current_A"])
        t = 0.0
        for cycle, c in enumerate(curves, start=1):
            for v in np.linspace(3.4, 4.2, 20):
                w.writerow([cycle, "charge_cc", t, v, 0.675])
                t += 60.0
            for i in np.linspace(0.6, 0.05, 10):
                w.writerow([cycle, "charge_cv", t, 4.2, i])
                t += 60.0
            w.writerow([cycle, "rest", t, 4.19, 0.0])
            t += 600.0
            noisy = c.voltage + rng.uniform(-2e-3, 2e-3, len(c))
            for ti, v in zip(c.time, noisy):
                w.writerow([cycle, "discharge", t + ti, v, -1.35])
            t += c.time[-1] + 600.0
            w.writerow([cycle, "rest", t, 3.1, 0.0])
            t += 60.0


def test_criterion_8_end_to_end_pipeline(record, basis, tmp_path):
    t0 = time.perf_counter()
    times = np.arange(0.0, 3600.0 + 1e-9, 10.0)
    curves = [synthesize_vt(STAGE_FACTORS[k], ReferenceEngine(), times) for k in STAGES]
    path = tmp_path / "battery.csv"
    _write_cycling_csv(path, curves, np.random.default_rng(8))
    extracted = extract_discharge(ingest_csv(path).rows, battery_id="synthetic-3")
    result = infer_battery(extracted.curves, basis, restarts=20, seed=0, jobs=JOBS)
    dp = [c.summary["eta_Dp"]["median"] for c in result.cycles]
    dn = [c.summary["eta_Dn"]["median"] for c in result.cycles]
    elapsed = time.perf_counter() - t0
    ok = (len(result.cycles) == 3 and dp[0] > dp[1] > dp[2] and dn[0] > dn[1] > dn[2]
          and elapsed < 600)
    record(8, ok, f"median eta_Dp {[round(v, 3) for v in dp]}, eta_Dn {[round(v, 4) for v in dn]} "
                  f"(strictly decreasing), {elapsed:.0f} s (< 600 s)")
    assert ok


# 9 ---------------------------------------------------------------------------

def _run_and_replay(argv, out, replay_out):
    assert main(argv + ["--out", str(out)]) == 0
    assert main(["replay", str(out / "manifest.json"), "--out", str(replay_out)]) == 0
    first = RunManifest.load(out / "manifest.json").primary_hashes()
    second = RunManifest.load(replay_out / "manifest.json").primary_hashes()
    return bool(first) and first == second, len(first)


def test_criterion_9_reproducibility(record, basis, tmp_path):
    cfg = tmp_path / "tasks.yaml"
    cfg.write_text("counts: {train_positive: 6, train_negative: 4, test_positive: 2, test_negative: 2}\n")
    smoke = tmp_path / "meta.yaml"
    smoke.write_text("population: 8\ngenerations: 20\nsubset_size: 4\nhidden_width: 40\n")
    same = {}
    same["gen-tasks"] = _run_and_replay(["gen-tasks", "--config", str(cfg), "--seed", "3"],
                                        tmp_path / "t", tmp_path / "t2")
    same["train-meta"] = _run_and_replay(["train-meta", "--tasks", str(tmp_path / "t"), "--config",
                                          str(smoke), "--jobs", str(JOBS)], tmp_path / "m", tmp_path / "m2")
    t = np.linspace(0.0, 3600.0, 121)
    c = synthesize_vt(STAGE_FACTORS["middle"], basis, t)
    c.battery_id, c.cycle = "b9", 1
    write_curves([c], tmp_path / "curves.csv")
    same["infer"] = _run_and_replay(["infer", "--curves", str(tmp_path / "curves.csv"), "--restarts", "6",
                                     "--generations", "10", "--jobs", str(JOBS)],
                                    tmp_path / "i", tmp_path / "i2")
    ok = all(v[0] for v in same.values())
    record(9, ok, ", ".join(f"{k}: {'identical' if v[0] else 'DIFFERENT'} ({v[1]} files)"
                            for k, v in same.items()))
    assert ok


# 10 --------------------------------------------------------------------------

def test_criterion_10_cmaes_sanity(record):
    def sphere(x):
        return float(x @ x)

    def rosenbrock(x):
        return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))

    x0 = np.random.default_rng(10).uniform(-2.0, 2.0, 4)
    _, f_sphere = CMAES(x0, 0.5, popsize=20, seed=10).optimize(sphere, 200)
    _, f_rosen = CMAES(x0, 0.5, popsize=20, seed=10).optimize(rosenbrock, 2000)
    ok = f_sphere <= 1e-10 and f_rosen <= 1e-6
    record(10, ok, f"4-D sphere {f_sphere:.1e} after 200 generations (<= 1e-10), "
                   f"4-D Rosenbrock {f_rosen:.1e} after 2000 (<= 1e-6), population 20")
    assert ok
