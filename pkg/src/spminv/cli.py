"""Command-line entry point.

Every command resolves its flags and config file into one plain dict,
runs from that dict alone and records it in ``manifest.json`` so that
``spminv replay`` can reproduce the outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (IngestSchema, IngestionError, RunManifest, SchemaError, extract_discharge,
                   ingest_csv, read_curves, sha256_file, write_curves)
from .inverse import (SearchSpace, correlation_diagnostics, infer_battery, infer_cycle,
                      normalized_error, sensitivity_scan)
from .lepinn import FeatureBasis, PhysicsSolver
from .meta import (ConfigError, MetaConfig, TaskCounts, TaskRanges, TaskSet, run_meta_training,
                   sample_tasks, task_errors)
from .params import CellModel, ParameterError, ScalingFactors
from .reference import SolverGrid, benchmark_solver, relative_l2, solve_reference, time_call
from .voltage import STAGE_FACTORS, CurveError, ForwardModel, SurrogateEngine, synthesize_vt

logger = logging.getLogger("spminv")

RUN_DIR_ENV = "SPMINV_RUN_DIR"
DEFAULT_BASIS = "builtin:basis_default.json"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def load_basis(ref: str) -> FeatureBasis:
    if ref.startswith("builtin:"):
        text = resources.files("spminv").joinpath("data", ref.split(":", 1)[1]).read_text("utf-8")
        return FeatureBasis.from_dict(json.loads(text))
    return FeatureBasis.load(ref)


def _read_yaml(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return data


def _check_keys(section: dict, allowed, where: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def parse_state(text: str) -> ScalingFactors:
    """``early``/``middle``/``late`` or ``eta_Dp=0.5,eta_Dn=0.1,...`` (unset factors = early)."""
    if text in STAGE_FACTORS:
        return STAGE_FACTORS[text]
    values = STAGE_FACTORS["early"].as_dict()
    for item in text.split(","):
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in values:
            raise UsageError(f"unknown factor {key!r} in state")
        try:
            values[key] = float(val)
        except ValueError:
            raise UsageError(f"factor {key!r} needs a numeric value, got {val!r}") from None
    return ScalingFactors(**values, unbounded=True)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------- commands

def run_gen_tasks(cfg: dict, out: Path):
    ranges = TaskRanges(**{k: tuple(v) for k, v in cfg["ranges"].items()})
    counts = TaskCounts(**cfg["counts"])
    grid = SolverGrid(**cfg["label_grid"])
    cell = CellModel.from_config(cfg["cell"])
    ts = sample_tasks(ranges, counts, cfg["seed"], cell, grid)
    return ts.save(out), []


def run_train_meta(cfg: dict, out: Path):
    ts = TaskSet.load(cfg["tasks"])
    mc = MetaConfig(**{k: (tuple(v) if k == "collocation" else v) for k, v in cfg["meta"].items()},
                    jobs=cfg.get("jobs", 1))
    t0 = time.perf_counter()
    result = run_meta_training(ts, mc)
    wall = time.perf_counter() - t0
    (out / "basis").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    basis_path = out / "basis" / "basis.json"
    result.basis.save(basis_path)
    hist = out / "reports" / "fitness.csv"
    result.write_history(hist)
    errs = task_errors(result.basis, ts.test) if ts.test else np.array([])
    summary = out / "reports" / "test_errors.csv"
    _write_csv(summary, ["task", "kind", "alpha", "beta", "rel_l2"],
               [(t.name, t.task.kind.value, t.alpha, t.beta, float(e)) for t, e in zip(ts.test, errs)])
    status = out / "reports" / "status.json"
    with open(status, "w", encoding="utf-8") as fh:
        json.dump({"status": result.status, "best_fitness": result.best_fitness,
                   "generations_run": len(result.history)}, fh, indent=2, sort_keys=True)
    timing = out / "reports" / "timing.json"
    with open(timing, "w", encoding="utf-8") as fh:
        json.dump({"wall_s": wall, "jobs": mc.jobs}, fh, indent=2, sort_keys=True)
    return [basis_path, hist, summary, status, timing], [timing]


def _benchmark_task(cfg):
    task = cfg["task"]
    if isinstance(task, str):
        with open(task, encoding="utf-8") as fh:
            meta = json.load(fh)
        return float(meta["alpha"]), float(meta["beta"])
    return float(task[0]), float(task[1])


def run_benchmark(cfg: dict, out: Path):
    alpha, beta = _benchmark_task(cfg)
    basis = load_basis(cfg["basis"])
    substeps = cfg["substeps"]
    reference = solve_reference(alpha, beta, SolverGrid(n_r=1024, substeps=cfg["reference_substeps"])).values
    rows = benchmark_solver(alpha, beta, cfg["meshes"], cfg["repeats"], substeps, reference)
    solver = PhysicsSolver(basis)  # features at fixed points are cached per basis
    pred = solver.grid_values(solver.weights(alpha, beta))
    mean, sd = time_call(lambda: solver.grid_values(solver.weights(alpha, beta)), cfg["repeats"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    acc = out / "reports" / "benchmark_accuracy.csv"
    _write_csv(acc, ["method", "mesh", "rel_l2"],
               [(r.label, r.mesh, r.rel_error) for r in rows] + [("surrogate", "", relative_l2(pred, reference))])
    timing = out / "reports" / "benchmark.csv"
    _write_csv(timing, ["method", "mesh", "rel_l2", "time_mean_s", "time_std_s"],
               [(r.label, r.mesh, r.rel_error, r.time_mean, r.time_std) for r in rows]
               + [("surrogate", "", relative_l2(pred, reference), mean, sd)])
    return [acc, timing], [timing]


def _load_curves(cfg):
    path = cfg["curves"]
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    if "battery" in header:
        return read_curves(path)
    # a raw cycling file: ingest and extract on the fly
    res = ingest_csv(path, IngestSchema())
    return extract_discharge(res.rows, battery_id=cfg.get("battery_id", Path(path).stem)).curves


def run_infer(cfg: dict, out: Path):
    basis = load_basis(cfg["basis"])
    curves = [c.truncate_cutoff().decimate(cfg["max_samples"]) for c in _load_curves(cfg)]
    model = ForwardModel(SurrogateEngine(basis))
    outputs = []
    (out / "inferences").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    by_battery: dict[str, list] = {}
    for c in curves:
        by_battery.setdefault(c.battery_id, []).append(c)
    if not by_battery:
        logger.warning("no discharge curves to infer")
    for battery, group in sorted(by_battery.items()):
        group.sort(key=lambda c: c.cycle)
        res = infer_battery(group, model, cfg["restarts"], cfg["seed"], cfg["generations"],
                            cfg["population"], cfg.get("jobs", 1),
                            basis_id=basis.provenance.get("run", ""))
        js = out / "inferences" / f"{battery}.json"
        res.write_json(js)
        summary = out / "reports" / f"{battery}_summary.csv"
        res.write_csv(summary)
        outputs += [js, summary]
    return outputs, []


def run_sensitivity(cfg: dict, out: Path):
    basis = load_basis(cfg["basis"])
    state = ScalingFactors(**cfg["state"], unbounded=True)
    res = sensitivity_scan(state, basis, tuple(cfg["deltas"]))
    (out / "reports").mkdir(parents=True, exist_ok=True)
    curves = out / "reports" / "sensitivity_curves.csv"
    rows = []
    for i, t in enumerate(res.times):
        row = [float(t), float(res.base_voltage[i])]
        for name in res.curves:
            row += [float(res.curves[name][d][i]) for d in sorted(res.curves[name])]
        rows.append(row)
    header = ["time_s", "V_reference"] + [f"V_{n}_{d:+g}" for n in res.curves for d in sorted(res.curves[n])]
    _write_csv(curves, header, rows)
    table = out / "reports" / "sensitivity_max_deviation.csv"
    _write_csv(table, ["factor", "delta", "max_abs_dV"], list(res.rows()))
    return [curves, table], []


def run_validate(cfg: dict, out: Path):
    basis = load_basis(cfg["basis"])
    model = ForwardModel(SurrogateEngine(basis))
    space = SearchSpace.default()
    times = np.arange(0.0, 3600.0 + 1e-9, cfg["sample_interval"])
    (out / "reports").mkdir(parents=True, exist_ok=True)
    outputs = []
    summary_rows = []
    for idx, (name, fdict) in enumerate(cfg["synthetic_set"].items()):
        truth = ScalingFactors(**fdict)
        engine = "reference" if cfg["observed_engine"] == "reference" else basis
        observed = synthesize_vt(truth, engine, times)
        observed.cycle = idx
        observed.battery_id = name
        ci = infer_cycle(observed, model, cfg["restarts"], cfg["seed"], cfg["generations"],
                         cfg["population"], jobs=cfg.get("jobs", 1))
        keep = set(ci.filtered_index)
        runs_csv = out / "reports" / f"validate_{name}_runs.csv"
        _write_csv(runs_csv, ["restart", "eta_Dp", "eta_Dn", "eta_Gp", "eta_cmaxp", "mse",
                              "objective", "normalized_error", "filtered", "status"],
                   [(r.restart, *r.factors.as_tuple(), r.mse, r.objective,
                     normalized_error(r.factors, truth, space), int(i in keep), r.status)
                    for i, r in enumerate(ci.runs)])
        rho_csv = out / "reports" / f"validate_{name}_spearman.csv"
        rows = correlation_diagnostics(ci.runs, truth, space)
        _write_csv(rho_csv, ["threshold_pct", "n_runs", "rho", "rho_check", "defined"],
                   [(r.threshold, r.n_runs, r.rho, r.rho_check, int(r.defined)) for r in rows])
        for fname in ("eta_Dp", "eta_Dn", "eta_Gp", "eta_cmaxp"):
            s = ci.summary[fname]
            summary_rows.append((name, fname, fdict[fname], s["min"], s["median"], s["max"],
                                 int(s["min"] <= fdict[fname] <= s["max"])))
        outputs += [runs_csv, rho_csv]
    summary = out / "reports" / "validate_summary.csv"
    _write_csv(summary, ["curve", "factor", "truth", "min", "median", "max", "bracketed"], summary_rows)
    return outputs + [summary], []


def run_ingest(cfg: dict, out: Path):
    schema = IngestSchema.from_file(cfg["schema"]) if cfg.get("schema") else IngestSchema()
    res = ingest_csv(cfg["input"], schema)
    ext = extract_discharge(res.rows, cfg["current"], cfg["tolerance"], cfg["cutoff"],
                            battery_id=cfg["battery_id"])
    (out / "reports").mkdir(parents=True, exist_ok=True)
    curves = out / "curves.csv"
    write_curves(ext.curves, curves)
    rejects = out / "reports" / "rejects.csv"
    res.write_rejects(rejects)
    warn = out / "reports" / "warnings.json"
    with open(warn, "w", encoding="utf-8") as fh:
        json.dump({"status": ext.status, "warnings": ext.warnings,
                   "cycles": [c.cycle for c in ext.curves]}, fh, indent=2, sort_keys=True)
    return [curves, rejects, warn], []


COMMANDS = {
    "gen-tasks": run_gen_tasks,
    "train-meta": run_train_meta,
    "benchmark": run_benchmark,
    "infer": run_infer,
    "sensitivity": run_sensitivity,
    "validate": run_validate,
    "ingest": run_ingest,
}


# ---------------------------------------------------------------- config resolution

def _resolve_gen_tasks(args) -> dict:
    raw = _read_yaml(args.config)
    _check_keys(raw, {"ranges", "counts", "cell", "label_grid", "seed"}, "gen-tasks config")
    ranges = dict(vars(TaskRanges()))
    _check_keys(raw.get("ranges", {}), ranges, "ranges")
    ranges.update(raw.get("ranges", {}))
    for k, v in ranges.items():
        if len(v) != 2 or not (0 < float(v[0]) <= float(v[1])):
            raise ConfigError(f"ranges.{k}: expected [lo, hi] with 0 < lo <= hi, got {v}")
    counts = dict(vars(TaskCounts()))
    _check_keys(raw.get("counts", {}), counts, "counts")
    counts.update(raw.get("counts", {}))
    grid = {"n_r": 1024, "substeps": 16}
    _check_keys(raw.get("label_grid", {}), {"n_r", "substeps"}, "label_grid")
    grid.update(raw.get("label_grid", {}))
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    return {"ranges": {k: [float(x) for x in v] for k, v in ranges.items()}, "counts": counts,
            "cell": raw.get("cell", {}), "label_grid": grid, "seed": seed}


def _resolve_train_meta(args) -> dict:
    raw = _read_yaml(args.config)
    keys = {"population", "generations", "subset_size", "hidden_width", "seed", "es", "sigma0",
            "patience", "collocation"}
    _check_keys(raw, keys, "train-meta config")
    meta = MetaConfig().snapshot()
    meta.update(raw)
    if args.seed is not None:
        meta["seed"] = args.seed
    if meta["es"] not in ("diag-nes", "cmaes"):
        raise ConfigError(f"es: expected diag-nes or cmaes, got {meta['es']!r}")
    MetaConfig(**{k: (tuple(v) if k == "collocation" else v) for k, v in meta.items()})  # validate
    return {"tasks": str(args.tasks), "meta": meta, "jobs": args.jobs}


def _resolve_benchmark(args) -> dict:
    if args.task in STAGE_FACTORS or args.task is None:
        task = [0.624, 0.13327 * 2.0 / 0.624]
    elif os.path.exists(args.task):
        task = str(args.task)
    else:
        try:
            task = [float(v) for v in args.task.split(",")]
        except ValueError:
            raise UsageError("--task must be a task JSON file or 'alpha,beta'") from None
        if len(task) != 2:
            raise UsageError("--task must be a task JSON file or 'alpha,beta'")
    meshes = [int(m) for m in args.meshes.split(",")]
    if not set(meshes) <= {16, 32, 64, 128, 256, 512, 1024}:
        raise ConfigError("meshes must be drawn from 16..1024 powers of two")
    if args.repeats < 5:
        raise ConfigError("repeats must be >= 5")
    return {"basis": args.basis, "task": task, "meshes": meshes, "repeats": args.repeats,
            "substeps": args.substeps, "reference_substeps": 16}


def _resolve_infer(args) -> dict:
    if args.restarts < 4 or args.restarts % 2:
        raise ConfigError("restarts must be an even number >= 4")
    return {"basis": args.basis, "curves": str(args.curves), "restarts": args.restarts,
            "seed": args.seed, "generations": args.generations, "population": args.population,
            "max_samples": 600, "jobs": args.jobs}


def _resolve_sensitivity(args) -> dict:
    return {"basis": args.basis, "state": parse_state(args.state).as_dict(),
            "deltas": [float(d) for d in args.deltas.split(",")]}


def _resolve_validate(args) -> dict:
    if args.synthetic_set in (None, "stages"):
        sset = {k: v.as_dict() for k, v in STAGE_FACTORS.items()}
    else:
        sset = _read_yaml(args.synthetic_set)
        for name, fd in sset.items():
            ScalingFactors(**fd)
    return {"basis": args.basis, "synthetic_set": sset, "restarts": args.restarts, "seed": args.seed,
            "generations": args.generations, "population": args.population,
            "sample_interval": args.sample_interval, "observed_engine": args.observed_engine,
            "jobs": args.jobs}


def _resolve_ingest(args) -> dict:
    return {"input": str(args.input), "schema": args.schema, "current": args.current,
            "tolerance": args.tolerance, "cutoff": args.cutoff,
            "battery_id": args.battery_id or Path(args.input).stem}


RESOLVERS = {
    "gen-tasks": _resolve_gen_tasks,
    "train-meta": _resolve_train_meta,
    "benchmark": _resolve_benchmark,
    "infer": _resolve_infer,
    "sensitivity": _resolve_sensitivity,
    "validate": _resolve_validate,
    "ingest": _resolve_ingest,
}

_INPUT_KEYS = ("tasks", "basis", "curves", "input", "schema")


def execute(command: str, cfg: dict, out: Path) -> RunManifest:
    """Run a resolved command and write its manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command, cfg, {"seed": cfg.get("seed", cfg.get("meta", {}).get("seed"))},
                           __version__)
    for key in _INPUT_KEYS:
        value = cfg.get(key)
        if isinstance(value, str) and not value.startswith("builtin:") and os.path.exists(value):
            manifest.add_input(value)
    outputs, timing = COMMANDS[command](cfg, out)
    manifest.add_outputs(out, outputs)
    manifest.timing_files = [str(Path(p).relative_to(out)) for p in timing]
    manifest.write(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spminv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"spminv {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    default_jobs = os.cpu_count() or 1

    def common(sp, seed=0):
        sp.add_argument("--out", type=Path, default=None,
                        help=f"output directory (default: ${RUN_DIR_ENV}/<command> or ./runs/<command>)")
        if seed is not False:
            sp.add_argument("--seed", type=int, default=seed)

    sp = sub.add_parser("gen-tasks", help="sample tasks and generate reference labels")
    sp.add_argument("--config", type=Path)
    common(sp, seed=None)  # None: take the seed from the config file

    sp = sub.add_parser("train-meta", help="meta-train a feature basis")
    sp.add_argument("--tasks", type=Path, required=True)
    sp.add_argument("--config", type=Path)
    sp.add_argument("--jobs", type=int, default=default_jobs)
    common(sp, seed=None)

    sp = sub.add_parser("benchmark", help="accuracy/time table: surrogate vs reference meshes")
    sp.add_argument("--basis", default=DEFAULT_BASIS)
    sp.add_argument("--task", default=None, help="task JSON file or 'alpha,beta'")
    sp.add_argument("--meshes", default="16,32,64,128,256,512,1024")
    sp.add_argument("--repeats", type=int, default=25)
    sp.add_argument("--substeps", type=int, default=1)
    common(sp, seed=False)

    sp = sub.add_parser("infer", help="infer scaling factors for every cycle in a curve file")
    sp.add_argument("--basis", default=DEFAULT_BASIS)
    sp.add_argument("--curves", type=Path, required=True)
    sp.add_argument("--restarts", type=int, default=20)
    sp.add_argument("--generations", type=int, default=50)
    sp.add_argument("--population", type=int, default=20)
    sp.add_argument("--jobs", type=int, default=default_jobs)
    common(sp)

    sp = sub.add_parser("sensitivity", help="one-at-a-time factor perturbations")
    sp.add_argument("--basis", default=DEFAULT_BASIS)
    sp.add_argument("--state", default="eta_Dp=0.5,eta_Dn=0.1,eta_Gp=3.5,eta_cmaxp=1.0")
    sp.add_argument("--deltas", default="-0.1,0.1")
    common(sp, seed=False)

    sp = sub.add_parser("validate", help="synthetic inverse validation with correlation tables")
    sp.add_argument("--basis", default=DEFAULT_BASIS)
    sp.add_argument("--synthetic-set", default="stages",
                    help="'stages' (early/middle/late) or a YAML mapping name -> factors")
    sp.add_argument("--restarts", type=int, default=100)
    sp.add_argument("--generations", type=int, default=50)
    sp.add_argument("--population", type=int, default=20)
    sp.add_argument("--sample-interval", type=float, default=10.0)
    sp.add_argument("--observed-engine", choices=("reference", "surrogate"), default="reference")
    sp.add_argument("--jobs", type=int, default=default_jobs)
    common(sp)

    sp = sub.add_parser("ingest", help="ingest a cycling CSV and extract discharge curves")
    sp.add_argument("--in", dest="input", type=Path, required=True)
    sp.add_argument("--schema", default=None)
    sp.add_argument("--battery-id", default=None)
    sp.add_argument("--current", type=float, default=1.35)
    sp.add_argument("--tolerance", type=float, default=0.05)
    sp.add_argument("--cutoff", type=float, default=2.7)
    common(sp, seed=False)

    sp = sub.add_parser("replay", help="re-run a command from its manifest")
    sp.add_argument("manifest", type=Path)
    common(sp, seed=False)
    return p


def _default_out(command: str) -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "runs")) / command


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or _default_out(args.command)
    try:
        if args.command == "replay":
            m = RunManifest.load(args.manifest)
            if m.command not in COMMANDS:
                raise ConfigError(f"manifest names unknown command {m.command!r}")
            for path, digest in m.inputs.items():
                if not os.path.exists(path) or sha256_file(path) != digest:
                    logger.warning("input %s changed since the original run", path)
            execute(m.command, m.config, out)
        else:
            cfg = RESOLVERS[args.command](args)
            execute(args.command, cfg, out)
    except (ConfigError, UsageError, SchemaError, ParameterError, yaml.YAMLError, FileNotFoundError) as exc:
        print(f"spminv {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, CurveError) as exc:
        print(f"spminv {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"spminv {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
