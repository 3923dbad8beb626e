"""Cycling-data ingestion, discharge extraction and run-directory artifacts."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .voltage import CUTOFF_V, DischargeCurve

logger = logging.getLogger(__name__)

STEP_KINDS = ("charge_cc", "charge_cv", "discharge", "rest", "other")
MAX_REJECT_FRACTION = 0.10
MIN_SEGMENT = 10


class SchemaError(ValueError):
    pass


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class CyclingRecordRow:
    cycle: int
    step_kind: str
    time_s: float
    voltage_V: float
    current_A: float
    line: int = field(default=0, compare=False)


@dataclass
class IngestSchema:
    """Column-name aliases and the sign convention of the current column.

    In the normalized rows discharge current is negative.  Set
    ``discharge_current_sign`` to +1 for files that record it as positive.
    """

    columns: dict = field(default_factory=lambda: {
        "cycle": ["cycle", "Cycle_Index", "cycle_index"],
        "step": ["step", "step_kind", "Step"],
        "time_s": ["time_s", "Test_Time(s)", "time"],
        "voltage_V": ["voltage_V", "Voltage(V)", "voltage"],
        "current_A": ["current_A", "Current(A)", "current"],
    })
    step_aliases: dict = field(default_factory=lambda: {
        "cc_charge": "charge_cc", "cv_charge": "charge_cv", "dchg": "discharge",
        "cc_discharge": "discharge", "idle": "rest",
    })
    discharge_current_sign: int = -1

    @classmethod
    def from_file(cls, path) -> "IngestSchema":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        base = cls()
        unknown = set(data) - {"columns", "step_aliases", "discharge_current_sign"}
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        cols = dict(base.columns)
        for key, names in data.get("columns", {}).items():
            if key not in cols:
                raise SchemaError(f"unknown canonical column {key!r}")
            cols[key] = [names] if isinstance(names, str) else list(names)
        aliases = dict(base.step_aliases, **data.get("step_aliases", {}))
        sign = int(data.get("discharge_current_sign", -1))
        if sign not in (-1, 1):
            raise SchemaError("discharge_current_sign must be -1 or 1")
        return cls(cols, aliases, sign)

    def resolve(self, header: list[str]) -> dict:
        index = {}
        for key, names in self.columns.items():
            hit = next((header.index(n) for n in names if n in header), None)
            if hit is None:
                raise SchemaError(f"missing required column {key!r} (accepted names: {names})")
            index[key] = hit
        return index

    def step_kind(self, raw: str) -> str | None:
        s = raw.strip().lower()
        s = self.step_aliases.get(s, s)
        return s if s in STEP_KINDS else None


@dataclass
class IngestResult:
    rows: list[CyclingRecordRow]
    rejects: list[tuple[int, str]]  # (line number, reason)
    path: str = ""

    @property
    def cycles(self) -> list[int]:
        return sorted({r.cycle for r in self.rows})

    def write_rejects(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["line", "reason"])
            w.writerows(self.rejects)


def _parse_row(values, idx, schema, line):
    try:
        cycle_f = float(values[idx["cycle"]])
    except ValueError:
        raise ValueError("cycle is not a number") from None
    if not cycle_f.is_integer():
        raise ValueError("cycle is not an integer")
    kind = schema.step_kind(values[idx["step"]])
    if kind is None:
        raise ValueError(f"unknown step kind {values[idx['step']]!r}")
    nums = {}
    for key in ("time_s", "voltage_V", "current_A"):
        try:
            nums[key] = float(values[idx[key]])
        except ValueError:
            raise ValueError(f"{key} is not a number") from None
        if not math.isfinite(nums[key]):
            raise ValueError(f"{key} is not finite")
    if nums["time_s"] < 0:
        raise ValueError("negative time")
    # normalized rows carry discharge current as negative
    current = nums["current_A"] * -schema.discharge_current_sign
    return CyclingRecordRow(int(cycle_f), kind, nums["time_s"], nums["voltage_V"], current, line)


def ingest_csv(path, schema: IngestSchema | None = None) -> IngestResult:
    """Parse a cycling CSV into typed rows; bad rows go to the rejects list."""
    schema = schema or IngestSchema()
    rows, rejects = [], []
    last_time: dict[int, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        idx = schema.resolve(header)
        n_data = 0
        for line, values in enumerate(reader, start=2):
            if not values or all(not v.strip() for v in values):
                continue
            n_data += 1
            if len(values) < len(header):
                rejects.append((line, "too few fields"))
                continue
            try:
                row = _parse_row(values, idx, schema, line)
            except ValueError as exc:
                rejects.append((line, str(exc)))
                continue
            if row.time_s < last_time.get(row.cycle, -math.inf):
                rejects.append((line, "time decreases within cycle"))
                continue
            last_time[row.cycle] = row.time_s
            rows.append(row)
    if n_data and len(rejects) / n_data > MAX_REJECT_FRACTION:
        raise IngestionError(f"{path}: {len(rejects)} of {n_data} rows rejected")
    for line, reason in rejects:
        logger.warning("%s:%d rejected: %s", path, line, reason)
    return IngestResult(rows, rejects, str(path))


def write_rows_csv(rows, path, schema: IngestSchema | None = None) -> None:
    """Write rows in the normalized schema (inverse of :func:`ingest_csv`)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "step", "time_s", "voltage_V", "current_A"])
        for r in rows:
            w.writerow([r.cycle, r.step_kind, repr(r.time_s), repr(r.voltage_V), repr(r.current_A)])


# ---------------------------------------------------------------- extraction

@dataclass
class ExtractionResult:
    curves: list[DischargeCurve]
    warnings: list[str]

    @property
    def status(self) -> str:
        return "ok" if self.curves else "warning"


def extract_discharge(rows, current: float = 1.35, tolerance: float = 0.05,
                      cutoff: float = CUTOFF_V, battery_id: str = "battery",
                      min_samples: int = MIN_SEGMENT) -> ExtractionResult:
    """Longest constant-current discharge run per cycle, rebased to t=0."""
    by_cycle: dict[int, list[CyclingRecordRow]] = {}
    for r in rows:
        by_cycle.setdefault(r.cycle, []).append(r)
    curves, warnings = [], []
    for cycle in sorted(by_cycle):
        seg = _longest_run(by_cycle[cycle], current, tolerance, cutoff)
        if len(seg) < min_samples:
            msg = f"cycle {cycle}: no discharge segment of >= {min_samples} samples"
            logger.warning(msg)
            warnings.append(msg)
            continue
        t = np.array([r.time_s for r in seg])
        v = np.array([r.voltage_V for r in seg])
        keep = np.concatenate([[True], np.diff(t) > 0])
        if not keep.all():
            warnings.append(f"cycle {cycle}: {int((~keep).sum())} repeated timestamps dropped")
        t, v = t[keep] - t[0], v[keep]
        curve = DischargeCurve(t, v, current, cycle, battery_id, cutoff,
                               meta={"first_line": seg[0].line, "last_line": seg[-1].line})
        curves.append(curve)
    if not curves:
        warnings.append("no discharge segment found in any cycle")
        logger.warning("no discharge segment found in any cycle")
    return ExtractionResult(curves, warnings)


def _longest_run(rows, current, tolerance, cutoff):
    best, run = [], []
    for r in rows:
        in_cc = abs(r.current_A + current) <= tolerance * current
        if in_cc and r.voltage_V >= cutoff:
            run.append(r)
            continue
        if len(run) > len(best):
            best = run
        run = []
    return run if len(run) > len(best) else best


# ---------------------------------------------------------------- curve files

CURVE_COLUMNS = ["battery", "cycle", "time_s", "voltage_V", "current_A"]


def write_curves(curves, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for c in curves:
            for t, v in zip(c.time, c.voltage):
                w.writerow([c.battery_id, c.cycle, repr(float(t)), repr(float(v)), repr(c.current)])


def read_curves(path, cutoff: float = CUTOFF_V) -> list[DischargeCurve]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CURVE_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        groups: dict[tuple, list] = {}
        for row in reader:
            key = (row["battery"], int(row["cycle"]))
            groups.setdefault(key, []).append(
                (float(row["time_s"]), float(row["voltage_V"]), float(row["current_A"])))
    out = []
    for (battery, cycle), samples in groups.items():
        arr = np.array(samples)
        out.append(DischargeCurve(arr[:, 0], arr[:, 1], float(arr[0, 2]), cycle, battery, cutoff))
    return out


# ---------------------------------------------------------------- manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Record of one command: configuration, seeds, inputs and outputs with hashes."""

    command: str
    config: dict
    seeds: dict
    version: str
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timing_files: list = field(default_factory=list)

    def add_input(self, path) -> None:
        p = Path(path)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            self.inputs[str(f)] = sha256_file(f)

    def add_outputs(self, root, paths) -> None:
        root = Path(root)
        for p in paths:
            p = Path(p)
            self.outputs[str(p.relative_to(root))] = sha256_file(p)

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "seeds": self.seeds,
                "version": self.version, "inputs": self.inputs, "outputs": self.outputs,
                "timing_files": self.timing_files}

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(**d)

    def primary_hashes(self) -> dict:
        """Output hashes excluding files that hold wall-clock timings."""
        return {k: v for k, v in self.outputs.items() if k not in self.timing_files}
