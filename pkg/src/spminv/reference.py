"""Reference solver for the normalized single-particle diffusion problem.

    dc/dt = alpha * (1/r^2) d/dr (r^2 dc/dr),   r in [0, 1], t in (0, 1]
    c(r, 0) = 1,   dc/dr(0, t) = 0,   dc/dr(1, t) = beta

Spatial discretization is finite volume on spherical shells with uniform
faces; time stepping is Crank-Nicolson.  The closed-form constant-flux
series in :func:`analytic_constant_flux` serves as an independent check.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import lapack
from scipy.optimize import brentq

LABEL_N_R = 64
LABEL_N_T = 61
BENCHMARK_MESHES = (16, 32, 64, 128, 256, 512, 1024)


class DivergenceError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class SolverGrid:
    """Finite-volume mesh and output sampling.

    ``n_r`` is the number of radial cells, ``n_t`` the number of output times
    (uniform on [0, 1], both ends included) and ``substeps`` the number of
    Crank-Nicolson steps between consecutive output times.  ``startup`` is the
    number of implicit Euler steps (of a quarter output interval divided by
    ``substeps``) used to damp the start-up transient caused by switching the
    surface flux on at t=0.
    """

    n_r: int = LABEL_N_R
    n_t: int = LABEL_N_T
    substeps: int = 1
    startup: int = 4
    scheme: str = "crank-nicolson"

    def __post_init__(self):
        if self.n_r < 4:
            raise ValueError("n_r must be >= 4")
        if self.n_t < 2:
            raise ValueError("n_t must be >= 2")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.startup < 0:
            raise ValueError("startup must be >= 0")
        if self.scheme != "crank-nicolson":
            raise ValueError(f"unsupported scheme {self.scheme!r}")

    @property
    def faces(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_r + 1)

    @property
    def centers(self) -> np.ndarray:
        f = self.faces
        return 0.5 * (f[1:] + f[:-1])

    @property
    def volumes(self) -> np.ndarray:
        f = self.faces
        return (f[1:] ** 3 - f[:-1] ** 3) / 3.0

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_t)


def label_radii(n: int = LABEL_N_R) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def label_times(n: int = LABEL_N_T) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


@dataclass
class ConcentrationField:
    """Normalized concentration c[i_t, i_r] sampled on (times, radii)."""

    values: np.ndarray
    radii: np.ndarray
    times: np.ndarray
    cell_values: np.ndarray | None = field(default=None, repr=False)
    mean: np.ndarray | None = field(default=None, repr=False)

    def surface(self) -> np.ndarray:
        if self.radii[-1] != 1.0:
            raise DomainError("field does not include the surface r=1")
        return self.values[:, -1]


def _stiffness(grid: SolverGrid):
    """Tridiagonal diffusion operator K with V dc/dt = alpha * K c."""
    faces = grid.faces
    h = 1.0 / grid.n_r
    # coupling through interior faces, weighted by face area r_f^2
    w = faces[1:-1] ** 2 / h
    diag = np.zeros(grid.n_r)
    diag[:-1] -= w
    diag[1:] -= w
    return w, diag


@lru_cache(maxsize=64)
def _factorized(grid: SolverGrid, alpha: float, dt: float, theta: float):
    """LU factors of (V - theta dt alpha K), reused for every step."""
    w, diag = _stiffness(grid)
    vol = grid.volumes
    main = vol - theta * dt * alpha * diag
    off = -theta * dt * alpha * w
    dl, d, du, du2, ipiv, info = lapack.dgttrf(off.copy(), main.copy(), off.copy())
    if info != 0:
        raise DivergenceError(f"tridiagonal factorization failed (info={info})")
    return dl, d, du, du2, ipiv


def _diffuse(grid: SolverGrid, c: np.ndarray) -> np.ndarray:
    """K c as differences of face fluxes, so a constant field gives exactly zero."""
    w, _ = _stiffness(grid)
    flux = w * (c[1:] - c[:-1])
    out = np.zeros_like(c)
    out[:-1] += flux
    out[1:] -= flux
    return out


def _step(grid, c, alpha, beta, dt, theta):
    # increment form: (V - theta dt alpha K) dc = dt alpha (K c + beta e_surface)
    rhs = dt * alpha * _diffuse(grid, c)
    rhs[-1] += dt * alpha * beta  # surface flux, face area 1
    dl, d, du, du2, ipiv = _factorized(grid, alpha, dt, theta)
    dc, info = lapack.dgttrs(dl, d, du, du2, ipiv, rhs)
    if info != 0:
        raise DivergenceError(f"tridiagonal solve failed (info={info})")
    return c + dc


def solve_cells(alpha: float, beta: float, grid: SolverGrid = SolverGrid()) -> np.ndarray:
    """Cell-average concentrations at every output time, shape (n_t, n_r)."""
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    dt_out = 1.0 / (grid.n_t - 1)
    dt = dt_out / grid.substeps
    out = np.empty((grid.n_t, grid.n_r))
    c = np.ones(grid.n_r)
    out[0] = c
    for k in range(1, grid.n_t):
        if k == 1 and grid.startup:
            # implicit Euler start-up over the first (startup / 4) substep,
            # then Crank-Nicolson for the remainder
            sub = dt / 4.0
            for _ in range(grid.startup):
                c = _step(grid, c, alpha, beta, sub, 1.0)
            elapsed = sub * grid.startup
            n_cn, rem = divmod(round((dt_out - elapsed) / dt, 12), 1)
            for _ in range(int(n_cn)):
                c = _step(grid, c, alpha, beta, dt, 0.5)
            if rem > 1e-9:
                c = _step(grid, c, alpha, beta, rem * dt, 0.5)
        else:
            for _ in range(grid.substeps):
                c = _step(grid, c, alpha, beta, dt, 0.5)
        out[k] = c
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite concentration in reference solve")
    return out


def cells_to_points(cells: np.ndarray, beta: float, grid: SolverGrid,
                    radii: np.ndarray) -> np.ndarray:
    """Reconstruct point values at ``radii`` from cell averages.

    A clamped cubic spline through the cell centres, with end values from
    quadratics that honour the Neumann conditions at r=0 and r=1.
    """
    radii = np.asarray(radii, dtype=float)
    centers = grid.centers
    # c(r) ~ a + b r^2 near the centre, through the first two centres
    r0, r1 = centers[0], centers[1]
    b0 = (cells[:, 1] - cells[:, 0]) / (r1**2 - r0**2)
    left = cells[:, 0] - b0 * r0**2
    # c(r) ~ a + beta (r-1) + q (r-1)^2 near the surface
    s0, s1 = centers[-1] - 1.0, centers[-2] - 1.0
    y0 = cells[:, -1] - beta * s0
    y1 = cells[:, -2] - beta * s1
    q = (y1 - y0) / (s1**2 - s0**2)
    right = y0 - q * s0**2
    knots = np.concatenate([[0.0], centers, [1.0]])
    vals = np.concatenate([left[:, None], cells, right[:, None]], axis=1)
    n_t = cells.shape[0]
    spline = CubicSpline(knots, vals, axis=1,
                         bc_type=((1, np.zeros(n_t)), (1, np.full(n_t, beta))))
    return spline(radii)


def solve_reference(alpha: float, beta: float, grid: SolverGrid = SolverGrid(),
                    radii: np.ndarray | None = None) -> ConcentrationField:
    """Solve the normalized problem and sample it at ``radii`` (default label grid)."""
    if radii is None:
        radii = label_radii()
    radii = np.asarray(radii, dtype=float)
    if radii.min() < 0 or radii.max() > 1:
        raise DomainError("radii must lie in [0, 1]")
    cells = solve_cells(alpha, beta, grid)
    values = cells_to_points(cells, beta, grid, radii)
    values[0] = 1.0
    if not np.all(np.isfinite(values)):
        raise DivergenceError("non-finite concentration in reference solve")
    mean = 3.0 * cells @ grid.volumes
    return ConcentrationField(values=values, radii=radii, times=grid.times,
                              cell_values=cells, mean=mean)


# ---------------------------------------------------------------- analytic

@lru_cache(maxsize=8)
def tan_roots(n_terms: int) -> np.ndarray:
    """First ``n_terms`` positive roots of tan(x) = x."""
    g = lambda x: x * math.cos(x) - math.sin(x)
    roots = [brentq(g, n * math.pi + 1e-12, n * math.pi + math.pi / 2 - 1e-12, xtol=1e-14, rtol=1e-15)
             for n in range(1, n_terms + 1)]
    return np.array(roots)


def analytic_constant_flux(alpha: float, beta: float, r, t, n_terms: int = 200) -> np.ndarray:
    """Series solution for a sphere under constant surface flux.

    c = 1 + beta [3 alpha t + r^2/2 - 3/10
                  - (2/r) sum_n sin(l_n r) / (l_n^2 sin l_n) exp(-l_n^2 alpha t)]

    with l_n the positive roots of tan l = l.  ``r`` and ``t`` broadcast.
    At t=0 the value is exactly 1.
    """
    if n_terms < 20:
        raise ValueError("n_terms must be >= 20")
    r = np.asarray(r, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(r < 0) or np.any(r > 1):
        raise DomainError("r must lie in [0, 1]")
    if np.any(t < 0):
        raise DomainError("t must be >= 0")
    r, t = np.broadcast_arrays(r, t)
    lam = tan_roots(n_terms)
    rr = r[..., None]
    decay = np.exp(-(lam**2) * alpha * t[..., None])
    coef = 1.0 / (lam**2 * np.sin(lam))
    with np.errstate(invalid="ignore", divide="ignore"):
        shape = np.where(rr > 0, np.sin(lam * rr) / np.where(rr > 0, rr, 1.0), lam)
    series = 2.0 * np.sum(coef * shape * decay, axis=-1)
    out = 1.0 + beta * (3.0 * alpha * t + 0.5 * r**2 - 0.3 - series)
    return np.where(t == 0, 1.0, out)


def relative_l2(pred: np.ndarray, ref: np.ndarray) -> float:
    return float(np.linalg.norm(pred - ref) / np.linalg.norm(ref))


# ---------------------------------------------------------------- benchmark

@dataclass
class BenchmarkRow:
    label: str
    mesh: int | None
    rel_error: float
    time_mean: float
    time_std: float


def time_call(fn, repeats: int) -> tuple[float, float]:
    fn()  # warm caches
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.mean(samples)), float(np.std(samples))


def benchmark_solver(alpha: float, beta: float, meshes=BENCHMARK_MESHES, repeats: int = 25,
                     substeps: int = 1, reference: np.ndarray | None = None) -> list[BenchmarkRow]:
    """Error vs the mesh-1024 solution and wall time for each mesh."""
    meshes = list(meshes)
    if not set(meshes) <= set(BENCHMARK_MESHES):
        raise ValueError(f"meshes must be drawn from {BENCHMARK_MESHES}")
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    if reference is None:
        reference = solve_reference(alpha, beta, SolverGrid(n_r=1024, substeps=substeps)).values
    rows = []
    for mesh in meshes:
        grid = SolverGrid(n_r=mesh, substeps=substeps)
        values = solve_reference(alpha, beta, grid).values
        mean, std = time_call(lambda: solve_reference(alpha, beta, grid), repeats)
        rows.append(BenchmarkRow(f"mesh-{mesh}", mesh, relative_l2(values, reference), mean, std))
    return rows


def write_benchmark_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "mesh", "rel_l2_error", "time_mean_s", "time_std_s"])
        for row in rows:
            w.writerow([row.label, "" if row.mesh is None else row.mesh,
                        repr(row.rel_error), repr(row.time_mean), repr(row.time_std)])


# ---------------------------------------------------------------- label files

def write_label(path: str | Path, field_: ConcentrationField, meta: dict) -> None:
    """CSV of (t_hat, r_hat, c_hat) plus a JSON sidecar with ``meta``."""
    path = Path(path)
    tt, rr = np.meshgrid(field_.times, field_.radii, indexing="ij")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t_hat", "r_hat", "c_hat"])
        for t, r, c in zip(tt.ravel(), rr.ravel(), field_.values.ravel()):
            w.writerow([repr(float(t)), repr(float(r)), repr(float(c))])
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def read_label(path: str | Path) -> tuple[ConcentrationField, dict]:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    times = np.unique(data[:, 0])
    radii = np.unique(data[:, 1])
    values = data[:, 2].reshape(len(times), len(radii))
    with open(path.with_suffix(".json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    return ConcentrationField(values=values, radii=radii, times=times), meta
