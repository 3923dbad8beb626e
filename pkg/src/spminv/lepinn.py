"""Shallow physics-informed surrogate for the normalized particle diffusion problem.

The hidden layer maps (r, t) in [0, 1]^2 to ``n_h`` random features
f_j = act_j(a_j r + b_j t + c_j), grouped in three contiguous blocks using
sin, silu and tanh.  For a given task only the output weights are solved,
by Tikhonov-regularized least squares on the PDE, initial-condition and
boundary-condition residuals at a fixed set of collocation points.  The
field is represented as c = 1 + sum_j w_j f_j, a deviation from the
initial state, so the zero-flux task is solved exactly by w = 0.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .params import ElectrodeTask
from .reference import DomainError, label_radii, label_times

logger = logging.getLogger(__name__)

ACTIVATIONS = ("sin", "silu", "tanh")
BASIS_FORMAT = "spminv-basis"
BASIS_VERSION = 1
FALLBACK_RIDGE = 1e-10
# fits are deviations from the initial field, so the ridge pulls towards c = 1
INITIAL_STATE = 1.0


class ConditioningError(RuntimeError):
    """The regularized normal equations could not be factorized."""


class AssemblyError(ValueError):
    pass


# --------------------------------------------------------------- activations

def _sin(z):
    s = np.sin(z)
    return s, np.cos(z), -s


def _silu(z):
    sg = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic
    f = z * sg
    d = sg * (1.0 + z * (1.0 - sg))
    dd = sg * (1.0 - sg) * (2.0 + z * (1.0 - 2.0 * sg))
    return f, d, dd


def _tanh(z):
    th = np.tanh(z)
    d = 1.0 - th * th
    return th, d, -2.0 * th * d


_ACT_FUNCS = {"sin": _sin, "silu": _silu, "tanh": _tanh}


@dataclass(frozen=True)
class Lambdas:
    """Learning hyperparameters of the fine-tune."""

    pi: float = 1e-6
    pde: float = 1.0
    ic: float = 10.0
    bc: float = 10.0

    def __post_init__(self):
        if not self.pi >= 0:
            raise ValueError("lambda_PI must be >= 0")
        for name in ("pde", "ic", "bc"):
            if not getattr(self, name) > 0:
                raise ValueError(f"lambda_{name.upper()} must be > 0")

    def as_dict(self):
        return {"pi": self.pi, "pde": self.pde, "ic": self.ic, "bc": self.bc}


@dataclass(frozen=True, eq=False)
class FeatureBasis:
    """Frozen hidden layer plus learning hyperparameters.

    ``block_sizes`` gives the node counts of the sin, silu and tanh blocks,
    in that order.
    """

    r_weights: np.ndarray
    t_weights: np.ndarray
    biases: np.ndarray
    block_sizes: tuple[int, int, int]
    lambdas: Lambdas = Lambdas()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        arrays = []
        for name in ("r_weights", "t_weights", "biases"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be one-dimensional")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            arrays.append(arr)
        sizes = tuple(int(s) for s in self.block_sizes)
        if len(sizes) != len(ACTIVATIONS) or min(sizes) < 0:
            raise ValueError("block_sizes must be three non-negative counts")
        if not all(len(a) == sum(sizes) for a in arrays):
            raise ValueError("weight arrays must have length sum(block_sizes)")
        object.__setattr__(self, "block_sizes", sizes)

    @property
    def n_hidden(self) -> int:
        return len(self.biases)

    @property
    def activations(self) -> tuple[str, ...]:
        return tuple(tag for tag, n in zip(ACTIVATIONS, self.block_sizes) for _ in range(n))

    def blocks(self):
        start = 0
        for tag, n in zip(ACTIVATIONS, self.block_sizes):
            yield tag, slice(start, start + n)
            start += n

    def with_lambdas(self, lambdas: Lambdas) -> "FeatureBasis":
        return FeatureBasis(self.r_weights, self.t_weights, self.biases, self.block_sizes,
                            lambdas, dict(self.provenance))

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": BASIS_FORMAT,
            "version": BASIS_VERSION,
            "n_hidden": self.n_hidden,
            "activations": list(ACTIVATIONS),
            "block_sizes": list(self.block_sizes),
            "r_weights": self.r_weights.tolist(),
            "t_weights": self.t_weights.tolist(),
            "biases": self.biases.tolist(),
            "lambdas": self.lambdas.as_dict(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureBasis":
        if data.get("format") != BASIS_FORMAT:
            raise ValueError("not a basis file")
        if data.get("version") != BASIS_VERSION:
            raise ValueError(f"unsupported basis version {data.get('version')!r}")
        if list(data["activations"]) != list(ACTIVATIONS):
            raise ValueError("unexpected activation layout")
        basis = cls(np.asarray(data["r_weights"]), np.asarray(data["t_weights"]),
                    np.asarray(data["biases"]), tuple(data["block_sizes"]),
                    Lambdas(**data["lambdas"]), dict(data.get("provenance", {})))
        if basis.n_hidden != data["n_hidden"]:
            raise ValueError("n_hidden does not match weight arrays")
        return basis

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureBasis":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def eval_features(basis: FeatureBasis, r, t, derivatives: bool = True):
    """Features and their analytic derivatives at points (r, t).

    Returns ``(f, f_r, f_rr, f_t)``, each of shape (n_points, n_hidden), or
    just ``f`` when ``derivatives`` is False.
    """
    r = np.asarray(r, dtype=float).ravel()
    t = np.asarray(t, dtype=float).ravel()
    a, b = basis.r_weights, basis.t_weights
    z = np.multiply.outer(r, a)
    z += np.multiply.outer(t, b)
    z += basis.biases
    f = np.empty_like(z)
    if not derivatives:
        for tag, sl in basis.blocks():
            f[:, sl] = _ACT_FUNCS[tag](z[:, sl])[0]
        return f
    d1 = np.empty_like(z)
    d2 = np.empty_like(z)
    for tag, sl in basis.blocks():
        f[:, sl], d1[:, sl], d2[:, sl] = _ACT_FUNCS[tag](z[:, sl])
    return f, d1 * a, d2 * (a * a), d1 * b


# --------------------------------------------------------------- collocation

@dataclass(frozen=True, eq=False)
class CollocationSet:
    """Points where the PDE, initial and boundary conditions are imposed.

    Each block is an (n, 2) array of (r, t) pairs.
    """

    pde: np.ndarray
    ic: np.ndarray
    center: np.ndarray
    surface: np.ndarray

    def __post_init__(self):
        for name in ("pde", "ic", "center", "surface"):
            pts = np.array(getattr(self, name), dtype=float).reshape(-1, 2)
            if len(pts) == 0:
                raise AssemblyError(f"collocation block {name!r} is empty")
            if pts.min() < 0 or pts.max() > 1:
                raise AssemblyError(f"collocation block {name!r} leaves [0, 1]^2")
            pts.setflags(write=False)
            object.__setattr__(self, name, pts)
        if np.any(self.pde[:, 0] == 0):
            raise AssemblyError("PDE collocation points must exclude r=0")

    @classmethod
    def tensor(cls, n_t: int = 61, n_r: int = 64) -> "CollocationSet":
        """Tensor grid; PDE rows skip r=0 and t=0."""
        r = np.linspace(0.0, 1.0, n_r)
        t = np.linspace(0.0, 1.0, n_t)
        tt, rr = np.meshgrid(t[1:], r[1:], indexing="ij")
        pde = np.column_stack([rr.ravel(), tt.ravel()])
        ic = np.column_stack([r, np.zeros_like(r)])
        center = np.column_stack([np.zeros(n_t - 1), t[1:]])
        surface = np.column_stack([np.ones(n_t - 1), t[1:]])
        return cls(pde, ic, center, surface)

    @property
    def n_rows(self) -> int:
        return len(self.pde) + len(self.ic) + len(self.center) + len(self.surface)


DEFAULT_COLLOCATION = (61, 64)


def assemble_system(basis: FeatureBasis, alpha: float, beta: float,
                    colloc: CollocationSet) -> tuple[np.ndarray, np.ndarray]:
    """Weighted residual system A w = b for one task."""
    if np.any(colloc.pde[:, 0] == 0):
        raise AssemblyError("PDE collocation points must exclude r=0")
    lam = basis.lambdas
    r, t = colloc.pde[:, 0], colloc.pde[:, 1]
    _, fr, frr, ft = eval_features(basis, r, t)
    pde = lam.pde * (ft - alpha * (frr + (2.0 / r)[:, None] * fr))
    ic = lam.ic * eval_features(basis, colloc.ic[:, 0], colloc.ic[:, 1], derivatives=False)
    center = lam.bc * eval_features(basis, colloc.center[:, 0], colloc.center[:, 1])[1]
    surface = lam.bc * eval_features(basis, colloc.surface[:, 0], colloc.surface[:, 1])[1]
    A = np.vstack([pde, ic, center, surface])
    b = np.concatenate([
        np.zeros(len(pde)),
        np.full(len(ic), lam.ic),
        np.zeros(len(center)),
        np.full(len(surface), lam.bc * beta),
    ])
    return A, b


def offset_rows(basis: FeatureBasis, colloc: CollocationSet) -> np.ndarray:
    """Contribution of the constant initial field to each row of ``A w``."""
    o = np.zeros(colloc.n_rows)
    start = len(colloc.pde)
    o[start:start + len(colloc.ic)] = basis.lambdas.ic * INITIAL_STATE
    return o


def _spd_solve(K: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    """Solve (K + ridge I) x = rhs by Cholesky, retrying once if ridge == 0."""
    ridges = [ridge] if ridge > 0 else [ridge, FALLBACK_RIDGE]
    for lam in ridges:
        M = K.copy()
        M[np.diag_indices_from(M)] += lam
        try:
            return cho_solve(cho_factor(M, check_finite=False), rhs, check_finite=False)
        except LinAlgError:
            logger.debug("Cholesky failed with ridge %g", lam)
    raise ConditioningError("regularized normal equations are not positive definite")


def solve_tikhonov(A: np.ndarray, b: np.ndarray, ridge: float) -> np.ndarray:
    """Tikhonov-regularized least squares, choosing the cheaper normal form."""
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ConditioningError("non-finite entries in the least-squares system")
    m, n = A.shape
    if m >= n:
        return _spd_solve(A.T @ A, A.T @ b, ridge)
    return A.T @ _spd_solve(A @ A.T, b, ridge)


@dataclass(eq=False)
class FittedSolution:
    """Output weights for one task on a given basis."""

    basis: FeatureBasis
    alpha: float
    beta: float
    weights: np.ndarray
    lse: float
    task: ElectrodeTask | None = None
    offset: float = INITIAL_STATE

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)):
            raise ConditioningError("non-finite output weights")

    def __call__(self, r, t) -> np.ndarray:
        return eval_solution(self, r, t)


def fine_tune(basis: FeatureBasis, task, colloc: CollocationSet | None = None) -> FittedSolution:
    """Solve the output weights for ``task`` (an ElectrodeTask or (alpha, beta)).

    The fitted field is ``1 + sum_j w_j f_j``; LSE is ``||A w + o - b||^2``
    with ``o`` from :func:`offset_rows`.
    """
    alpha, beta, etask = _task_pair(task)
    colloc = colloc or CollocationSet.tensor(*DEFAULT_COLLOCATION)
    A, b = assemble_system(basis, alpha, beta, colloc)
    o = offset_rows(basis, colloc)
    w = solve_tikhonov(A, b - o, basis.lambdas.pi)
    resid = A @ w + o - b
    return FittedSolution(basis, alpha, beta, w, float(resid @ resid), etask)


def _task_pair(task):
    if isinstance(task, ElectrodeTask):
        return task.alpha, task.beta, task
    alpha, beta = task
    return float(alpha), float(beta), None


def _check_points(r, t):
    r = np.asarray(r, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(r)) or np.any(~np.isfinite(t)):
        raise DomainError("non-finite query point")
    if np.any(r < 0) or np.any(r > 1) or np.any(t < 0) or np.any(t > 1):
        raise DomainError("query points must lie in [0, 1]^2")
    return np.broadcast_arrays(r, t)


def eval_solution(sol: FittedSolution, r, t) -> np.ndarray:
    """Mesh-free evaluation of a fitted solution; output has the broadcast shape."""
    r, t = _check_points(r, t)
    f = eval_features(sol.basis, r, t, derivatives=False)
    return (sol.offset + f @ sol.weights).reshape(r.shape)


# --------------------------------------------------------------- fast path

class PhysicsSolver:
    """Fine-tune many tasks on one basis and collocation set.

    The normal matrix is quadratic in alpha,

        A^T A = G_ic_bc + l_pde^2 (Ft^T Ft - alpha (Ft^T L + L^T Ft) + alpha^2 L^T L),

    so its pieces are computed once and each task costs one small Cholesky
    solve.  Results agree with :func:`fine_tune` up to round-off.
    """

    def __init__(self, basis: FeatureBasis, colloc: CollocationSet | None = None,
                 eval_radii=None, eval_times=None):
        self.basis = basis
        self.colloc = colloc or CollocationSet.tensor(*DEFAULT_COLLOCATION)
        lam = basis.lambdas
        c = self.colloc
        self.eval_radii = label_radii() if eval_radii is None else np.asarray(eval_radii, float)
        self.eval_times = label_times() if eval_times is None else np.asarray(eval_times, float)
        tt, rr = np.meshgrid(self.eval_times, self.eval_radii, indexing="ij")
        grid = np.column_stack([rr.ravel(), tt.ravel()])
        # collocation blocks and the evaluation grid share most points; evaluate once
        blocks = [c.pde, c.ic, c.center, c.surface, grid]
        points, inverse = np.unique(np.vstack(blocks), axis=0, return_inverse=True)
        inverse = inverse.ravel()
        f, fr, frr, ft = eval_features(basis, points[:, 0], points[:, 1])
        bounds = np.cumsum([0] + [len(b) for b in blocks])
        pde, ic, center, surface, ev = (inverse[bounds[k]:bounds[k + 1]] for k in range(5))
        r = c.pde[:, 0]
        self._ft = lam.pde * ft[pde]
        self._lap = lam.pde * (frr[pde] + (2.0 / r)[:, None] * fr[pde])
        self._ic = lam.ic * f[ic]
        self._center = lam.bc * fr[center]
        self._surface = lam.bc * fr[surface]
        self._eval = f[ev]
        cross = self._ft.T @ self._lap
        self._g0 = (self._ft.T @ self._ft + self._ic.T @ self._ic
                    + self._center.T @ self._center + self._surface.T @ self._surface)
        self._g1 = -(cross + cross.T)
        self._g2 = self._lap.T @ self._lap
        self._rhs_bc = lam.bc * self._surface.sum(axis=0)
        self._b_ic = lam.ic
        self._b_bc = lam.bc
        self.n_rows = c.n_rows
        self._surface_cache: dict[bytes, np.ndarray] = {}

    def weights(self, alpha: float, beta: float) -> np.ndarray:
        if self.n_rows < self.basis.n_hidden:
            A, b = self.system(alpha, beta)
            return solve_tikhonov(A, b - offset_rows(self.basis, self.colloc), self.basis.lambdas.pi)
        K = self._g0 + alpha * self._g1 + (alpha * alpha) * self._g2
        if not np.all(np.isfinite(K)):
            raise ConditioningError("non-finite normal matrix")
        # the initial-field offset cancels the IC targets, leaving only the surface flux
        return _spd_solve(K, beta * self._rhs_bc, self.basis.lambdas.pi)

    def system(self, alpha, beta):
        A = np.vstack([self._ft - alpha * self._lap, self._ic, self._center, self._surface])
        b = np.concatenate([np.zeros(len(self._ft)), np.full(len(self._ic), self._b_ic),
                            np.zeros(len(self._center)),
                            np.full(len(self._surface), self._b_bc * beta)])
        return A, b

    def lse(self, w: np.ndarray, alpha: float, beta: float) -> float:
        """||A w + o - b||^2 evaluated from the residual blocks, not the Gram form."""
        pde = self._ft @ w - alpha * (self._lap @ w)
        ic = self._ic @ w  # offset and IC target cancel
        center = self._center @ w
        surface = self._surface @ w - self._b_bc * beta
        return float(pde @ pde + ic @ ic + center @ center + surface @ surface)

    def fit(self, task) -> FittedSolution:
        alpha, beta, etask = _task_pair(task)
        w = self.weights(alpha, beta)
        return FittedSolution(self.basis, alpha, beta, w, self.lse(w, alpha, beta), etask)

    def grid_values(self, w: np.ndarray) -> np.ndarray:
        """Solution on the (eval_times x eval_radii) grid."""
        return (INITIAL_STATE + self._eval @ w).reshape(len(self.eval_times), len(self.eval_radii))

    def surface_values(self, w: np.ndarray, t) -> np.ndarray:
        """Surface concentration c(1, t) for output weights ``w``."""
        return INITIAL_STATE + self.surface_features(t) @ w

    def surface_features(self, t) -> np.ndarray:
        """Cached feature matrix at r=1 for the given normalized times."""
        t = np.ascontiguousarray(t, dtype=float)
        key = t.tobytes()
        feats = self._surface_cache.get(key)
        if feats is None:
            _check_points(np.ones_like(t), t)
            feats = eval_features(self.basis, np.ones_like(t), t, derivatives=False)
            if len(self._surface_cache) > 256:
                self._surface_cache.clear()
            self._surface_cache[key] = feats
        return feats


# --------------------------------------------------------------- estimator

class SPMSurrogate(BaseEstimator, RegressorMixin):
    """Estimator wrapper: ``fit`` fine-tunes a task, ``predict`` evaluates c(r, t).

    Parameters
    ----------
    basis : FeatureBasis
        Meta-learned hidden layer.
    n_t, n_r : int
        Tensor collocation grid used for the fine-tune.
    """

    def __init__(self, basis=None, n_t=61, n_r=64):
        self.basis = basis
        self.n_t = n_t
        self.n_r = n_r

    def fit(self, X, y=None):
        """``X`` is an ElectrodeTask or an (alpha, beta) pair; ``y`` is ignored."""
        if self.basis is None:
            raise ValueError("SPMSurrogate needs a basis")
        self.solution_ = fine_tune(self.basis, X, CollocationSet.tensor(self.n_t, self.n_r))
        self.lse_ = self.solution_.lse
        return self

    def predict(self, X):
        """``X`` has columns (r_hat, t_hat)."""
        check_is_fitted(self, "solution_")
        X = check_array(X)
        if X.shape[1] != 2:
            raise ValueError("X must have two columns (r_hat, t_hat)")
        return eval_solution(self.solution_, X[:, 0], X[:, 1])
