"""Baldwinian meta-training of the surrogate's hidden-layer distribution.

A genome does not hold network weights.  It holds, for each activation
block, the mean and log-spread of the r-weights, t-weights and biases, plus
the log of the four fine-tune weights.  A basis is drawn from it with a
fixed seed, fine-tuned in closed form on a subset of tasks, and scored by
sum(tau_lse * LSE + tau_mse * MSE).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .es import make_strategy
from .lepinn import (ACTIVATIONS, CollocationSet, ConditioningError, DEFAULT_COLLOCATION,
                     FeatureBasis, Lambdas, PhysicsSolver)
from .params import CellModel, ElectrodeKind, ElectrodeTask
from .reference import (ConcentrationField, SolverGrid, label_radii, label_times, read_label,
                        relative_l2, solve_reference, write_label)

logger = logging.getLogger(__name__)

TAU_LSE = 0.1
TAU_MSE = 1.0
PENALTY = 1e6
# decoded log-lambdas are clipped to this window; a common rescaling of all
# four leaves the fitted weights unchanged, so the genome could otherwise drift
LOG_LAMBDA_RANGE = (-30.0, 12.0)
LABEL_GRID = SolverGrid(n_r=1024, substeps=16)


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------- tasks

@dataclass(frozen=True)
class TaskRanges:
    """Sampling ranges for the task population (SI units)."""

    positive_diffusion: tuple[float, float] = (3.9e-15, 3.9e-13)
    positive_geometric: tuple[float, float] = (1.01, 4.03)
    negative_diffusion: tuple[float, float] = (3.9e-16, 3.9e-13)

    def __post_init__(self):
        for name in ("positive_diffusion", "positive_geometric", "negative_diffusion"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (0 < lo <= hi):
                raise ConfigError(f"range {name} must satisfy 0 < lo <= hi, got [{lo}, {hi}]")
            object.__setattr__(self, name, (lo, hi))


@dataclass(frozen=True)
class TaskCounts:
    train_positive: int = 60
    train_negative: int = 40
    test_positive: int = 40
    test_negative: int = 10

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1")


@dataclass(eq=False)
class LabeledTask:
    task: ElectrodeTask
    labels: np.ndarray  # (n_t, n_r) on the label grid
    name: str = ""

    @property
    def alpha(self):
        return self.task.alpha

    @property
    def beta(self):
        return self.task.beta


def _task_meta(task: ElectrodeTask) -> dict:
    p = task.params
    return {
        "kind": task.kind.value,
        "alpha": task.alpha,
        "beta": task.beta,
        "surface_flux": task.surface_flux,
        "horizon": task.horizon,
        "params": {k: getattr(p, k) for k in (
            "diffusion_coefficient", "particle_radius", "initial_concentration",
            "max_concentration", "geometric_coefficient", "exchange_current_density")},
    }


def _task_from_meta(meta: dict) -> ElectrodeTask:
    from .params import ElectrodeParams
    params = ElectrodeParams(**meta["params"])
    return ElectrodeTask(ElectrodeKind(meta["kind"]), params, meta["surface_flux"], meta["horizon"])


@dataclass(eq=False)
class TaskSet:
    train: list[LabeledTask]
    test: list[LabeledTask]
    seed: int | None = None
    grid: SolverGrid = LABEL_GRID

    def __post_init__(self):
        ids = {id(t) for t in self.train}
        if any(id(t) in ids for t in self.test):
            raise ConfigError("train and test tasks overlap")

    def counts(self) -> dict:
        def count(tasks, kind):
            return sum(t.task.kind is kind for t in tasks)
        return {"train_positive": count(self.train, ElectrodeKind.POSITIVE),
                "train_negative": count(self.train, ElectrodeKind.NEGATIVE),
                "test_positive": count(self.test, ElectrodeKind.POSITIVE),
                "test_negative": count(self.test, ElectrodeKind.NEGATIVE)}

    def save(self, directory: str | Path) -> list[Path]:
        """Write tasks/<name>.json and labels/<name>.csv (+ sidecar); returns written paths."""
        directory = Path(directory)
        (directory / "tasks").mkdir(parents=True, exist_ok=True)
        (directory / "labels").mkdir(parents=True, exist_ok=True)
        written = []
        for split, tasks in (("train", self.train), ("test", self.test)):
            for lt in tasks:
                meta = dict(_task_meta(lt.task), split=split, name=lt.name, seed=self.seed,
                            grid={"n_r": self.grid.n_r, "n_t": self.grid.n_t,
                                  "substeps": self.grid.substeps, "scheme": self.grid.scheme})
                task_path = directory / "tasks" / f"{lt.name}.json"
                with open(task_path, "w", encoding="utf-8") as fh:
                    json.dump(meta, fh, indent=2, sort_keys=True)
                label_path = directory / "labels" / f"{lt.name}.csv"
                fld = ConcentrationField(values=lt.labels, radii=label_radii(), times=label_times())
                write_label(label_path, fld, meta)
                written += [task_path, label_path, label_path.with_suffix(".json")]
        return written

    @classmethod
    def load(cls, directory: str | Path) -> "TaskSet":
        directory = Path(directory)
        train, test, seed = [], [], None
        for label_path in sorted((directory / "labels").glob("*.csv")):
            fld, meta = read_label(label_path)
            lt = LabeledTask(_task_from_meta(meta), fld.values, meta.get("name", label_path.stem))
            (train if meta["split"] == "train" else test).append(lt)
            seed = meta.get("seed", seed)
        if not train:
            raise ConfigError(f"no training tasks found under {directory}")
        order = lambda t: t.name  # noqa: E731
        return cls(sorted(train, key=order), sorted(test, key=order), seed)


def make_task(kind: ElectrodeKind, diffusion: float, geometric: float | None = None,
              cell: CellModel | None = None) -> ElectrodeTask:
    """Electrode task from the cell reference state with D (and G_p) overridden."""
    cell = cell or CellModel.from_config()
    ref = cell.positive if kind is ElectrodeKind.POSITIVE else cell.negative
    kw = {"diffusion_coefficient": float(diffusion)}
    if geometric is not None:
        kw.update(geometric_coefficient=float(geometric), volume_fraction=None, area=None,
                  thickness=None)
    return ElectrodeTask.for_electrode(kind, replace(ref, **kw), cell.constants)


def label_task(task: ElectrodeTask, grid: SolverGrid = LABEL_GRID, name: str = "") -> LabeledTask:
    return LabeledTask(task, solve_reference(task.alpha, task.beta, grid).values, name)


def sample_tasks(ranges: TaskRanges = TaskRanges(), counts: TaskCounts = TaskCounts(),
                 seed: int = 0, cell: CellModel | None = None, grid: SolverGrid = LABEL_GRID,
                 with_labels: bool = True) -> TaskSet:
    """Draw train and test tasks and label them with the reference solver.

    D_p and D_n are log-uniform, G_p uniform.  Draws happen in a fixed order
    (train positive, train negative, test positive, test negative) from one
    generator, so the set depends only on ``seed``.
    """
    cell = cell or CellModel.from_config()
    rng = np.random.default_rng(seed)

    def log_uniform(lo_hi, size):
        lo, hi = np.log10(lo_hi)
        return 10.0 ** rng.uniform(lo, hi, size)

    def draw(split, n_pos, n_neg):
        out = []
        dp = log_uniform(ranges.positive_diffusion, n_pos)
        gp = rng.uniform(*ranges.positive_geometric, n_pos)
        dn = log_uniform(ranges.negative_diffusion, n_neg)
        for i in range(n_pos):
            out.append((f"{split}_pos_{i:03d}", make_task(ElectrodeKind.POSITIVE, dp[i], gp[i], cell)))
        for i in range(n_neg):
            out.append((f"{split}_neg_{i:03d}", make_task(ElectrodeKind.NEGATIVE, dn[i], None, cell)))
        return out

    train = draw("train", counts.train_positive, counts.train_negative)
    test = draw("test", counts.test_positive, counts.test_negative)

    def wrap(items):
        if with_labels:
            return [label_task(t, grid, name) for name, t in items]
        return [LabeledTask(t, np.empty((0, 0)), name) for name, t in items]

    return TaskSet(wrap(train), wrap(test), seed, grid)


# ------------------------------------------------------------------- genome

_BLOCK_FIELDS = ("r_mean", "r_logspread", "t_mean", "t_logspread", "b_mean", "b_logspread")
GENOME_SIZE = len(ACTIVATIONS) * len(_BLOCK_FIELDS) + 4


@dataclass(frozen=True, eq=False)
class DistributionGenome:
    """Per-block weight distribution plus log fine-tune weights.

    ``theta`` has shape (3, 6): rows are the sin/silu/tanh blocks, columns
    are mean and log-spread of the r-weights, t-weights and biases.
    ``log_lambdas`` holds log(lambda_PI, lambda_PDE, lambda_IC, lambda_BC).
    A log-spread of -inf encodes zero spread.
    """

    theta: np.ndarray
    log_lambdas: np.ndarray
    seed: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(len(ACTIVATIONS), len(_BLOCK_FIELDS))
        loglam = np.array(self.log_lambdas, dtype=float).reshape(4)
        if np.any(np.isnan(theta)) or np.any(np.isinf(theta[:, 0::2])):
            raise ValueError("genome means must be finite")
        if np.any(np.isposinf(theta[:, 1::2])):
            raise ValueError("genome spreads must be finite")
        if np.any(np.isnan(loglam)) or np.any(np.isposinf(loglam)):
            raise ValueError("invalid log-lambda entries")
        theta.setflags(write=False)
        loglam.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "log_lambdas", loglam)

    @classmethod
    def default(cls, seed: int = 0) -> "DistributionGenome":
        theta = np.tile([0.0, math.log(3.0)], (len(ACTIVATIONS), 3))
        return cls(theta, np.log([1e-5, 1.0, 10.0, 10.0]), seed)

    @classmethod
    def from_vector(cls, x, seed: int = 0) -> "DistributionGenome":
        x = np.asarray(x, dtype=float)
        if x.shape != (GENOME_SIZE,):
            raise ValueError(f"genome vector must have length {GENOME_SIZE}")
        return cls(x[:-4], x[-4:], seed)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta.ravel(), self.log_lambdas])

    @property
    def spreads(self) -> np.ndarray:
        return np.exp(self.theta[:, 1::2])

    def lambdas(self) -> Lambdas:
        lo, hi = LOG_LAMBDA_RANGE
        pi, pde, ic, bc = np.exp(np.clip(self.log_lambdas, lo, hi))
        if np.isneginf(self.log_lambdas[0]):
            pi = 0.0
        return Lambdas(pi=float(pi), pde=float(pde), ic=float(ic), bc=float(bc))

    def materialize(self, n_hidden: int, provenance: dict | None = None) -> FeatureBasis:
        """Draw a basis.  The same (genome, n_hidden) always yields the same weights."""
        sizes = block_sizes(n_hidden)
        rng = np.random.default_rng(self.seed)
        # one standard-normal draw per node and weight kind, shared by all genomes
        z = rng.standard_normal((3, n_hidden))
        arrays = np.empty((3, n_hidden))
        start = 0
        for k, size in enumerate(sizes):
            sl = slice(start, start + size)
            for j in range(3):
                arrays[j, sl] = self.theta[k, 2 * j] + math.exp(self.theta[k, 2 * j + 1]) * z[j, sl]
            start += size
        prov = {"genome": self.to_vector().tolist(), "genome_seed": self.seed}
        prov.update(provenance or {})
        return FeatureBasis(arrays[0], arrays[1], arrays[2], sizes, self.lambdas(), prov)


def block_sizes(n_hidden: int) -> tuple[int, int, int]:
    if n_hidden < len(ACTIVATIONS):
        raise ValueError("hidden width must be at least 3")
    base, extra = divmod(int(n_hidden), len(ACTIVATIONS))
    return tuple(base + (k < extra) for k in range(len(ACTIVATIONS)))


# ------------------------------------------------------------------ fitness

@dataclass
class FitnessRecord:
    genome_id: int
    generation: int
    fitness: float
    lse: np.ndarray
    mse: np.ndarray
    failed: np.ndarray
    tau_lse: float = TAU_LSE
    tau_mse: float = TAU_MSE

    def recompute(self) -> float:
        per_task = np.where(self.failed, PENALTY, self.tau_lse * self.lse + self.tau_mse * self.mse)
        return float(np.sum(per_task))


def evaluate_genome(genome: DistributionGenome, tasks, n_hidden: int = 128,
                    colloc: CollocationSet | None = None, tau_lse: float = TAU_LSE,
                    tau_mse: float = TAU_MSE, genome_id: int = 0, generation: int = 0) -> FitnessRecord:
    """Fine-tune every task in ``tasks`` and aggregate LSE and label MSE."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("task subset is empty")
    n = len(tasks)
    lse, mse = np.full(n, np.nan), np.full(n, np.nan)
    failed = np.zeros(n, dtype=bool)
    try:
        solver = PhysicsSolver(genome.materialize(n_hidden), colloc)
    except (ConditioningError, FloatingPointError, ValueError) as exc:
        logger.debug("genome %d could not be materialized: %s", genome_id, exc)
        solver = None
    for i, lt in enumerate(tasks):
        if solver is None:
            failed[i] = True
            continue
        try:
            w = solver.weights(lt.alpha, lt.beta)
            pred = solver.grid_values(w)
            lse[i] = solver.lse(w, lt.alpha, lt.beta)
            mse[i] = float(np.mean((pred - lt.labels) ** 2))
            failed[i] = not (np.isfinite(lse[i]) and np.isfinite(mse[i]))
        except ConditioningError:
            failed[i] = True
    rec = FitnessRecord(genome_id, generation, 0.0, lse, mse, failed, tau_lse, tau_mse)
    rec.fitness = rec.recompute()
    return rec


def task_errors(basis: FeatureBasis, tasks, colloc: CollocationSet | None = None) -> np.ndarray:
    """Relative L2 error of the fine-tuned surrogate against each task's labels."""
    solver = PhysicsSolver(basis, colloc)
    out = []
    for lt in tasks:
        try:
            out.append(relative_l2(solver.grid_values(solver.weights(lt.alpha, lt.beta)), lt.labels))
        except ConditioningError:
            out.append(np.nan)
    return np.asarray(out)


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class MetaConfig:
    population: int = 32
    generations: int = 300
    subset_size: int = 16
    hidden_width: int = 128
    seed: int = 0
    es: str = "diag-nes"
    sigma0: float = 0.5
    patience: int | None = 150
    collocation: tuple[int, int] = DEFAULT_COLLOCATION
    jobs: int = 1

    def __post_init__(self):
        if self.population < 8:
            raise ConfigError("population must be >= 8")
        if self.generations < 10:
            raise ConfigError("generations must be >= 10")
        if self.subset_size < 1:
            raise ConfigError("subset_size must be >= 1")
        if self.hidden_width < 3:
            raise ConfigError("hidden_width must be >= 3")
        object.__setattr__(self, "collocation", tuple(int(v) for v in self.collocation))

    def snapshot(self) -> dict:
        d = asdict(self)
        d["collocation"] = list(self.collocation)
        d.pop("jobs")  # does not affect results
        return d


@dataclass
class GenerationStats:
    generation: int
    best: float  # best-so-far
    generation_best: float
    mean: float
    median: float
    n_penalized: int


@dataclass
class MetaResult:
    basis: FeatureBasis
    genome: DistributionGenome
    best_fitness: float
    history: list[GenerationStats] = field(default_factory=list)
    status: str = "completed"

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["generation", "best", "mean", "median", "generation_best", "n_penalized"])
            for h in self.history:
                w.writerow([h.generation, repr(h.best), repr(h.mean), repr(h.median),
                            repr(h.generation_best), h.n_penalized])


def subset_indices(n_train: int, subset_size: int, seed: int, generation: int) -> np.ndarray:
    """Training subset for one generation, drawn without replacement."""
    rng = np.random.default_rng([seed, generation])
    return np.sort(rng.choice(n_train, size=min(subset_size, n_train), replace=False))


def run_meta_training(taskset: TaskSet, config: MetaConfig = MetaConfig(),
                      x0=None, callback=None) -> MetaResult:
    """Evolve the genome; returns the basis drawn from the best genome seen."""
    cfg = config
    colloc = CollocationSet.tensor(*cfg.collocation)
    x0 = DistributionGenome.default(cfg.seed).to_vector() if x0 is None else np.asarray(x0, float)
    strategy = make_strategy(cfg.es, x0, cfg.sigma0, cfg.population, seed=[cfg.seed, 1])
    train = taskset.train
    best_x, best_f = x0, np.inf
    history: list[GenerationStats] = []
    since_improve, status = 0, "completed"
    pool = _make_pool(cfg.jobs)

    for gen in range(cfg.generations):
        idx = subset_indices(len(train), cfg.subset_size, cfg.seed, gen)
        subset = [train[i] for i in idx]
        X = strategy.ask()
        genomes = [DistributionGenome.from_vector(x, cfg.seed) for x in X]
        args = [(g, subset, cfg.hidden_width, colloc, k, gen) for k, g in enumerate(genomes)]
        records = pool(args)
        f = np.array([r.fitness for r in records])
        strategy.tell(X, f)
        n_pen = int(sum(r.failed.all() for r in records))
        if n_pen == len(records):
            logger.warning("generation %d: every genome was penalized", gen)
        i = int(np.argmin(f))
        if f[i] < best_f:
            best_f, best_x = float(f[i]), X[i].copy()
            since_improve = 0
        else:
            since_improve += 1
        stats = GenerationStats(gen, best_f, float(f[i]), float(np.mean(f)), float(np.median(f)), n_pen)
        history.append(stats)
        if callback is not None:
            callback(stats)
        if gen % 25 == 0:
            logger.info("generation %d best %.4g median %.4g", gen, best_f, stats.median)
        if cfg.patience is not None and since_improve >= cfg.patience:
            logger.warning("no improvement in %d generations, stopping", cfg.patience)
            status = "stalled"
            break

    genome = DistributionGenome.from_vector(best_x, cfg.seed)
    basis = genome.materialize(cfg.hidden_width, {"run": _run_id(taskset, cfg), "seed": cfg.seed,
                                                  "best_fitness": best_f, "es": cfg.es})
    return MetaResult(basis, genome, best_f, history, status)


def _evaluate_args(a):
    return evaluate_genome(a[0], a[1], a[2], a[3], genome_id=a[4], generation=a[5])


def _make_pool(jobs: int):
    if jobs == 1:
        return lambda args: [_evaluate_args(a) for a in args]
    from joblib import Parallel, delayed
    par = Parallel(n_jobs=jobs)
    return lambda args: par(delayed(_evaluate_args)(a) for a in args)


def _run_id(taskset: TaskSet, cfg: MetaConfig) -> str:
    import hashlib
    payload = json.dumps({"tasks_seed": taskset.seed, "n_train": len(taskset.train),
                          "config": cfg.snapshot()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


# ---------------------------------------------------------------- estimator

class BasisMetaLearner(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`run_meta_training`.

    ``fit`` takes a TaskSet; ``transform`` maps (r_hat, t_hat) rows to the
    learned hidden features.
    """

    def __init__(self, population=32, generations=300, subset_size=16, hidden_width=128,
                 es="diag-nes", random_state=0, jobs=1):
        self.population = population
        self.generations = generations
        self.subset_size = subset_size
        self.hidden_width = hidden_width
        self.es = es
        self.random_state = random_state
        self.jobs = jobs

    def fit(self, X, y=None):
        if not isinstance(X, TaskSet):
            raise TypeError("BasisMetaLearner.fit expects a TaskSet")
        cfg = MetaConfig(population=self.population, generations=self.generations,
                         subset_size=self.subset_size, hidden_width=self.hidden_width,
                         seed=self.random_state, es=self.es, jobs=self.jobs)
        result = run_meta_training(X, cfg)
        self.basis_ = result.basis
        self.genome_ = result.genome
        self.history_ = result.history
        self.status_ = result.status
        return self

    def transform(self, X):
        from .lepinn import eval_features
        check_is_fitted(self, "basis_")
        X = check_array(X)
        if X.shape[1] != 2:
            raise ValueError("X must have two columns (r_hat, t_hat)")
        return eval_features(self.basis_, X[:, 0], X[:, 1], derivatives=False)

    def score(self, X, y=None):
        """Negative mean relative L2 error on the test tasks of TaskSet ``X``."""
        check_is_fitted(self, "basis_")
        return -float(np.nanmean(task_errors(self.basis_, X.test)))
