import math

import numpy as np
import pytest
from scipy import stats

from spminv import meta
from spminv.lepinn import CollocationSet, ConditioningError, FeatureBasis
from spminv.meta import (GENOME_SIZE, PENALTY, ConfigError, DistributionGenome, MetaConfig, TaskCounts,
                         TaskRanges, TaskSet, evaluate_genome, run_meta_training, sample_tasks,
                         subset_indices, task_errors)
from spminv.params import ElectrodeKind
from spminv.reference import SolverGrid

TINY_GRID = SolverGrid(n_r=64, substeps=2)
TINY_COUNTS = TaskCounts(train_positive=6, train_negative=4, test_positive=2, test_negative=1)


@pytest.fixture(scope="module")
def tiny_tasks():
    return sample_tasks(counts=TINY_COUNTS, seed=11, grid=TINY_GRID)


def test_default_counts_and_disjoint_split():
    ts = sample_tasks(seed=0, with_labels=False)
    assert ts.counts() == {"train_positive": 60, "train_negative": 40,
                           "test_positive": 40, "test_negative": 10}
    assert not {t.name for t in ts.train} & {t.name for t in ts.test}


def test_sampled_diffusivities_within_ranges_and_log_uniform():
    counts = TaskCounts(train_positive=2000, train_negative=1, test_positive=1, test_negative=1)
    ts = sample_tasks(counts=counts, seed=5, with_labels=False)
    pos = [t for t in ts.train if t.task.kind is ElectrodeKind.POSITIVE]
    d = np.array([t.task.params.diffusion_coefficient for t in pos])
    g = np.array([t.task.params.geometric_coefficient for t in pos])
    assert d.min() >= 3.9e-15 and d.max() <= 3.9e-13
    assert g.min() >= 1.01 and g.max() <= 4.03
    observed, _ = np.histogram(np.log10(d), bins=10, range=np.log10([3.9e-15, 3.9e-13]))
    assert stats.chisquare(observed).pvalue > 0.01


def test_same_seed_gives_identical_files(tmp_path):
    counts = TaskCounts(1, 1, 1, 1)
    a = sample_tasks(counts=counts, seed=3, grid=TINY_GRID).save(tmp_path / "a")
    b = sample_tasks(counts=counts, seed=3, grid=TINY_GRID).save(tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_inverted_range_is_config_error():
    with pytest.raises(ConfigError):
        TaskRanges(positive_diffusion=(1e-13, 1e-15))
    with pytest.raises(ConfigError):
        TaskCounts(train_positive=0)


def test_taskset_round_trip(tmp_path, tiny_tasks):
    tiny_tasks.save(tmp_path)
    back = TaskSet.load(tmp_path)
    assert back.seed == tiny_tasks.seed
    original = {t.name: t for t in tiny_tasks.train + tiny_tasks.test}
    assert sorted(t.name for t in back.train) == sorted(t.name for t in tiny_tasks.train)
    for a in back.train + back.test:
        b = original[a.name]
        assert a.alpha == b.alpha and a.beta == b.beta
        assert np.array_equal(a.labels, b.labels)


def test_genome_vector_round_trip_and_determinism():
    x = np.random.default_rng(0).normal(size=GENOME_SIZE)
    g = DistributionGenome.from_vector(x, seed=4)
    assert np.array_equal(g.to_vector(), x)
    b1, b2 = g.materialize(30), g.materialize(30)
    for name in ("r_weights", "t_weights", "biases"):
        assert np.array_equal(getattr(b1, name), getattr(b2, name))
    assert b1.block_sizes == (10, 10, 10)
    assert meta.block_sizes(128) == (43, 43, 42)
    with pytest.raises(ValueError):
        DistributionGenome.from_vector(x[:-1])


def test_genome_block_statistics():
    theta = np.array([[0.5, np.log(2.0), -1.0, np.log(0.5), 2.0, np.log(3.0)]] * 3)
    basis = DistributionGenome(theta, np.log([1e-6, 1, 10, 10])).materialize(30_000)
    for _, sl in basis.blocks():
        assert basis.r_weights[sl].mean() == pytest.approx(0.5, abs=0.05)
        assert basis.r_weights[sl].std() == pytest.approx(2.0, rel=0.03)
        assert basis.t_weights[sl].std() == pytest.approx(0.5, rel=0.03)
        assert basis.biases[sl].mean() == pytest.approx(2.0, abs=0.08)


def test_lambdas_decode_from_logs():
    g = DistributionGenome(np.zeros((3, 6)), [-np.inf, 0.0, np.log(5.0), np.log(7.0)])
    lam = g.lambdas()
    assert lam.pi == 0.0
    assert lam.ic == pytest.approx(5.0) and lam.bc == pytest.approx(7.0)


def test_fitness_bookkeeping(tiny_tasks):
    g = DistributionGenome.default()
    colloc = CollocationSet.tensor()
    one = evaluate_genome(g, tiny_tasks.train[:1], n_hidden=60, colloc=colloc, tau_mse=0.0)
    assert one.fitness == pytest.approx(0.1 * one.lse[0], rel=1e-15)
    rec = evaluate_genome(g, tiny_tasks.train, n_hidden=60, colloc=colloc)
    manual = float(np.sum(0.1 * rec.lse + 1.0 * rec.mse))
    assert abs(rec.fitness - manual) <= 1e-10 * manual
    again = evaluate_genome(g, tiny_tasks.train, n_hidden=60, colloc=colloc)
    assert again.fitness == rec.fitness
    assert np.array_equal(again.lse, rec.lse)


def test_conditioning_failure_is_penalized(tiny_tasks, monkeypatch):
    def boom(self, alpha, beta):
        raise ConditioningError("forced")
    monkeypatch.setattr(meta.PhysicsSolver, "weights", boom)
    rec = evaluate_genome(DistributionGenome.default(), tiny_tasks.train[:3], n_hidden=30)
    assert rec.failed.all()
    assert rec.fitness == 3 * PENALTY


def test_degenerate_genome_is_worse_than_trained(tiny_tasks, basis):
    flat = DistributionGenome(np.tile([0.0, -np.inf], (3, 3)), np.log([1e-6, 1.0, 10.0, 10.0]))
    trained = DistributionGenome.from_vector(basis.provenance["genome"], basis.provenance["genome_seed"])
    colloc = CollocationSet.tensor()
    f_flat = evaluate_genome(flat, tiny_tasks.train, basis.n_hidden, colloc).fitness
    f_trained = evaluate_genome(trained, tiny_tasks.train, basis.n_hidden, colloc).fitness
    assert f_flat > f_trained


def test_subsets_without_replacement_cover_tasks():
    n, size, gens = 100, 16, 300
    window = math.ceil(n / size) * 4
    touched = np.zeros((gens, n), dtype=bool)
    for g in range(gens):
        idx = subset_indices(n, size, 0, g)
        assert len(np.unique(idx)) == size
        touched[g, idx] = True
    # expected touches per task per window, and how often a task is missed
    assert touched.mean() * window >= 1.0
    missed = [(~touched[s:s + window].any(axis=0)).mean() for s in range(0, gens - window, window)]
    assert np.mean(missed) < 0.02


def test_meta_config_validation():
    with pytest.raises(ConfigError):
        MetaConfig(population=4)
    with pytest.raises(ConfigError):
        MetaConfig(generations=5)
    assert "jobs" not in MetaConfig().snapshot()


SMOKE = dict(population=8, generations=10, subset_size=4, hidden_width=30, collocation=(21, 17))


def test_meta_training_trace_and_determinism(tiny_tasks):
    r1 = run_meta_training(tiny_tasks, MetaConfig(**SMOKE, seed=2))
    r2 = run_meta_training(tiny_tasks, MetaConfig(**SMOKE, seed=2))
    best = [h.best for h in r1.history]
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert r1.best_fitness == best[-1]
    assert np.array_equal(r1.basis.r_weights, r2.basis.r_weights)
    assert r1.basis.lambdas == r2.basis.lambdas
    assert isinstance(r1.basis, FeatureBasis)
    assert np.all(np.isfinite(task_errors(r1.basis, tiny_tasks.test, CollocationSet.tensor(21, 17))))


def test_meta_training_independent_of_worker_count(tiny_tasks):
    r1 = run_meta_training(tiny_tasks, MetaConfig(**SMOKE, es="cmaes", jobs=1))
    r2 = run_meta_training(tiny_tasks, MetaConfig(**SMOKE, es="cmaes", jobs=2))
    assert np.array_equal(r1.genome.to_vector(), r2.genome.to_vector())


def test_patience_stops_with_warning_status(tiny_tasks):
    res = run_meta_training(tiny_tasks, MetaConfig(**dict(SMOKE, generations=40), patience=1))
    assert res.status == "stalled"
    assert len(res.history) < 40


def test_history_csv(tmp_path, tiny_tasks):
    res = run_meta_training(tiny_tasks, MetaConfig(**SMOKE))
    res.write_history(tmp_path / "h.csv")
    header = (tmp_path / "h.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["generation", "best", "mean", "median"]
