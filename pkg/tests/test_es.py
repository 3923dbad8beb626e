import numpy as np
import pytest

from spminv.es import CMAES, SeparableNES, make_strategy


def sphere(x):
    return float(x @ x)


def rosenbrock(x):
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


@pytest.mark.parametrize("cls", [CMAES, SeparableNES])
def test_strategies_minimize_sphere(cls):
    es = cls(np.full(4, 3.0), 1.0, popsize=20, seed=1)
    x, f = es.optimize(sphere, 150)
    assert f < 1e-8
    assert np.allclose(x, 0.0, atol=1e-4)


@pytest.mark.parametrize("name", ["cmaes", "diag-nes"])
def test_same_seed_same_trajectory(name):
    runs = []
    for _ in range(2):
        es = make_strategy(name, np.ones(5), 0.5, popsize=10, seed=[7, 1])
        runs.append(es.optimize(rosenbrock, 30))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_best_so_far_never_increases():
    es = CMAES(np.full(4, -1.0), 0.3, popsize=12, seed=0)
    trace = []
    for _ in range(40):
        X = es.ask()
        es.tell(X, [rosenbrock(x) for x in X])
        trace.append(es.best_f)
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_per_coordinate_initial_scale():
    es = CMAES(np.zeros(3), np.array([1.0, 10.0, 100.0]), popsize=2000, seed=0)
    spread = es.ask().std(axis=0)
    assert np.allclose(spread / [1.0, 10.0, 100.0], 1.0, rtol=0.08)


def test_nan_fitness_ranks_last():
    es = CMAES(np.zeros(2), 1.0, popsize=6, seed=3)
    X = es.ask()
    f = np.array([sphere(x) for x in X])
    f[0] = np.nan
    es.tell(X, f)
    assert np.isfinite(es.best_f)


def test_interface_errors():
    with pytest.raises(ValueError):
        CMAES(np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        CMAES(np.zeros((2, 2)), 1.0)
    es = CMAES(np.zeros(2), 1.0, popsize=6, seed=0)
    with pytest.raises(ValueError):
        es.tell(np.zeros((5, 2)), np.zeros(5))
    with pytest.raises(ValueError):
        make_strategy("pso", np.zeros(2), 1.0)
