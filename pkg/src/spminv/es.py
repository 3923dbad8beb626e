"""Evolution strategies with a shared ask/tell interface.

Two strategies are provided: full-covariance CMA-ES (rank-one plus rank-mu
updates, cumulative step-size adaptation) and a separable natural evolution
strategy with a diagonal Gaussian search distribution.  Both minimize.
"""
from __future__ import annotations

import math

import numpy as np


class EvolutionStrategy:
    """Minimal interface: ``ask`` a population, ``tell`` its fitness."""

    name = "base"

    def __init__(self, x0, sigma0, popsize=None, seed=None):
        self.mean = np.array(x0, dtype=float)
        if self.mean.ndim != 1 or self.mean.size == 0:
            raise ValueError("x0 must be a non-empty vector")
        self.dim = self.mean.size
        scale = np.broadcast_to(np.asarray(sigma0, dtype=float), (self.dim,)).copy()
        if np.any(scale <= 0):
            raise ValueError("initial step sizes must be positive")
        self._scale0 = scale
        self.popsize = int(popsize or 4 + math.floor(3 * math.log(self.dim)))
        if self.popsize < 2:
            raise ValueError("popsize must be >= 2")
        self.rng = np.random.default_rng(seed)
        self.generation = 0
        self.best_x = self.mean.copy()
        self.best_f = np.inf
        self._pending = None

    def ask(self) -> np.ndarray:
        raise NotImplementedError

    def tell(self, X, fitness) -> None:
        X = np.asarray(X, dtype=float)
        f = np.asarray(fitness, dtype=float)
        if X.shape != (self.popsize, self.dim) or f.shape != (self.popsize,):
            raise ValueError("tell() expects the population returned by ask()")
        f = np.where(np.isnan(f), np.inf, f)
        i = int(np.argmin(f))
        if f[i] < self.best_f:
            self.best_f = float(f[i])
            self.best_x = X[i].copy()
        self._update(X, f)
        self.generation += 1

    def _update(self, X, f):
        raise NotImplementedError

    def optimize(self, func, generations: int):
        """Run ``generations`` ask/tell cycles on ``func``; returns best (x, f)."""
        for _ in range(generations):
            X = self.ask()
            self.tell(X, [func(x) for x in X])
        return self.best_x, self.best_f


class CMAES(EvolutionStrategy):
    """Covariance matrix adaptation evolution strategy.

    ``sigma0`` may be a vector; the run then starts from sigma=1 with a
    diagonal covariance holding the squared per-coordinate step sizes.
    """

    name = "cmaes"

    def __init__(self, x0, sigma0, popsize=None, seed=None):
        super().__init__(x0, sigma0, popsize, seed)
        n, lam = self.dim, self.popsize
        mu = lam // 2
        w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mu = mu
        self.mueff = 1.0 / np.sum(self.weights ** 2)
        me = self.mueff
        self.cc = (4 + me / n) / (n + 4 + 2 * me / n)
        self.cs = (me + 2) / (n + me + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + me)
        self.cmu = min(1 - self.c1, 2 * (me - 2 + 1 / me) / ((n + 2) ** 2 + me))
        self.damps = 1 + 2 * max(0.0, math.sqrt((me - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self.sigma = 1.0
        self.C = np.diag(self._scale0 ** 2)
        self.B = np.eye(n)
        self.D = self._scale0.copy()
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)

    def ask(self):
        z = self.rng.standard_normal((self.popsize, self.dim))
        return self.mean + self.sigma * (z * self.D) @ self.B.T

    def _update(self, X, f):
        n = self.dim
        order = np.argsort(f, kind="stable")[: self.mu]
        y = (X[order] - self.mean) / self.sigma
        yw = self.weights @ y
        self.mean = self.mean + self.sigma * yw

        inv_sqrt = self.B @ np.diag(1.0 / self.D) @ self.B.T
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * (inv_sqrt @ yw)
        norm_ps = np.linalg.norm(self.ps)
        gen = self.generation + 1
        hsig = norm_ps / math.sqrt(1 - (1 - self.cs) ** (2 * gen)) / self.chi_n < 1.4 + 2 / (n + 1)
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * yw

        rank_mu = (y.T * self.weights) @ y
        self.C = ((1 - self.c1 - self.cmu) * self.C
                  + self.c1 * (np.outer(self.pc, self.pc) + (1 - hsig) * self.cc * (2 - self.cc) * self.C)
                  + self.cmu * rank_mu)
        self.sigma *= math.exp((self.cs / self.damps) * (norm_ps / self.chi_n - 1))

        self.C = np.triu(self.C) + np.triu(self.C, 1).T
        evals, self.B = np.linalg.eigh(self.C)
        self.D = np.sqrt(np.maximum(evals, 1e-300))


class SeparableNES(EvolutionStrategy):
    """Separable natural evolution strategy (diagonal Gaussian, rank utilities)."""

    name = "diag-nes"

    def __init__(self, x0, sigma0, popsize=None, seed=None, lr_mean=1.0, lr_sigma=None):
        super().__init__(x0, sigma0, popsize, seed)
        self.sigma = self._scale0.copy()
        self.lr_mean = lr_mean
        self.lr_sigma = lr_sigma or (3 + math.log(self.dim)) / (5 * math.sqrt(self.dim))
        lam = self.popsize
        u = np.maximum(0.0, math.log(lam / 2 + 1) - np.log(np.arange(1, lam + 1)))
        self.utilities = u / u.sum() - 1.0 / lam
        self._z = None

    def ask(self):
        self._z = self.rng.standard_normal((self.popsize, self.dim))
        return self.mean + self.sigma * self._z

    def _update(self, X, f):
        s = (X - self.mean) / self.sigma
        order = np.argsort(f, kind="stable")
        u = np.empty(self.popsize)
        u[order] = self.utilities
        grad_mu = u @ s
        grad_sigma = u @ (s * s - 1.0)
        self.mean = self.mean + self.lr_mean * self.sigma * grad_mu
        self.sigma = self.sigma * np.exp(0.5 * self.lr_sigma * grad_sigma)


STRATEGIES = {CMAES.name: CMAES, SeparableNES.name: SeparableNES}


def make_strategy(name: str, x0, sigma0, popsize=None, seed=None) -> EvolutionStrategy:
    try:
        cls = STRATEGIES[name]
    except KeyError:
        raise ValueError(f"unknown evolution strategy {name!r}; choose from {sorted(STRATEGIES)}") from None
    return cls(x0, sigma0, popsize=popsize, seed=seed)
