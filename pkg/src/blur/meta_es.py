"""Gradient-free meta-training of genomes with CMA-ES.

The optimizer follows the standard formulation: weighted recombination of
the best half, cumulative step-size adaptation and a rank-one plus rank-mu
covariance update.  It maximizes; internally it ranks by negated fitness.

Fitness functions are called as ``fitness_fn(x, seed=..., generation=...)``.
All candidates of one generation receive the same ``seed`` (common random
numbers) so that they are compared on identical data and synapse draws.
"""

from __future__ import annotations

import csv
import inspect
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError
from .genome import GenomeLayout, decode
from .inner_loop import UnrollConfig, arch_for_task, run_episode
from .network import Architecture

log = logging.getLogger(__name__)

UNROLL_INCREMENT = 5


@dataclass(frozen=True)
class EsConfig:
    population: Optional[int] = None         # default 4 + floor(3 ln n)
    parents: Optional[int] = None            # default population // 2
    sigma0: float = 0.1
    generations: int = 100
    unroll: UnrollConfig = field(default_factory=UnrollConfig)
    fitness: str = "train"                   # "train" or "eval"
    curriculum_increment: int = UNROLL_INCREMENT
    curriculum_period: float = math.inf
    confirm_best: bool = True
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.population is not None and self.population < 4:
            raise ConfigurationError("population must be >= 4")
        if self.parents is not None and not 1 <= self.parents <= (self.population or 10**9):
            raise ConfigurationError("parents must lie in [1, population]")
        if not self.sigma0 > 0:
            raise ConfigurationError("sigma0 must be positive")
        if self.fitness not in ("train", "eval"):
            raise ConfigurationError(f"unknown fitness kind {self.fitness!r}")
        if self.curriculum_period <= 0:
            raise ConfigurationError("curriculum_period must be positive")


def curriculum(cfg: EsConfig, generation: int) -> UnrollConfig:
    """Unroll length grows by ``curriculum_increment`` every ``curriculum_period`` generations."""
    if math.isinf(cfg.curriculum_period):
        return cfg.unroll
    stage = int(generation // cfg.curriculum_period)
    return replace(cfg.unroll, unroll_steps=cfg.unroll.unroll_steps + cfg.curriculum_increment * stage)


@dataclass
class EsHistory:
    generation: List[int] = field(default_factory=list)
    best: List[float] = field(default_factory=list)        # best-ever (confirmed) fitness
    mean: List[float] = field(default_factory=list)        # population mean fitness
    generation_best: List[float] = field(default_factory=list)
    sigma: List[float] = field(default_factory=list)
    evaluations: List[int] = field(default_factory=list)   # cumulative fitness calls
    unroll_steps: List[int] = field(default_factory=list)
    snapshots: List[str] = field(default_factory=list)

    CSV_HEADER = ("generation", "best", "mean", "sigma", "generation_best", "evaluations",
                  "unroll_steps")

    def rows(self):
        for i in range(len(self.generation)):
            yield (self.generation[i], self.best[i], self.mean[i], self.sigma[i],
                   self.generation_best[i], self.evaluations[i], self.unroll_steps[i])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_HEADER)
            for row in self.rows():
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), repr(row[4]),
                            row[5], row[6]])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class CMAES:
    """Covariance matrix adaptation for minimization (ask/tell interface)."""

    def __init__(self, x0, sigma0, population=None, parents=None, seed=0):
        self.mean = np.array(x0, dtype=np.float64)
        n = self.dim = self.mean.size
        if n < 1:
            raise ConfigurationError("CMA-ES needs at least one dimension")
        self.sigma = float(sigma0)
        self.lam = int(population) if population else 4 + int(3 * math.log(n))
        self.mu = int(parents) if parents else self.lam // 2
        w = math.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / np.sum(self.weights ** 2)

        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1,
                       2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.eye(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.generation = 0
        self.rng = np.random.default_rng(seed)
        self._pending = None

    def ask(self):
        z = self.rng.standard_normal((self.lam, self.dim))
        y = (z * self.D) @ self.B.T
        x = self.mean + self.sigma * y
        self._pending = x
        return x.copy()

    def tell(self, solutions, values):
        """Update from ``values`` (lower is better) of the last ``ask``."""
        x = np.asarray(solutions, dtype=np.float64)
        f = np.asarray(values, dtype=np.float64)
        n = self.dim
        order = np.argsort(f, kind="stable")
        sel = x[order[: self.mu]]
        old = self.mean
        self.mean = self.weights @ sel
        step = (self.mean - old) / self.sigma

        inv_sqrt_c = (self.B / self.D) @ self.B.T
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * (inv_sqrt_c @ step)
        self.generation += 1
        ps_norm = np.linalg.norm(self.ps)
        hsig = ps_norm / math.sqrt(1 - (1 - self.cs) ** (2 * self.generation)) / self.chi_n \
            < 1.4 + 2 / (n + 1)
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * step

        art = (sel - old) / self.sigma
        rank_mu = (art.T * self.weights) @ art
        self.C = ((1 - self.c1 - self.cmu) * self.C
                  + self.c1 * (np.outer(self.pc, self.pc) + (1 - hsig) * self.cc * (2 - self.cc) * self.C)
                  + self.cmu * rank_mu)
        self.sigma *= math.exp((self.cs / self.damps) * (ps_norm / self.chi_n - 1))
        self._decompose()

    def _decompose(self):
        self.C = np.triu(self.C) + np.triu(self.C, 1).T
        evals, evecs = np.linalg.eigh(self.C)
        if not np.all(np.isfinite(evals)) or evals.min() <= 0:
            raise ValidationError("covariance matrix lost positive definiteness")
        self.D = np.sqrt(evals)
        self.B = evecs
        if not self.sigma > 0 or not math.isfinite(self.sigma):
            raise ValidationError(f"step size left the positive reals: {self.sigma}")

    # -- persistence --------------------------------------------------------

    def state_dict(self):
        return {
            "mean": self.mean.tolist(), "sigma": self.sigma, "lam": self.lam, "mu": self.mu,
            "pc": self.pc.tolist(), "ps": self.ps.tolist(), "C": self.C.tolist(),
            "generation": self.generation,
            "rng": self.rng.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state):
        es = cls(state["mean"], state["sigma"], state["lam"], state["mu"])
        es.pc = np.array(state["pc"])
        es.ps = np.array(state["ps"])
        es.C = np.array(state["C"])
        es.generation = int(state["generation"])
        es.rng.bit_generator.state = state["rng"]
        es._decompose()
        return es


def _generation_seed(base, generation, salt=0):
    return int(np.random.SeedSequence([int(base), int(generation), int(salt)]).generate_state(1)[0])


def _evaluate(fitness_fn, xs, seed, generation, threads):
    def call(x):
        return float(fitness_fn(x, seed=seed, generation=generation))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(call, xs))  # map keeps candidate order
    return [call(x) for x in xs]


def cma_es_optimize(fitness_fn: Callable, x0, cfg: EsConfig, decode_fn: Optional[Callable] = None,
                    callback: Optional[Callable] = None, resume: Optional[dict] = None):
    """Maximize ``fitness_fn`` from ``x0``.

    Returns ``(best, history)`` where ``best`` is the best-ever vector (or
    ``decode_fn(best)`` when given).  With ``cfg.confirm_best`` a candidate
    that would beat the best-ever is first re-evaluated on a fresh seed and
    scored by the mean of both evaluations, which keeps a single lucky data
    draw from locking in.  ``callback(generation, es, history, best_x)`` runs
    after every generation; returning True stops the search.
    """
    if resume is not None:
        es = CMAES.from_state(resume["es"])
        history = EsHistory.from_dict(resume["history"])
        best_x = np.array(resume["best_x"])
        best_f = float(resume["best_f"])
        evaluations = int(resume["evaluations"])
    else:
        es = CMAES(x0, cfg.sigma0, cfg.population, cfg.parents, cfg.seed)
        history = EsHistory()
        best_x, best_f, evaluations = np.array(x0, dtype=np.float64), -math.inf, 0

    for generation in range(es.generation, cfg.generations):
        xs = es.ask()
        seed = _generation_seed(cfg.seed, generation)
        fits = np.array(_evaluate(fitness_fn, xs, seed, generation, cfg.threads))
        evaluations += len(xs)
        bad = ~np.isfinite(fits)
        if bad.all():
            raise ValidationError("every candidate returned a non-finite fitness")
        if bad.any():
            log.warning("generation %d: %d non-finite fitness values clamped", generation, bad.sum())
            fits[bad] = fits[~bad].min()
        es.tell(xs, -fits)

        top = int(np.argmax(fits))
        candidate = fits[top]
        if candidate > best_f and cfg.confirm_best:
            fresh = _generation_seed(cfg.seed, generation, salt=1)
            again = _evaluate(fitness_fn, [xs[top]], fresh, generation, 1)[0]
            evaluations += 1
            if math.isfinite(again):
                candidate = 0.5 * (candidate + again)
        if candidate > best_f:
            best_f, best_x = float(candidate), xs[top].copy()

        history.generation.append(generation)
        history.best.append(best_f)
        history.mean.append(float(fits.mean()))
        history.generation_best.append(float(fits[top]))
        history.sigma.append(es.sigma)
        history.evaluations.append(evaluations)
        unroll = getattr(fitness_fn, "unroll_steps", None)
        history.unroll_steps.append(int(unroll(generation)) if callable(unroll) else 0)
        log.info("gen %d best %.4f mean %.4f sigma %.4g", generation, best_f, fits.mean(), es.sigma)
        if callback is not None:
            state = {"es": es.state_dict(), "history": history.to_dict(), "best_x": best_x.tolist(),
                     "best_f": best_f, "evaluations": evaluations}
            if callback(generation, state, history, best_x):
                break
    best = decode_fn(best_x) if decode_fn is not None else best_x
    return best, history


def accuracy_fitness(tasks, arch: Architecture, cfg: EsConfig, layout: GenomeLayout,
                     dtype=np.float64, input_scale: float = 1.0):
    """Fitness over flat genome vectors: mean episode accuracy over ``tasks``.

    The architecture's first and last layer are adapted to every task.
    Invalid genomes (e.g. non-positive normalization deviation) and diverging
    episodes score chance level.
    """
    tasks = list(tasks)
    if not tasks:
        raise ConfigurationError("accuracy_fitness needs at least one task")
    archs = [arch_for_task(arch, t) for t in tasks]

    def fitness_fn(x, seed=0, generation=0):
        unroll = curriculum(cfg, generation).with_seed(seed)
        try:
            genome = decode(x, layout)
        except (ValidationError, ValueError):
            return float(np.mean([1.0 / t.num_classes for t in tasks]))
        scores = []
        for task, a in zip(tasks, archs):
            _, report = run_episode(genome, a, task, unroll, dtype=dtype, input_scale=input_scale)
            scores.append(report.fitness(cfg.fitness))
        return float(np.mean(scores))

    fitness_fn.unroll_steps = lambda generation: curriculum(cfg, generation).unroll_steps
    return fitness_fn


def save_es_state(path, state):
    Path(path).write_text(json.dumps(state) + "\n")


def load_es_state(path):
    return json.loads(Path(path).read_text())
