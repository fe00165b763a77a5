"""Genetic-algorithm meta-strategy: minimise total delay and emit labelled samples."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sched import check_allocation, population_delays, simulate_schedule
from .workload import Instance, derive_seed


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class GAParams:
    population_size: int = 50
    generations: int = 200
    crossover_prob: float = 0.8
    mutation_prob_per_gene: float = 0.05
    tournament_size: int = 3
    elitism: int = 1
    stall_limit: int = 50

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if not 1 <= self.tournament_size <= self.population_size:
            raise ValueError("tournament_size must be in [1, population_size]")
        for name in ("crossover_prob", "mutation_prob_per_gene"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0 <= self.elitism < self.population_size:
            raise ValueError("elitism must be in [0, population_size)")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if self.stall_limit < 1:
            raise ValueError("stall_limit must be >= 1")


@dataclass
class GAResult:
    best: np.ndarray
    best_fitness: float
    history: list[float] = field(default_factory=list)


@dataclass
class TrainingSample:
    instance: Instance
    label: np.ndarray | None
    node_features: np.ndarray
    provider_sequence: np.ndarray


def make_sample(instance: Instance, label=None) -> TrainingSample:
    """Package model inputs for an instance; ``label`` may be None at inference time."""
    feats = np.hstack([instance.demands(), instance.arrivals()[:, None]])
    if label is not None:
        label = check_allocation(instance, label)
    return TrainingSample(instance, label, feats, instance.speeds())


# -- operators -----------------------------------------------------------------

def tournament_select(population, fitnesses, k: int, rng_seed) -> np.ndarray:
    if len(population) == 0:
        raise ValueError("empty population")
    if len(population) != len(fitnesses):
        raise ValueError("population and fitnesses differ in length")
    if k < 1:
        raise ValueError("tournament size must be >= 1")
    idx = _rng(rng_seed).integers(0, len(population), k)
    fit = np.asarray(fitnesses, dtype=float)[idx]
    winner = idx[fit == fit.min()].min()  # lowest index among tied minima
    return np.asarray(population[winner])


def one_point_crossover(a, b, cut: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("parents differ in length")
    return np.concatenate([a[:cut], b[cut:]]), np.concatenate([b[:cut], a[cut:]])


def crossover(a, b, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """One-point crossover at a uniform cut in [1, n-1]; length-1 parents pass through."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("parents differ in length")
    n = a.shape[0]
    if n <= 1:
        return a.copy(), b.copy()
    return one_point_crossover(a, b, int(_rng(rng_seed).integers(1, n)))


def mutate(a, rate: float, m: int, rng_seed) -> np.ndarray:
    if not 0.0 <= rate <= 1.0:
        raise ValueError("mutation rate must be in [0, 1]")
    rng = _rng(rng_seed)
    a = np.asarray(a, dtype=np.int64)
    hit = rng.random(a.shape[0]) < rate
    draws = rng.integers(0, m, a.shape[0])
    return np.where(hit, draws, a)


def _next_generation(pop: np.ndarray, fit: np.ndarray, params: GAParams, m: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Batched selection, crossover and mutation; same operators as above, one draw block each."""
    size, n = pop.shape
    # tournament: lowest fitness among k uniform draws, ties to the lowest index
    n_parents = size + size % 2
    idx = rng.integers(0, size, (n_parents, params.tournament_size))
    f = fit[idx]
    tied = f == f.min(axis=1, keepdims=True)
    parents = pop[np.where(tied, idx, size).min(axis=1)]
    a, b = parents[0::2], parents[1::2]
    pairs = a.shape[0]
    do_cross = rng.random(pairs) < params.crossover_prob
    if n > 1:
        cut = rng.integers(1, n, pairs)
        head = (np.arange(n)[None, :] < cut[:, None]) | ~do_cross[:, None]
        a, b = np.where(head, a, b), np.where(head, b, a)
    children = np.empty_like(parents)
    children[0::2], children[1::2] = a, b
    hit = rng.random((size, n)) < params.mutation_prob_per_gene
    draws = rng.integers(0, m, (size, n))
    children = np.where(hit, draws, children[:size])
    # duplicate elimination: repeated children are replaced by fresh uniform individuals
    _, first = np.unique(children, axis=0, return_index=True)
    dup = np.ones(size, dtype=bool)
    dup[first] = False
    fresh = rng.integers(0, m, (size, n))
    children[dup] = fresh[dup]
    return children


# -- main loop -----------------------------------------------------------------

def evolve(instance: Instance, params: GAParams = GAParams(), rng_seed=0) -> GAResult:
    """Elitist generational GA over allocation vectors.

    Each generation: tournament-select parents, one-point crossover with
    probability ``crossover_prob``, per-gene mutation, replace children that
    repeat an earlier child by uniform random individuals, then keep the
    ``elitism`` best of the previous generation in place of the worst
    children. Stops after ``generations`` or ``stall_limit`` generations with
    no improvement of the best fitness.
    """
    n, m = instance.n_tasks, instance.n_providers
    if n < 1:
        raise ValueError("evolve needs at least one task")
    rng = _rng(rng_seed)
    size = params.population_size
    pop = rng.integers(0, m, (size, n), dtype=np.int64)
    fit = population_delays(instance, pop)
    best_i = int(np.argmin(fit))
    best, best_fit = pop[best_i].copy(), float(fit[best_i])
    history = [best_fit]
    stall = 0
    for _ in range(params.generations):
        children = _next_generation(pop, fit, params, m, rng)
        child_fit = population_delays(instance, children)
        if params.elitism:
            elite = np.argsort(fit, kind="stable")[:params.elitism]
            worst = np.argsort(child_fit, kind="stable")[::-1][:params.elitism]
            children[worst] = pop[elite]
            child_fit[worst] = fit[elite]
        pop, fit = children, child_fit
        gen_best = int(np.argmin(fit))
        if fit[gen_best] < best_fit:
            best, best_fit = pop[gen_best].copy(), float(fit[gen_best])
            stall = 0
        else:
            stall += 1
        history.append(best_fit)
        if stall >= params.stall_limit:
            break
    # report the fitness through the reference simulator so both paths agree exactly
    return GAResult(best, simulate_schedule(instance, best).total_delay, history)


def build_training_set(instances: list[Instance], params: GAParams = GAParams(),
                       rng_seed: int = 0) -> list[TrainingSample]:
    if not instances:
        raise ValueError("no instances")
    return [make_sample(inst, evolve(inst, params, derive_seed(rng_seed, k)).best)
            for k, inst in enumerate(instances)]
