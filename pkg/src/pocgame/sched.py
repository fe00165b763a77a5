"""FIFO queue simulation on providers, the total-delay objective, and reference allocators."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .workload import Instance, Provider, Task

BRUTE_FORCE_LIMIT = 10**7


@dataclass(frozen=True)
class ScheduleResult:
    completion: np.ndarray
    delay: np.ndarray
    total_delay: float


def service_time(task: Task, provider: Provider) -> float:
    return float(sum(d / s for d, s in zip(task.demand, provider.speed)))


def service_matrix(instance: Instance) -> np.ndarray:
    """(n, m) matrix of service times of task i on provider p."""
    if instance.n_tasks == 0:
        return np.zeros((0, instance.n_providers))
    return (instance.demands()[:, None, :] / instance.speeds()[None, :, :]).sum(axis=-1)


def check_allocation(instance: Instance, allocation) -> np.ndarray:
    alloc = np.asarray(allocation, dtype=np.int64).reshape(-1)
    if alloc.shape[0] != instance.n_tasks:
        raise ValueError(f"allocation has {alloc.shape[0]} entries, instance has {instance.n_tasks} tasks")
    if alloc.size and (alloc.min() < 0 or alloc.max() >= instance.n_providers):
        raise ValueError(f"allocation refers to providers outside 0..{instance.n_providers - 1}")
    return alloc


def total_delay(completion, arrival) -> float:
    """Sum over tasks of max(0, C_i - a_i), accumulated in task order."""
    total = 0.0
    for c, a in zip(np.asarray(completion, dtype=float), np.asarray(arrival, dtype=float)):
        total += max(0.0, float(c - a))
    return total


def simulate_schedule(instance: Instance, allocation) -> ScheduleResult:
    alloc = check_allocation(instance, allocation)
    st = service_matrix(instance)
    free = np.zeros(instance.n_providers)
    completion = np.zeros(instance.n_tasks)
    for i, task in enumerate(instance.tasks):
        p = alloc[i]
        completion[i] = max(task.arrival, free[p]) + st[i, p]
        free[p] = completion[i]
    arrivals = instance.arrivals()
    delay = np.maximum(0.0, completion - arrivals)
    return ScheduleResult(completion, delay, total_delay(completion, arrivals))


def population_delays(instance: Instance, population: np.ndarray) -> np.ndarray:
    """Total delay for every row of a (P, n) allocation matrix; same arithmetic as simulate_schedule."""
    pop = np.asarray(population, dtype=np.int64)
    n_pop = pop.shape[0]
    st = service_matrix(instance)
    arrivals = instance.arrivals()
    free = np.zeros((n_pop, instance.n_providers))
    rows = np.arange(n_pop)
    totals = np.zeros(n_pop)
    for i in range(instance.n_tasks):
        p = pop[:, i]
        done = np.maximum(arrivals[i], free[rows, p]) + st[i, p]
        free[rows, p] = done
        totals += np.maximum(0.0, done - arrivals[i])
    return totals


def round_robin_allocation(instance: Instance) -> np.ndarray:
    return np.arange(instance.n_tasks, dtype=np.int64) % instance.n_providers


def random_allocation(instance: Instance, rng_seed) -> np.ndarray:
    rng = np.random.default_rng(rng_seed)
    return rng.integers(0, instance.n_providers, instance.n_tasks, dtype=np.int64)


def greedy_earliest_completion(instance: Instance) -> np.ndarray:
    st = service_matrix(instance)
    free = np.zeros(instance.n_providers)
    alloc = np.zeros(instance.n_tasks, dtype=np.int64)
    for i, task in enumerate(instance.tasks):
        finish = np.maximum(task.arrival, free) + st[i]
        p = int(np.argmin(finish))  # argmin returns the first minimum: lowest id wins ties
        alloc[i] = p
        free[p] = finish[p]
    return alloc


def brute_force_optimal(instance: Instance, chunk: int = 200_000) -> tuple[np.ndarray, float]:
    """Enumerate all m**n allocations; lexicographically smallest minimizer wins ties."""
    n, m = instance.n_tasks, instance.n_providers
    if m**n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"{m}^{n} allocations exceeds the enumeration limit of {BRUTE_FORCE_LIMIT}")
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    best_alloc, best = None, np.inf
    # itertools.product yields allocations in lexicographic order
    it = itertools.product(range(m), repeat=n)
    while True:
        block = np.array(list(itertools.islice(it, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        delays = population_delays(instance, block)
        j = int(np.argmin(delays))
        if delays[j] < best:
            best, best_alloc = float(delays[j]), block[j].copy()
    return best_alloc, best
