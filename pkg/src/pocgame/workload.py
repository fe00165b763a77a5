"""Reproducible task/provider instances with normalized random data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_RESOURCES = 2
SPEED_LOW, SPEED_HIGH = 0.25, 1.0

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Task:
    id: int
    arrival: float
    demand: tuple[float, ...]


@dataclass(frozen=True)
class Provider:
    id: int
    speed: tuple[float, ...]


@dataclass(frozen=True)
class Instance:
    tasks: tuple[Task, ...]
    providers: tuple[Provider, ...]

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_providers(self) -> int:
        return len(self.providers)

    def arrivals(self) -> np.ndarray:
        return np.array([t.arrival for t in self.tasks], dtype=float)

    def demands(self) -> np.ndarray:
        return np.array([t.demand for t in self.tasks], dtype=float).reshape(self.n_tasks, -1)

    def speeds(self) -> np.ndarray:
        return np.array([p.speed for p in self.providers], dtype=float)

    def to_dict(self) -> dict:
        return {
            "tasks": [{"id": t.id, "arrival": t.arrival, "demand": list(t.demand)} for t in self.tasks],
            "providers": [{"id": p.id, "speed": list(p.speed)} for p in self.providers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        tasks = tuple(Task(int(t["id"]), float(t["arrival"]), tuple(map(float, t["demand"]))) for t in d["tasks"])
        providers = tuple(Provider(int(p["id"]), tuple(map(float, p["speed"]))) for p in d["providers"])
        return make_instance(tasks, providers)


def make_instance(tasks, providers) -> Instance:
    """Build an Instance, checking the ordering and range invariants."""
    tasks = tuple(tasks)
    providers = tuple(providers)
    if not providers:
        raise ValueError("an instance needs at least one provider")
    width = len(providers[0].speed)
    for i, p in enumerate(providers):
        if p.id != i:
            raise ValueError(f"provider ids must be 0..m-1, got {p.id} at position {i}")
        if len(p.speed) != width or any(s <= 0 for s in p.speed):
            raise ValueError(f"provider {p.id}: speeds must be {width} positive rates")
    if sorted(t.id for t in tasks) != list(range(len(tasks))):
        raise ValueError("task ids must be a permutation of 0..n-1")
    for t in tasks:
        if t.arrival < 0:
            raise ValueError(f"task {t.id}: negative arrival")
        if len(t.demand) != width:
            raise ValueError(f"task {t.id}: demand must have {width} components")
    keys = [(t.arrival, t.id) for t in tasks]
    if keys != sorted(keys):
        raise ValueError("tasks must be sorted by (arrival, id)")
    return Instance(tasks, providers)


def derive_seed(seed: int, index: int) -> int:
    """Stable 64-bit mix of (seed, index), splitmix64 finalizer."""
    z = (seed * 0x9E3779B97F4A7C15 + (index + 1) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def generate_instance(n_tasks: int, n_providers: int = 3, rng_seed: int = 0,
                      n_resources: int = N_RESOURCES) -> Instance:
    if n_providers < 1:
        raise ValueError("n_providers must be >= 1")
    if n_tasks < 0:
        raise ValueError("n_tasks must be >= 0")
    rng = np.random.default_rng(rng_seed)
    arrivals = rng.uniform(0.0, 1.0, n_tasks)
    demands = rng.uniform(0.0, 1.0, (n_tasks, n_resources))
    speeds = rng.uniform(SPEED_LOW, SPEED_HIGH, (n_providers, n_resources))
    # relabel ids after sorting so ids follow (arrival, id) order
    order = np.argsort(arrivals, kind="stable")
    tasks = [Task(i, float(arrivals[j]), tuple(float(v) for v in demands[j])) for i, j in enumerate(order)]
    providers = [Provider(p, tuple(float(v) for v in speeds[p])) for p in range(n_providers)]
    return make_instance(tasks, providers)


def generate_dataset(n_samples: int, n_tasks: int, n_providers: int = 3,
                     rng_seed: int = 0) -> list[Instance]:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return [generate_instance(n_tasks, n_providers, derive_seed(rng_seed, k)) for k in range(n_samples)]
