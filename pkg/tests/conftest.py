import heapq

import numpy as np
import pytest

from pocgame.workload import Provider, Task, make_instance


def build(arrivals, demands, speeds):
    tasks = [Task(i, float(a), tuple(map(float, d))) for i, (a, d) in enumerate(zip(arrivals, demands))]
    providers = [Provider(p, tuple(map(float, s))) for p, s in enumerate(speeds)]
    return make_instance(tasks, providers)


def event_replay(instance, allocation):
    """Discrete-event replay with a heap of arrival/completion events and FIFO provider queues.

    Written independently of the scheduler: no free-time vector, only events.
    Returns the completion time of every task.
    """
    events = []
    seq = 0
    for i, t in enumerate(instance.tasks):
        heapq.heappush(events, (t.arrival, 1, seq, "arrive", i))
        seq += 1
    queues = {p.id: [] for p in instance.providers}
    busy = {p.id: False for p in instance.providers}
    completion = [None] * instance.n_tasks

    def start(p, now):
        nonlocal seq
        i = queues[p].pop(0)
        task, prov = instance.tasks[i], instance.providers[p]
        duration = 0.0
        for d, s in zip(task.demand, prov.speed):
            duration += d / s
        busy[p] = True
        heapq.heappush(events, (now + duration, 0, seq, "done", i))
        seq += 1

    while events:
        now, _, _, kind, i = heapq.heappop(events)
        p = int(allocation[i])
        if kind == "arrive":
            queues[p].append(i)
            if not busy[p]:
                start(p, now)
        else:
            completion[i] = now
            busy[p] = False
            if queues[p]:
                start(p, now)
    return completion


@pytest.fixture
def two_task():
    """a=(0,0), demands (1,1),(2,2); p0=p1=(1,1), p2=(0.5,0.5)."""
    return build([0, 0], [(1, 1), (2, 2)], [(1, 1), (1, 1), (0.5, 0.5)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
