"""Proof-of-contribution consensus rounds among simulated edge nodes."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Literal

import numpy as np

from . import nn_core as nn
from .distill import DistillHyper, distill, student_forward
from .ga import TrainingSample, make_sample
from .model import diversity_score, select_actions
from .sched import check_allocation, random_allocation, round_robin_allocation, simulate_schedule
from .workload import Instance, derive_seed, generate_instance

GENESIS_HASH = bytes(32)

Behavior = Literal["honest", "byzantine"]


@dataclass
class Block:
    height: int
    prev_hash: bytes
    proposer: int
    allocation: tuple[int, ...]
    contributions: tuple[float, ...]
    payload_hash: bytes
    accept_votes: frozenset[int] = frozenset()

    def payload(self) -> dict:
        return {"height": self.height, "prev_hash": self.prev_hash, "proposer": self.proposer,
                "allocation": self.allocation, "contributions": self.contributions}

    def to_record(self, total_delay: float | None = None) -> dict:
        rec = {
            "height": self.height,
            "proposer": self.proposer,
            "allocation": list(self.allocation),
            "contributions": list(self.contributions),
            "accept_votes": sorted(self.accept_votes),
            "prev_hash": self.prev_hash.hex(),
            "payload_hash": self.payload_hash.hex(),
        }
        if total_delay is not None:
            rec["total_delay"] = total_delay
        return rec


@dataclass
class NodeState:
    id: int
    behavior: Behavior
    student: nn.Params | None
    chain: list[Block] = field(default_factory=list)

    @property
    def honest(self) -> bool:
        return self.behavior == "honest"

    def tip_hash(self) -> bytes:
        return self.chain[-1].payload_hash if self.chain else GENESIS_HASH


@dataclass
class RoundOutcome:
    votes: dict[int, np.ndarray]
    consensus: np.ndarray
    contributions: np.ndarray
    proposer: int
    accepts: frozenset[int]
    committed: bool
    block: Block | None
    diversity: float


# -- scoring -------------------------------------------------------------------

def contribution_scores(instance: Instance, allocation) -> np.ndarray:
    """Per-provider delay saved against the round-robin baseline on the tasks it served."""
    alloc = check_allocation(instance, allocation)
    baseline = simulate_schedule(instance, round_robin_allocation(instance)).delay
    actual = simulate_schedule(instance, alloc).delay
    scores = np.zeros(instance.n_providers)
    np.add.at(scores, alloc, baseline - actual)
    return scores


def plurality(votes: list[np.ndarray], n_providers: int) -> np.ndarray:
    """Per-task most common vote; lowest provider id wins ties."""
    if not votes:
        raise ValueError("no votes")
    stacked = np.stack(votes)
    counts = np.zeros((stacked.shape[1], n_providers), dtype=np.int64)
    for row in stacked:
        counts[np.arange(stacked.shape[1]), row] += 1
    return np.argmax(counts, axis=1).astype(np.int64)


def vote_distributions(votes: list[np.ndarray], n_providers: int) -> np.ndarray:
    """(n, m) fraction of nodes voting each provider for each task."""
    stacked = np.stack(votes)
    return np.stack([(stacked == p).mean(axis=0) for p in range(n_providers)], axis=1)


def proposer_of(contributions: np.ndarray) -> int:
    return int(np.argmax(contributions))


# -- hashing -------------------------------------------------------------------

def _fixed_point(x: float) -> int:
    if not math.isfinite(x):
        raise ValueError("cannot hash a non-finite scalar")
    return int(Decimal(x).quantize(Decimal("1e-9"), rounding=ROUND_HALF_EVEN).scaleb(9))


def canonical_bytes(payload: dict) -> bytes:
    """Fields in declared order; integers int64 LE; scalars as int64 LE nanounits."""
    out = [struct.pack("<q", payload["height"]), bytes(payload["prev_hash"]), struct.pack("<q", payload["proposer"])]
    alloc = [int(a) for a in payload["allocation"]]
    out.append(struct.pack(f"<q{len(alloc)}q", len(alloc), *alloc))
    scores = [_fixed_point(float(c)) for c in payload["contributions"]]
    out.append(struct.pack(f"<q{len(scores)}q", len(scores), *scores))
    return b"".join(out)


def canonical_hash(payload: dict) -> bytes:
    return hashlib.sha256(canonical_bytes(payload)).digest()


def make_block(height: int, prev_hash: bytes, instance: Instance, allocation) -> Block:
    alloc = check_allocation(instance, allocation)
    scores = contribution_scores(instance, alloc)
    payload = {"height": height, "prev_hash": prev_hash, "proposer": proposer_of(scores),
               "allocation": tuple(int(a) for a in alloc), "contributions": tuple(float(s) for s in scores)}
    return Block(**payload, payload_hash=canonical_hash(payload))


# -- voting and validation -------------------------------------------------------------

def node_vote(node: NodeState, sample: TrainingSample | Instance, rng_seed) -> np.ndarray:
    if isinstance(sample, Instance):
        sample = make_sample(sample)
    if node.honest:
        return select_actions(student_forward(node.student, sample))
    return random_allocation(sample.instance, rng_seed)


def validate_block(node: NodeState, block: Block, instance: Instance, votes: dict[int, np.ndarray]) -> bool:
    """Recompute consensus, contributions, proposer and digest from the broadcast votes."""
    if block.height != len(node.chain) or block.prev_hash != node.tip_hash():
        return False
    expected = make_block(block.height, block.prev_hash, instance,
                          plurality([votes[i] for i in sorted(votes)], instance.n_providers))
    return (expected.allocation == block.allocation and expected.proposer == block.proposer
            and expected.contributions == block.contributions
            and block.payload_hash == canonical_hash(block.payload()) == expected.payload_hash)


def quorum(n_nodes: int) -> int:
    return math.ceil(2 * n_nodes / 3)


def run_round(nodes: list[NodeState], instance: Instance, height: int, rng_seed: int) -> RoundOutcome:
    """One vote-propose-validate-commit round; messages are delivered in node-id order."""
    if not nodes:
        raise ValueError("a round needs at least one node")
    sample = make_sample(instance)
    votes = {node.id: node_vote(node, sample, derive_seed(rng_seed, 2 * node.id)) for node in nodes}
    ordered = [votes[i] for i in sorted(votes)]
    consensus = plurality(ordered, instance.n_providers)
    honest = [n for n in nodes if n.honest]
    prev = honest[0].tip_hash() if honest else nodes[0].tip_hash()
    block = make_block(height, prev, instance, consensus)
    accepts = set()
    for node in nodes:
        if node.honest:
            ok = validate_block(node, block, instance, votes)
        else:
            ok = bool(np.random.default_rng(derive_seed(rng_seed, 2 * node.id + 1)).random() < 0.5)
        if ok:
            accepts.add(node.id)
    committed = len(accepts) >= quorum(len(nodes))
    block.accept_votes = frozenset(accepts)
    if committed:
        for node in honest:
            node.chain.append(block)
    diversity = diversity_score(vote_distributions(ordered, instance.n_providers)) if instance.n_tasks >= 2 else 0.0
    return RoundOutcome(votes, consensus, np.array(block.contributions), block.proposer, frozenset(accepts),
                        committed, block if committed else None, diversity)


# -- whole simulation ------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    n_nodes: int = 4
    n_byzantine: int = 1
    rounds: int = 100
    n_tasks: int = 10
    n_providers: int = 3
    seed: int = 0
    distill: DistillHyper = DistillHyper()

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        if not 0 <= self.n_byzantine < self.n_nodes:
            raise ValueError("n_byzantine must be in [0, n_nodes)")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.n_tasks < 0 or self.n_providers < 1:
            raise ValueError("need n_tasks >= 0 and n_providers >= 1")


@dataclass
class ChainReport:
    commit_rate: float
    mean_delay: float
    cumulative_contributions: np.ndarray
    diversity: list[float]
    chain: list[Block]
    outcomes: list[RoundOutcome]
    instances: list[Instance]
    nodes: list[NodeState]

    def records(self) -> list[dict]:
        """Chain export records, one per committed block."""
        committed = [(o, inst) for o, inst in zip(self.outcomes, self.instances) if o.committed]
        return [o.block.to_record(simulate_schedule(inst, o.consensus).total_delay) for o, inst in committed]

    def summary(self) -> dict:
        return {
            "commit_rate": self.commit_rate,
            "rounds": len(self.outcomes),
            "committed": sum(o.committed for o in self.outcomes),
            "mean_committed_delay": self.mean_delay,
            "cumulative_contributions": [float(c) for c in self.cumulative_contributions],
            "diversity": list(self.diversity),
        }


def byzantine_ids(config: SimConfig) -> set[int]:
    """The last n_byzantine node ids misbehave."""
    return set(range(config.n_nodes - config.n_byzantine, config.n_nodes))


def make_nodes(config: SimConfig, students: list[nn.Params | None]) -> list[NodeState]:
    bad = byzantine_ids(config)
    return [NodeState(i, "byzantine" if i in bad else "honest", students[i]) for i in range(config.n_nodes)]


def train_students(config: SimConfig, teacher: nn.Params, dataset: list[TrainingSample]) -> list[nn.Params]:
    return [distill(teacher, dataset, config.distill, derive_seed(config.seed, 10_000 + i))[0]
            for i in range(config.n_nodes)]


def run_simulation(config: SimConfig, teacher: nn.Params | None = None,
                   dataset: list[TrainingSample] | None = None,
                   students: list[nn.Params] | None = None) -> ChainReport:
    """Distil one student per node (unless given), then run ``config.rounds`` sequential rounds."""
    if students is None:
        if teacher is None or not dataset:
            raise ValueError("need either students or a teacher plus a distillation dataset")
        students = train_students(config, teacher, dataset)
    if len(students) != config.n_nodes:
        raise ValueError(f"got {len(students)} students for {config.n_nodes} nodes")
    nodes = make_nodes(config, students)
    outcomes, instances = [], []
    for r in range(config.rounds):
        inst = generate_instance(config.n_tasks, config.n_providers, derive_seed(config.seed, r))
        height = len(next((n for n in nodes if n.honest), nodes[0]).chain)
        outcomes.append(run_round(nodes, inst, height, derive_seed(config.seed ^ 0x5EED, r)))
        instances.append(inst)
    committed = [(o, i) for o, i in zip(outcomes, instances) if o.committed]
    cumulative = np.zeros(config.n_providers)
    for o, _ in committed:
        cumulative += o.contributions
    delays = [simulate_schedule(i, o.consensus).total_delay for o, i in committed]
    honest0 = next(n for n in nodes if n.honest)
    return ChainReport(
        commit_rate=len(committed) / len(outcomes) if outcomes else 1.0,
        mean_delay=float(np.mean(delays)) if delays else math.nan,
        cumulative_contributions=cumulative,
        diversity=[o.diversity for o in outcomes],
        chain=list(honest0.chain),
        outcomes=outcomes,
        instances=instances,
        nodes=nodes,
    )


def export_chain(records: list[dict]) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)
