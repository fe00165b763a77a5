"""Experiment harness: data -> GA labels -> teacher -> students -> consensus -> comparison.

Output tree under ``--out``::

    data/train.jsonl, data/test.jsonl    one {"instance", "label"} record per line
    teacher.ckpt                         teacher parameters (nn_core checkpoint)
    students/node_<i>.ckpt               one student per node
    metrics/train.csv                    per-epoch teacher metrics
    metrics/evaluate.csv                 repeated fixed-parameter test evaluation
    metrics/distill_node_<i>.csv         per-epoch distillation metrics
    chain.jsonl                          committed blocks, one per line
    consensus_instances.jsonl            the instance of every round
    consensus_report.json                commit rate, delays, contributions, diversity
    compare.csv                          mean test delay per method

Every metrics CSV has the columns ``epoch,mse_loss,total_delay,accuracy,diversity``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .chain import SimConfig, export_chain, run_simulation
from .config import ConfigError, ExperimentConfig, load_config
from .distill import distill, evaluate_student
from .ga import TrainingSample, build_training_set, make_sample
from .model import TrainingError, evaluate, one_hot, train_teacher
from .sched import (BRUTE_FORCE_LIMIT, brute_force_optimal, greedy_earliest_completion, random_allocation,
                    round_robin_allocation, simulate_schedule)
from .workload import Instance, derive_seed, generate_dataset

log = logging.getLogger("pocgame")

METRIC_COLUMNS = ["epoch", "mse_loss", "total_delay", "accuracy", "diversity"]

# sub-seed slots derived from the global seed
SEED_TRAIN, SEED_TEST, SEED_GA_TRAIN, SEED_GA_TEST, SEED_TEACHER, SEED_DISTILL, SEED_SIM, SEED_RANDOM = range(8)


class MissingInput(RuntimeError):
    pass


def sub_seed(config: ExperimentConfig, slot: int) -> int:
    return derive_seed(config.seed, slot)


# -- file formats ----------------------------------------------------------------

def write_samples(path: Path, samples: list[TrainingSample]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for s in samples:
            rec = {"instance": s.instance.to_dict(), "label": None if s.label is None else [int(x) for x in s.label]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_samples(path: Path) -> list[TrainingSample]:
    if not path.exists():
        raise MissingInput(f"missing dataset {path}; run gen-data first")
    samples = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        samples.append(make_sample(Instance.from_dict(rec["instance"]), rec["label"]))
    return samples


def write_metrics(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow([r.epoch, repr(r.mse_loss), repr(r.total_delay), repr(r.accuracy), repr(r.diversity)])
    path.write_text(buf.getvalue())


def load_checkpoint(path: Path, what: str) -> nn.Params:
    if not path.exists():
        raise MissingInput(f"missing {what} checkpoint {path}")
    return nn.load_params(path)


def _train_test(out: Path) -> tuple[list[TrainingSample], list[TrainingSample]]:
    return read_samples(out / "data" / "train.jsonl"), read_samples(out / "data" / "test.jsonl")


def _mean_delay(samples, allocs) -> float:
    return float(np.mean([simulate_schedule(s.instance, a).total_delay for s, a in zip(samples, allocs)]))


# -- commands --------------------------------------------------------------------

def cmd_gen_data(config: ExperimentConfig, out: Path) -> dict:
    w = config.workload
    out.joinpath("data").mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, count, inst_slot, ga_slot in (("train", w.train_samples, SEED_TRAIN, SEED_GA_TRAIN),
                                            ("test", w.test_samples, SEED_TEST, SEED_GA_TEST)):
        samples = []
        if count:
            instances = generate_dataset(count, w.n_tasks, w.n_providers, sub_seed(config, inst_slot))
            samples = build_training_set(instances, config.ga, sub_seed(config, ga_slot))
        write_samples(out / "data" / f"{name}.jsonl", samples)
        label = _mean_delay(samples, [s.label for s in samples]) if samples else float("nan")
        rnd = _mean_delay(samples, [random_allocation(s.instance, derive_seed(sub_seed(config, SEED_RANDOM), k))
                                    for k, s in enumerate(samples)]) if samples else float("nan")
        summary[name] = {"count": len(samples), "mean_label_delay": label, "mean_random_delay": rnd}
        print(f"{name}: {len(samples)} samples, mean label delay {label:.4f}, mean random delay {rnd:.4f}")
    return summary


def cmd_train(config: ExperimentConfig, out: Path):
    train, _ = _train_test(out)
    if not train:
        raise MissingInput("training set is empty")
    params, metrics = train_teacher(train, config.teacher, sub_seed(config, SEED_TEACHER))
    nn.save_params(out / "teacher.ckpt", params)
    write_metrics(out / "metrics" / "train.csv", metrics.epochs)
    if metrics.epochs:
        last = metrics.epochs[-1]
        print(f"teacher: {len(metrics.epochs)} epochs, loss {metrics.epochs[0].mse_loss:.4f} -> "
              f"{last.mse_loss:.4f}, accuracy {last.accuracy:.3f}, mean delay {last.total_delay:.4f}")
    return params, metrics


def evaluation_rows(params: nn.Params, samples: list[TrainingSample], iterations: int, k: int,
                    student: bool = False) -> list:
    rows = []
    for it in range(1, iterations + 1):
        ev = evaluate_student(params, samples) if student else evaluate(params, samples, k)
        m = params["decoder.bias"].shape[0]
        errs = [np.mean((z - one_hot(s.label, m)) ** 2) for z, s in zip(ev.z, samples) if s.label is not None]
        loss = float(np.mean(errs)) if errs else float("nan")
        rows.append(_Row(it, loss, ev.total_delay, ev.accuracy, ev.diversity))
    return rows


@dataclasses.dataclass
class _Row:
    epoch: int
    mse_loss: float
    total_delay: float
    accuracy: float
    diversity: float


def cmd_evaluate(config: ExperimentConfig, out: Path, checkpoint: Path | None = None) -> list:
    params = load_checkpoint(checkpoint or out / "teacher.ckpt", "teacher")
    _, test = _train_test(out)
    if not test:
        raise MissingInput("test set is empty")
    rows = evaluation_rows(params, test, config.evaluate.iterations, config.teacher.k)
    write_metrics(out / "metrics" / "evaluate.csv", rows)
    r = rows[-1]
    print(f"evaluate: {len(rows)} iterations, mean delay {r.total_delay:.4f}, accuracy {r.accuracy:.3f}, "
          f"diversity {r.diversity:.4f}")
    return rows


def cmd_distill(config: ExperimentConfig, out: Path, checkpoint: Path | None = None) -> list[nn.Params]:
    teacher = load_checkpoint(checkpoint or out / "teacher.ckpt", "teacher")
    train, _ = _train_test(out)
    out.joinpath("students").mkdir(parents=True, exist_ok=True)
    students = []
    for i in range(config.consensus.n_nodes):
        student, metrics = distill(teacher, train, config.distill, derive_seed(sub_seed(config, SEED_DISTILL), i))
        nn.save_params(out / "students" / f"node_{i}.ckpt", student)
        write_metrics(out / "metrics" / f"distill_node_{i}.csv", metrics.epochs)
        students.append(student)
        if metrics.epochs:
            print(f"student {i}: distill loss {metrics.epochs[0].mse_loss:.4f} -> {metrics.epochs[-1].mse_loss:.4f}")
    return students


def _sim_config(config: ExperimentConfig) -> SimConfig:
    c = config.consensus
    return SimConfig(c.n_nodes, c.n_byzantine, c.rounds, config.workload.n_tasks, config.workload.n_providers,
                     sub_seed(config, SEED_SIM), config.distill)


def cmd_consensus(config: ExperimentConfig, out: Path) -> dict:
    sim = _sim_config(config)
    students = [load_checkpoint(out / "students" / f"node_{i}.ckpt", "student") for i in range(sim.n_nodes)]
    report = run_simulation(sim, students=students)
    (out / "chain.jsonl").write_text(export_chain(report.records()))
    (out / "consensus_instances.jsonl").write_text(
        "".join(json.dumps(i.to_dict(), separators=(",", ":")) + "\n" for i in report.instances))
    summary = report.summary()
    (out / "consensus_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"consensus: {summary['committed']}/{summary['rounds']} rounds committed, "
          f"mean committed delay {summary['mean_committed_delay']:.4f}")
    return summary


def compare_table(config: ExperimentConfig, test: list[TrainingSample], teacher: nn.Params | None,
                  student: nn.Params | None) -> dict[str, float]:
    rnd_seed = sub_seed(config, SEED_RANDOM)
    table = {
        "random": _mean_delay(test, [random_allocation(s.instance, derive_seed(rnd_seed, k)) for k, s in enumerate(test)]),
        "round_robin": _mean_delay(test, [round_robin_allocation(s.instance) for s in test]),
        "greedy": _mean_delay(test, [greedy_earliest_completion(s.instance) for s in test]),
        "ga": _mean_delay(test, [s.label for s in test]),
    }
    if teacher is not None:
        table["teacher"] = evaluate(teacher, test, config.teacher.k).total_delay
    if student is not None:
        table["student"] = evaluate_student(student, test).total_delay
    w = config.workload
    if config.compare.oracle and w.n_providers ** w.n_tasks <= BRUTE_FORCE_LIMIT:
        table["oracle"] = float(np.mean([brute_force_optimal(s.instance)[1] for s in test]))
    return table


def cmd_compare(config: ExperimentConfig, out: Path) -> dict[str, float]:
    _, test = _train_test(out)
    if not test:
        raise MissingInput("test set is empty")
    teacher = nn.load_params(out / "teacher.ckpt") if (out / "teacher.ckpt").exists() else None
    node0 = out / "students" / "node_0.ckpt"
    student = nn.load_params(node0) if node0.exists() else None
    table = compare_table(config, test, teacher, student)
    lines = ["method,mean_total_delay"] + [f"{k},{v!r}" for k, v in table.items()]
    (out / "compare.csv").write_text("\n".join(lines) + "\n")
    for k, v in table.items():
        print(f"{k:>12}: {v:.4f}")
    return table


def cmd_run_all(config: ExperimentConfig, out: Path) -> None:
    cmd_gen_data(config, out)
    cmd_train(config, out)
    cmd_evaluate(config, out)
    cmd_distill(config, out)
    cmd_consensus(config, out)
    cmd_compare(config, out)


# -- entry point -------------------------------------------------------------------

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "distill": cmd_distill,
    "consensus": cmd_consensus,
    "compare": cmd_compare,
    "run-all": cmd_run_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pocgame", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        if name in ("evaluate", "distill"):
            p.add_argument("--checkpoint", type=Path, default=None, help="teacher checkpoint (default OUT/teacher.ckpt)")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        fn = COMMANDS[args.command]
        if args.command in ("evaluate", "distill"):
            fn(config, args.out, args.checkpoint)
        else:
            fn(config, args.out)
    except (MissingInput, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
