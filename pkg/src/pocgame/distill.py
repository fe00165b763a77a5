"""Student model (empty task graph, narrower layers) and teacher-to-student distillation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .ga import TrainingSample
from .model import (Evaluation, LossTerm, TeacherOutput, TrainingMetrics, empty_adjacency, evaluate_batches, fit,
                    init_model, knn_adjacency, labelled_states, make_batches, one_hot,
                    rollout, select_actions, size_weighted)


@dataclass(frozen=True)
class DistillHyper:
    epochs: int = 300
    lr: float = 3e-2
    alpha: float = 1.0
    hidden_gnn: int = 8
    hidden_rnn: int = 8
    hidden_state: int = 8
    teacher_k: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.hidden_gnn < 1 or self.hidden_rnn < 1 or self.hidden_state < 0:
            raise ValueError("hidden widths must be positive")


def student_forward(params: nn.Params, sample: TrainingSample) -> TeacherOutput:
    """Same decoding as the teacher over a graph of isolated self-looped nodes."""
    out = rollout(params, make_batches([sample], empty_adjacency)[0])
    return TeacherOutput(out.z[0], out.probs[0], out.h_graph[0], out.h_seq[0])


def evaluate_student(params: nn.Params, samples: list[TrainingSample]) -> Evaluation:
    return evaluate_batches(params, samples, make_batches(samples, empty_adjacency))


def distill(teacher: nn.Params, dataset: list[TrainingSample], hyper: DistillHyper = DistillHyper(),
            rng_seed: int = 0) -> tuple[nn.Params, TrainingMetrics]:
    """Train a student on alpha * soft + (1 - alpha) * hard MSE.

    The soft term matches the teacher's sigmoid activations along the
    teacher's own decoded trajectory; the hard term matches one-hot labels
    along the label trajectory, exactly as in teacher training.
    """
    if not dataset:
        raise ValueError("empty dataset")
    first = dataset[0]
    m = first.provider_sequence.shape[0]
    student = init_model(rng_seed, first.node_features.shape[1], first.provider_sequence.shape[1], m,
                         hyper.hidden_gnn, hyper.hidden_rnn, hyper.hidden_state)
    if hyper.epochs == 0:
        return student, TrainingMetrics()
    t_batches = make_batches(dataset, knn_adjacency(hyper.teacher_k))
    s_batches = make_batches(dataset, empty_adjacency)
    terms: list[LossTerm] = []
    if hyper.alpha > 0:
        states, targets = [], []
        for tb, sb in zip(t_batches, s_batches):
            out = rollout(teacher, tb)
            states.append(labelled_states(sb, list(select_actions(out.probs))) if hyper.hidden_state else None)
            targets.append(out.z)
        terms += size_weighted(s_batches, states, targets, hyper.alpha)
    if hyper.alpha < 1:
        if any(s.label is None for s in dataset):
            raise ValueError("alpha < 1 needs labelled samples")
        labels = [[s.label for s in sb.samples] for sb in s_batches]
        states = [labelled_states(sb, ls) if hyper.hidden_state else None for sb, ls in zip(s_batches, labels)]
        targets = [one_hot(np.stack(ls), m) for ls in labels]
        terms += size_weighted(s_batches, states, targets, 1.0 - hyper.alpha)
    return fit(student, dataset, s_batches, terms, hyper.epochs, hyper.lr)
