"""The inner loop: unrolled learning episodes and the plain-SGD reference.

An episode draws a fresh batch per unroll step, runs forward pass, feedback
injection, backward pass and synapse update, and finally measures accuracy
on held-out batches with forward passes only.

:class:`MLP` is an independent, hand-written backprop network.  It serves
as the oracle for the backprop-genome equivalence and as the SGD baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericOverflowError
from .genome import Genome
from .network import (
    Architecture,
    SynapseSet,
    activation,
    activation_derivative,
    check_compatible,
    effective_weights,
    forward_pass,
    init_synapses,
    inject_input,
    predictions,
    unroll_step,
    zero_state,
)
from .tasks import Task, TaskBatch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UnrollConfig:
    unroll_steps: int = 10
    eval_batches: int = 20
    batch_size: int = 128
    synapse_seed: int = 0
    data_seed: int = 0

    def __post_init__(self):
        if self.unroll_steps < 0:
            raise ConfigurationError("unroll_steps must be >= 0")
        if self.eval_batches < 1 or self.batch_size < 1:
            raise ConfigurationError("eval_batches and batch_size must be positive")

    def with_seed(self, seed):
        return UnrollConfig(self.unroll_steps, self.eval_batches, self.batch_size, seed, seed)


@dataclass
class FitnessReport:
    train_accuracy: List[float]
    eval_accuracy: float
    norm_max: np.ndarray            # (steps, layer pairs): max column norm after each update
    norm_mean: np.ndarray           # (steps, layer pairs): mean column norm
    diverged: bool = False
    diverged_at: Optional[int] = None
    num_classes: int = 2
    eval_trace: Dict[int, float] = field(default_factory=dict)

    @property
    def chance(self):
        return 1.0 / self.num_classes

    def fitness(self, kind="train"):
        """Scalar fitness: ``eval`` accuracy or late-episode ``train`` accuracy.

        Train fitness averages the per-step accuracy over the second half of
        the unroll, which damps the noise of a single batch.
        """
        if self.diverged:
            return self.chance
        if kind == "eval" or not self.train_accuracy:
            return self.eval_accuracy
        if kind != "train":
            raise ConfigurationError(f"unknown fitness kind {kind!r}")
        tail = self.train_accuracy[len(self.train_accuracy) // 2:]
        return float(np.mean(tail))


def arch_for_task(arch: Architecture, task: Task) -> Architecture:
    return arch.with_io(task.input_dim, task.num_classes)


def _accuracy(pred, labels):
    return float(np.mean(pred == labels))


def evaluate(genome: Genome, arch: Architecture, synapses: SynapseSet,
             eval_stream: Iterable[TaskBatch], eval_batches: int) -> float:
    """Mean over ``eval_batches`` batches of the argmax(state 1) accuracy."""
    eff = effective_weights(synapses, arch.synapse_stabilizer)
    dtype = synapses.forward[0].dtype
    accs = []
    it = iter(eval_stream)
    for _ in range(eval_batches):
        batch = next(it)
        state = zero_state(arch, genome.num_states, len(batch), dtype)
        state = inject_input(state, batch)
        state = forward_pass(state, synapses, genome, arch, effective=eff)
        accs.append(_accuracy(predictions(state), batch.labels))
    return float(np.mean(accs))


def _norm_stats(synapses):
    norms = synapses.column_norms()
    return [float(n.max()) for n in norms], [float(n.mean()) for n in norms]


def run_episode(genome: Genome, arch: Architecture, task: Task, cfg: UnrollConfig,
                synapses: Optional[SynapseSet] = None, eval_at: Sequence[int] = (),
                input_scale: float = 1.0, dtype=np.float64):
    """Train fresh (or given) synapses for ``cfg.unroll_steps`` and evaluate them.

    ``eval_at`` lists unroll counts (0 allowed) after which the held-out
    accuracy is also recorded into ``report.eval_trace``.  Divergence aborts
    the episode and reports chance accuracy instead of raising.
    """
    check_compatible(genome, arch, synapses)
    if arch.layer_sizes[0] != task.input_dim or arch.layer_sizes[-1] != task.num_classes:
        raise ConfigurationError(
            f"architecture {arch.layer_sizes} does not fit task {task.name!r} "
            f"({task.input_dim} inputs, {task.num_classes} classes)"
        )
    syn = synapses if synapses is not None else init_synapses(
        arch, genome.num_states, cfg.synapse_seed, dtype)
    train, evals = task.streams(cfg.batch_size, cfg.data_seed, input_scale)
    eval_set = [next(evals) for _ in range(cfg.eval_batches)]
    eval_at = set(int(s) for s in eval_at)

    steps = cfg.unroll_steps
    chance = 1.0 / task.num_classes
    train_acc: List[float] = []
    norm_max = np.full((steps, len(syn.forward)), np.nan)
    norm_mean = np.full((steps, len(syn.forward)), np.nan)
    eval_trace: Dict[int, float] = {}
    with np.errstate(all="ignore"):
        try:
            if 0 in eval_at:
                eval_trace[0] = evaluate(genome, arch, syn, eval_set, len(eval_set))
            for t in range(steps):
                batch = next(train)
                syn, pred = unroll_step(syn, genome, arch, batch)
                train_acc.append(_accuracy(pred, batch.labels))
                norm_max[t], norm_mean[t] = _norm_stats(syn)
                if t + 1 in eval_at:
                    eval_trace[t + 1] = evaluate(genome, arch, syn, eval_set, len(eval_set))
            eval_acc = evaluate(genome, arch, syn, eval_set, len(eval_set))
        except NumericOverflowError as err:
            at = len(train_acc)
            log.debug("episode diverged at step %d: %s", at, err)
            train_acc += [chance] * (steps - len(train_acc))
            for s in eval_at:
                eval_trace.setdefault(s, chance)
            report = FitnessReport(train_acc, chance, norm_max, norm_mean, True, at,
                                   task.num_classes, eval_trace)
            return syn, report
    report = FitnessReport(train_acc, eval_acc, norm_max, norm_mean, False, None,
                           task.num_classes, eval_trace)
    return syn, report


# -- SGD reference -------------------------------------------------------------

LOSSES = ("softmax_ce", "feedback")


class MLP:
    """Fully connected network trained by explicit backpropagation.

    ``weights[l]`` has shape ``(n_l + 1, n_{l+1})`` with the bias as the last
    row, the same layout as a single-channel synapse tensor.  Hidden layers
    use ``activation``; the output layer is linear (its pre-activations are
    the logits).

    Losses (batch means):

    * ``softmax_ce``: cross entropy of softmax(logits);
    * ``feedback``: ``-sum_j t_j z_j`` with ``t = +1`` for the true class
      and ``-1`` elsewhere, whose output error equals the negated +/-1
      feedback signal injected into BLUR networks.
    """

    def __init__(self, weights, activation_kind="sigmoid", loss="softmax_ce"):
        if loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {loss!r}")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.activation_kind = activation_kind
        self.loss_kind = loss
        self.velocity = [np.zeros_like(w) for w in self.weights]

    @staticmethod
    def _aug(h):
        return np.hstack([h, np.ones((h.shape[0], 1))])

    def forward(self, x):
        hs, zs = [np.asarray(x, dtype=np.float64)], []
        for l, w in enumerate(self.weights):
            z = self._aug(hs[-1]) @ w
            zs.append(z)
            if l < len(self.weights) - 1:
                hs.append(activation(self.activation_kind, z))
        return hs, zs

    def logits(self, x):
        return self.forward(x)[1][-1]

    def _output_error(self, z, labels):
        b = z.shape[0]
        if self.loss_kind == "softmax_ce":
            p = np.exp(z - z.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(b), labels] -= 1.0
            return p / b
        t = -np.ones_like(z)
        t[np.arange(b), labels] = 1.0
        return -t / b

    def loss(self, x, labels):
        z = self.logits(x)
        b = z.shape[0]
        if self.loss_kind == "softmax_ce":
            zs = z - z.max(axis=1, keepdims=True)
            logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
            return float(-logp[np.arange(b), labels].mean())
        t = -np.ones_like(z)
        t[np.arange(b), labels] = 1.0
        return float(-(t * z).sum() / b)

    def gradients(self, x, labels):
        hs, zs = self.forward(x)
        delta = self._output_error(zs[-1], labels)
        grads = [None] * len(self.weights)
        for l in range(len(self.weights) - 1, -1, -1):
            grads[l] = self._aug(hs[l]).T @ delta
            if l > 0:
                back = delta @ self.weights[l][:-1].T
                delta = back * activation_derivative(self.activation_kind, zs[l - 1])
        return grads

    def step(self, x, labels, lr, momentum=0.0):
        grads = self.gradients(x, labels)
        for l, g in enumerate(grads):
            if momentum:
                self.velocity[l] = momentum * self.velocity[l] + g
                g = self.velocity[l]
            self.weights[l] = self.weights[l] - lr * g

    def accuracy(self, x, labels):
        return _accuracy(np.argmax(self.logits(x), axis=1), labels)


@dataclass
class AccuracyTrace:
    train: List[float]
    eval: Dict[int, float] = field(default_factory=dict)


def sgd_reference(arch: Architecture, task: Task, lr: float, momentum: float = 0.0,
                  steps: int = 100, seed: int = 0, *, batch_size: int = 128,
                  activation_kind: str = "sigmoid", loss: str = "softmax_ce",
                  eval_batches: int = 20, eval_at: Sequence[int] = (), weights=None):
    """Train an :class:`MLP` with (momentum) SGD on ``task``.

    Initial weights default to channel 0 of ``init_synapses(arch, 1, seed)``
    so that a BLUR network with single-state synapses can start from the
    same point.  Returns ``(weights, AccuracyTrace)``; ``trace.train[t]`` is
    the accuracy on batch ``t`` before its update.
    """
    if arch.layer_sizes[0] != task.input_dim or arch.layer_sizes[-1] != task.num_classes:
        raise ConfigurationError("architecture does not fit the task")
    if weights is None:
        single = arch.replace(multistate_synapses=False, symmetric_synapses=True,
                              backward_mode="additive")
        weights = [w[0] for w in init_synapses(single, 1, seed).forward]
    net = MLP(weights, activation_kind, loss)
    train, evals = task.streams(batch_size, seed)
    eval_set = [next(evals) for _ in range(eval_batches)] if eval_at else []
    eval_at = set(int(s) for s in eval_at)
    trace = AccuracyTrace([])

    def _eval():
        return float(np.mean([net.accuracy(b.inputs, b.labels) for b in eval_set]))

    if 0 in eval_at:
        trace.eval[0] = _eval()
    for t in range(steps):
        batch = next(train)
        trace.train.append(net.accuracy(batch.inputs, batch.labels))
        net.step(batch.inputs, batch.labels, lr, momentum)
        if t + 1 in eval_at:
            trace.eval[t + 1] = _eval()
    return net.weights, trace
