import numpy as np
import pytest

from blur.genome import zero_update
from blur.network import Architecture, SynapseSet
from blur.tasks import TaskBatch


def make_genome(k=2, activation="identity", **fields):
    """A genome starting from the no-op rule with selected fields overridden."""
    return zero_update(k, activation).replace(**fields)


def make_batch(inputs, labels=None, num_classes=2):
    inputs = np.asarray(inputs, dtype=np.float64)
    if labels is None:
        labels = np.zeros(len(inputs), dtype=np.int64)
    return TaskBatch(inputs, np.asarray(labels, dtype=np.int64), num_classes)


def synapses_from(weights, symmetric=True):
    """SynapseSet from a list of (C, n_in + 1, n_out) arrays."""
    fw = [np.array(w, dtype=np.float64) for w in weights]
    return SynapseSet(fw, fw if symmetric else [w.copy() for w in fw])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def oracle_arch():
    """The configuration under which BLUR reproduces plain SGD."""
    return Architecture((2, 20, 2), symmetric_synapses=True, multistate_synapses=False,
                        backward_mode="mult_second_state_only", normalize_activations=False,
                        synapse_stabilizer="none")


# -- acceptance report ---------------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
