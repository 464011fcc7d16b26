"""Multi-state network kernels: forward pass, feedback, backward pass, synapse update.

Shapes used throughout:

* neuron states of layer ``l``: ``(batch, n_l, k)``
* synapses between layers ``l`` and ``l+1``: ``(C, n_l + 1, n_{l+1})`` where
  ``C`` is ``k`` for multi-state synapses and 1 otherwise.  The last row of
  the middle axis is the bias; its pre-synaptic activation is the constant 1
  in every state.

The backward tensor has the same shape and indexing as the forward tensor
(``wb[c, i, j]`` connects upstream ``i`` with downstream ``j``).  With
symmetric synapses it *is* the forward tensor.

All kernels are pure: they return new state / synapse containers and never
mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericOverflowError, ValidationError
from .genome import Genome

BACKWARD_MODES = ("additive", "multiplicative", "mult_second_state_only")
STABILIZERS = ("none", "oja", "synapse_norm", "saturation")
NORM_EPS = 1e-8


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple
    symmetric_synapses: bool = True
    multistate_synapses: bool = True
    backward_mode: str = "additive"
    normalize_activations: bool = True
    synapse_stabilizer: str = "none"

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigurationError("an architecture needs at least 2 layers")
        if any(n < 1 for n in sizes):
            raise ConfigurationError(f"layer sizes must be >= 1, got {sizes}")
        if self.backward_mode not in BACKWARD_MODES:
            raise ConfigurationError(f"unknown backward mode {self.backward_mode!r}")
        if self.synapse_stabilizer not in STABILIZERS:
            raise ConfigurationError(f"unknown stabilizer {self.synapse_stabilizer!r}")

    @property
    def num_layers(self):
        return len(self.layer_sizes)

    @property
    def oracle_mode(self):
        # The multiplicative-second-state backward rule only makes sense with
        # a derivative in state 2, so the forward activation follows suit.
        return self.backward_mode == "mult_second_state_only"

    def check_states(self, k):
        if self.backward_mode == "mult_second_state_only" and k < 2:
            raise ConfigurationError("mult_second_state_only requires k >= 2")

    def with_io(self, input_dim, num_classes):
        sizes = (int(input_dim),) + tuple(self.layer_sizes[1:-1]) + (int(num_classes),)
        return replace(self, layer_sizes=sizes)

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class SynapseSet:
    forward: List[np.ndarray]
    backward: List[np.ndarray]

    @property
    def symmetric(self):
        return all(b is f for f, b in zip(self.forward, self.backward))

    @property
    def num_channels(self):
        return self.forward[0].shape[0]

    def copy(self):
        fw = [w.copy() for w in self.forward]
        bw = [fw[i] if b is f else b.copy()
              for i, (f, b) in enumerate(zip(self.forward, self.backward))]
        return SynapseSet(fw, bw)

    def flat_forward(self):
        return np.concatenate([w.ravel() for w in self.forward])

    def with_flat_forward(self, vector):
        """Copy with forward tensors taken from ``vector`` (backward kept unless aliased)."""
        vector = np.asarray(vector)
        fw, bw, pos = [], [], 0
        for f, b in zip(self.forward, self.backward):
            w = vector[pos:pos + f.size].reshape(f.shape).astype(f.dtype, copy=True)
            pos += f.size
            fw.append(w)
            bw.append(w if b is f else b)
        if pos != vector.size:
            raise ValidationError("flat forward vector has the wrong length")
        return SynapseSet(fw, bw)

    def column_norms(self):
        """Per layer pair: L2 norm of every (channel, output column) of the forward tensor."""
        return [np.sqrt(np.sum(w.astype(np.float64) ** 2, axis=1)) for w in self.forward]


@dataclass
class NetworkState:
    layers: List[np.ndarray] = field(default_factory=list)

    @property
    def batch_size(self):
        return self.layers[0].shape[0]

    def copy(self):
        return NetworkState([a.copy() for a in self.layers])

    def _with_layer(self, index, value):
        layers = list(self.layers)
        layers[index] = value
        return NetworkState(layers)


# -- activations -------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation(kind, x):
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "identity":
        return x
    raise ValidationError(f"unknown activation {kind!r}")


def activation_derivative(kind, x):
    if kind == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if kind == "sigmoid":
        s = _sigmoid(x)
        return s * (1.0 - s)
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "identity":
        return np.ones_like(x)
    raise ValidationError(f"unknown activation {kind!r}")


def _phi(kind, x, oracle):
    out = activation(kind, x)
    if oracle and x.shape[-1] >= 2:
        out[..., 1] = activation_derivative(kind, x[..., 1])
    return out


def _check_finite(x, what, layer):
    if not np.all(np.isfinite(x)):
        raise NumericOverflowError(f"non-finite values in {what} at layer {layer}", layer=layer)


# -- construction ------------------------------------------------------------

def init_synapses(arch: Architecture, k: int, seed: int, dtype=np.float64) -> SynapseSet:
    """Gaussian synapses with deviation 1/sqrt(fan_in); fan_in counts the bias row."""
    arch.check_states(k)
    rng = np.random.default_rng(seed)
    channels = k if arch.multistate_synapses else 1
    forward, backward = [], []
    for n_in, n_out in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]):
        std = 1.0 / np.sqrt(n_in + 1)
        w = rng.normal(0.0, std, size=(channels, n_in + 1, n_out)).astype(dtype)
        forward.append(w)
        if arch.symmetric_synapses:
            backward.append(w)
        else:
            backward.append(rng.normal(0.0, std, size=w.shape).astype(dtype))
    return SynapseSet(forward, backward)


def zero_state(arch: Architecture, k: int, batch_size: int, dtype=np.float64) -> NetworkState:
    return NetworkState([np.zeros((batch_size, n, k), dtype=dtype) for n in arch.layer_sizes])


def inject_input(state: NetworkState, batch) -> NetworkState:
    """Write the inputs into state 1 of layer 0; everything else becomes zero."""
    x = np.asarray(batch.inputs)
    first = state.layers[0]
    if x.ndim != 2 or x.shape[1] != first.shape[1]:
        raise ConfigurationError(
            f"input dimension {x.shape[1:]} does not match layer 0 size {first.shape[1]}"
        )
    b, k = x.shape[0], first.shape[2]
    dtype = first.dtype
    layers = [np.zeros((b, a.shape[1], k), dtype=dtype) for a in state.layers]
    layers[0][:, :, 0] = x
    return NetworkState(layers)


def inject_feedback(state: NetworkState, labels, k: Optional[int] = None) -> NetworkState:
    """Write the +/-1 class signal into state 2 of the last layer.

    States 3..k are zeroed and state 1 is untouched.  A single-state network
    has nowhere else to put the signal, so there it replaces state 1.
    """
    last = state.layers[-1]
    k = last.shape[2] if k is None else k
    if k != last.shape[2]:
        raise ConfigurationError(f"state count {k} does not match the network ({last.shape[2]})")
    labels = np.asarray(labels)
    d = last.shape[1]
    if labels.shape != (last.shape[0],):
        raise ConfigurationError("one label per batch row is required")
    if labels.size and (labels.min() < 0 or labels.max() >= d):
        raise ValidationError(f"labels must lie in [0, {d}), got max {labels.max()}")
    target = np.full((last.shape[0], d), -1.0, dtype=last.dtype)
    target[np.arange(last.shape[0]), labels] = 1.0
    out = last.copy()
    if k == 1:
        out[:, :, 0] = target
    else:
        out[:, :, 1] = target
        out[:, :, 2:] = 0.0
    return state._with_layer(-1, out)


# -- normalization and effective weights --------------------------------------

def normalize(pre_act: np.ndarray, genome: Genome) -> np.ndarray:
    """Standardize each state over the (batch, neuron) axes, then apply the genome affine."""
    if pre_act.shape[0] < 2:
        raise ConfigurationError("activation normalization needs a batch of at least 2")
    k = pre_act.shape[-1]
    mean = pre_act.reshape(-1, k).mean(axis=0)
    centered = pre_act - mean
    std = np.sqrt(np.mean(np.square(centered).reshape(-1, k), axis=0))
    z = centered / (std + NORM_EPS)
    return z * genome.norm_std.astype(pre_act.dtype) + genome.norm_mean.astype(pre_act.dtype)


def _column_normalize(w):
    norm = np.sqrt(np.sum(w * w, axis=1, keepdims=True))
    return np.where(norm > 0, w / np.where(norm > 0, norm, 1.0), w)


def effective_weights(synapses: SynapseSet, stabilizer: str) -> SynapseSet:
    """Weights used while computing activations.

    ``synapse_norm`` divides every (channel, output column) by its L2 norm;
    the stored synapses are not modified.  Other stabilizers return the
    stored tensors unchanged.
    """
    if stabilizer != "synapse_norm":
        return synapses
    fw = [_column_normalize(w) for w in synapses.forward]
    bw = [fw[i] if b is f else _column_normalize(b)
          for i, (f, b) in enumerate(zip(synapses.forward, synapses.backward))]
    return SynapseSet(fw, bw)


# -- forward -----------------------------------------------------------------

def _forward_layer(up, down, w, genome, arch, layer):
    g_dtype = up.dtype
    nu = genome.nu.astype(g_dtype)
    m = up @ nu.T                                   # m[s,i,c] = sum_d nu[c,d] a[s,i,d]
    # contiguous operands keep matmul on the BLAS path
    core = np.matmul(np.ascontiguousarray(m.transpose(2, 0, 1)), w[:, :-1])  # (k, B, n_out)
    core = core.transpose(1, 2, 0)
    x = genome.eta * core
    if genome.f != 0.0:
        x = x + genome.f * down
    if arch.normalize_activations:
        x = normalize(x, genome)
    bias = w[:, -1, :].T * nu.sum(axis=1)            # (n_out, k) via broadcast
    x = x + genome.eta * bias
    out = _phi(genome.activation_kind, x, arch.oracle_mode)
    _check_finite(out, "forward activations", layer)
    return out


def forward_step(state: NetworkState, synapses: SynapseSet, genome: Genome,
                 layer_index: int, arch: Architecture) -> NetworkState:
    """Update layer ``layer_index`` (>= 1) from layer ``layer_index - 1``."""
    if not 1 <= layer_index < len(state.layers):
        raise ConfigurationError(f"forward step needs 1 <= layer_index < {len(state.layers)}")
    eff = effective_weights(synapses, arch.synapse_stabilizer)
    w = eff.forward[layer_index - 1]
    out = _forward_layer(state.layers[layer_index - 1], state.layers[layer_index], w,
                         genome, arch, layer_index)
    return state._with_layer(layer_index, out)


def forward_pass(state: NetworkState, synapses: SynapseSet, genome: Genome,
                 arch: Architecture, effective: Optional[SynapseSet] = None) -> NetworkState:
    eff = effective if effective is not None else effective_weights(synapses, arch.synapse_stabilizer)
    layers = list(state.layers)
    for l in range(1, len(layers)):
        layers[l] = _forward_layer(layers[l - 1], layers[l], eff.forward[l - 1], genome, arch, l)
    return NetworkState(layers)


def predictions(state: NetworkState) -> np.ndarray:
    return np.argmax(state.layers[-1][:, :, 0], axis=1)


# -- backward ----------------------------------------------------------------

def _backward_layer(up, down, wb, genome, arch, layer, mode):
    dtype = up.dtype
    mu = genome.mu.astype(dtype)
    m = down @ mu.T                                  # m[s,j,c] = sum_d mu[c,d] a[s,j,d]
    msg = np.matmul(np.ascontiguousarray(m.transpose(2, 0, 1)),
                    np.ascontiguousarray(wb[:, :-1].transpose(0, 2, 1)))  # (k, B, n_up)
    msg = msg.transpose(1, 2, 0)
    if mode == "mult_second_state_only":
        out = up.copy()
        out[:, :, 1] = up[:, :, 1] * msg[:, :, 1]
    elif mode == "additive":
        x = genome.eta * msg
        if genome.f != 0.0:
            x = x + genome.f * up
        if arch.normalize_activations:
            x = normalize(x, genome)
        out = activation(genome.activation_kind, x)
    elif mode == "multiplicative":
        x = genome.eta * msg
        if arch.normalize_activations:
            x = normalize(x, genome)
        out = up * activation(genome.activation_kind, x)
    else:
        raise ConfigurationError(f"unknown backward mode {mode!r}")
    _check_finite(out, "backward activations", layer)
    return out


def backward_step(state: NetworkState, synapses: SynapseSet, genome: Genome,
                  layer_index: int, mode: str, arch: Architecture) -> NetworkState:
    """Update hidden layer ``layer_index`` from the (already updated) layer above it."""
    if not 1 <= layer_index < len(state.layers) - 1:
        raise ConfigurationError("backward step applies to hidden layers only")
    eff = effective_weights(synapses, arch.synapse_stabilizer)
    out = _backward_layer(state.layers[layer_index], state.layers[layer_index + 1],
                          eff.backward[layer_index], genome, arch, layer_index, mode)
    return state._with_layer(layer_index, out)


def backward_pass(state: NetworkState, synapses: SynapseSet, genome: Genome,
                  arch: Architecture, effective: Optional[SynapseSet] = None) -> NetworkState:
    eff = effective if effective is not None else effective_weights(synapses, arch.synapse_stabilizer)
    layers = list(state.layers)
    for l in range(len(layers) - 2, 0, -1):
        layers[l] = _backward_layer(layers[l], layers[l + 1], eff.backward[l], genome, arch, l,
                                    arch.backward_mode)
    return NetworkState(layers)


# -- synapse update ----------------------------------------------------------

def _augment(a):
    ones = np.ones((a.shape[0], 1, a.shape[2]), dtype=a.dtype)
    return np.concatenate([a, ones], axis=1)


def hebbian_term(pre, post, genome, channels):
    """Batch mean of sum_{e,d} pre^e nu_tilde[e,c] mu_tilde[c,d] post^d, shape (C, n_pre, n_post)."""
    dtype = pre.dtype
    p = pre @ genome.nu_tilde.astype(dtype)          # p[s,i,c] = sum_e pre[s,i,e] nu_tilde[e,c]
    q = post @ genome.mu_tilde.astype(dtype).T       # q[s,j,c] = sum_d mu_tilde[c,d] post[s,j,d]
    h = np.matmul(np.ascontiguousarray(p.transpose(2, 1, 0)),
                  np.ascontiguousarray(q.transpose(2, 0, 1))) / pre.shape[0]
    if channels == 1:
        # a single-state synapse is shared by all channels; its update is the sum
        h = h.sum(axis=0, keepdims=True)
    return h


def _apply_rule(w, h, genome, stabilizer):
    new = genome.f_tilde * w + genome.eta_tilde * h
    if stabilizer == "oja" and genome.oja_multiplier != 0.0 and genome.f_tilde != 1.0:
        col = np.sum(w * w, axis=1, keepdims=True)
        new = new - genome.oja_multiplier * (genome.f_tilde - 1.0) * w * col
    elif stabilizer == "saturation":
        alpha = genome.saturation_alpha
        if alpha is None:
            raise ConfigurationError("saturation stabilizer needs genome.saturation_alpha")
        new = alpha * np.tanh(new / alpha)
    return new


def oja_term(w, genome):
    """First Oja term, ``-(f_tilde - 1) w_ij sum_r w_rj^2``, before the multiplier."""
    return -(genome.f_tilde - 1.0) * w * np.sum(w * w, axis=1, keepdims=True)


def synapse_update(state: NetworkState, synapses: SynapseSet, genome: Genome,
                   arch: Architecture) -> SynapseSet:
    """Hebbian update of every synapse tensor from the post-backward states."""
    forward, backward = [], []
    stab = arch.synapse_stabilizer
    for l, (w, wb) in enumerate(zip(synapses.forward, synapses.backward)):
        up = _augment(state.layers[l])
        down = state.layers[l + 1]
        channels = w.shape[0]
        new_w = _apply_rule(w, hebbian_term(up, down, genome, channels), genome, stab)
        _check_finite(new_w, "synapse update", l)
        forward.append(new_w)
        if wb is w:
            backward.append(new_w)
            continue
        # backward synapses: downstream is pre-synaptic, upstream post-synaptic
        wb_t = wb.transpose(0, 2, 1)
        h_b = hebbian_term(down, up, genome, channels)
        new_b = np.ascontiguousarray(_apply_rule(wb_t, h_b, genome, stab).transpose(0, 2, 1))
        _check_finite(new_b, "backward synapse update", l)
        backward.append(new_b)
    return SynapseSet(forward, backward)


def unroll_step(synapses: SynapseSet, genome: Genome, arch: Architecture, batch,
                dtype=None):
    """One learning step on ``batch``.  Returns (new synapses, predictions before the update)."""
    dtype = synapses.forward[0].dtype if dtype is None else dtype
    state = zero_state(arch, genome.num_states, len(batch.labels), dtype)
    state = inject_input(state, batch)
    eff = effective_weights(synapses, arch.synapse_stabilizer)
    state = forward_pass(state, synapses, genome, arch, effective=eff)
    pred = predictions(state)
    state = inject_feedback(state, batch.labels, genome.num_states)
    state = backward_pass(state, synapses, genome, arch, effective=eff)
    return synapse_update(state, synapses, genome, arch), pred


def infer(synapses: SynapseSet, genome: Genome, arch: Architecture, inputs) -> np.ndarray:
    """Forward-only pass; returns the state-1 output of the last layer."""
    from .tasks import TaskBatch

    x = np.asarray(inputs, dtype=synapses.forward[0].dtype)
    batch = TaskBatch(x, np.zeros(len(x), dtype=np.int64), arch.layer_sizes[-1])
    state = zero_state(arch, genome.num_states, len(x), x.dtype)
    state = inject_input(state, batch)
    state = forward_pass(state, synapses, genome, arch)
    return state.layers[-1][:, :, 0]


def check_compatible(genome: Genome, arch: Architecture, synapses: Optional[SynapseSet] = None):
    arch.check_states(genome.num_states)
    if arch.synapse_stabilizer == "saturation" and genome.saturation_alpha is None:
        raise ConfigurationError("saturation stabilizer needs a genome with saturation_alpha")
    if synapses is None:
        return
    channels = genome.num_states if arch.multistate_synapses else 1
    if len(synapses.forward) != arch.num_layers - 1:
        raise ConfigurationError("synapse set has the wrong number of layer pairs")
    for l, w in enumerate(synapses.forward):
        expected = (channels, arch.layer_sizes[l] + 1, arch.layer_sizes[l + 1])
        if w.shape != expected:
            raise ConfigurationError(f"synapse pair {l} has shape {w.shape}, expected {expected}")
