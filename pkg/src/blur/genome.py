"""The genome: the shared meta-parameters that define a learning rule.

A genome holds the neuron gates ``(f, eta)``, the synapse gates
``(f_tilde, eta_tilde)``, four ``k x k`` state-mixing matrices, the
per-state affine parameters of activation normalization, the Oja
multiplier and an optional synapse saturation scale.  The same genome is
used by every neuron and synapse of every layer.

Genomes are immutable.  The meta-optimizer never sees them directly; it
works on flat vectors produced by :func:`encode` and read back with
:func:`decode` under a :class:`GenomeLayout`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import LayoutError, UnsupportedStateCountError, ValidationError

ACTIVATIONS = ("tanh", "sigmoid", "relu", "identity")
BACKPROP_VARIANTS = ("section31", "section45")

LAYOUT_VERSION = 1
FILE_FORMAT = "blur-genome"

# Flat ordering of the optimizable fields.  Never reorder: saved vectors
# depend on it.
FIELD_ORDER = (
    "f",
    "eta",
    "f_tilde",
    "eta_tilde",
    "nu",
    "mu",
    "nu_tilde",
    "mu_tilde",
    "norm_mean",
    "norm_std",
    "oja_multiplier",
    "saturation_alpha",
)
_SCALARS = ("f", "eta", "f_tilde", "eta_tilde", "oja_multiplier", "saturation_alpha")
_MATRICES = ("nu", "mu", "nu_tilde", "mu_tilde")
_VECTORS = ("norm_mean", "norm_std")


def _frozen_array(x, shape, name):
    arr = np.array(x, dtype=np.float64)
    if arr.shape != shape:
        raise ValidationError(f"{name} must have shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Genome:
    num_states: int
    f: float
    eta: float
    f_tilde: float
    eta_tilde: float
    nu: np.ndarray
    mu: np.ndarray
    nu_tilde: np.ndarray
    mu_tilde: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    oja_multiplier: float = 0.0
    saturation_alpha: Optional[float] = None
    activation_kind: str = "tanh"

    def __post_init__(self):
        k = int(self.num_states)
        if k < 1:
            raise ValidationError(f"num_states must be >= 1, got {self.num_states}")
        object.__setattr__(self, "num_states", k)
        for name in _MATRICES:
            object.__setattr__(self, name, _frozen_array(getattr(self, name), (k, k), name))
        for name in _VECTORS:
            object.__setattr__(self, name, _frozen_array(getattr(self, name), (k,), name))
        for name in _SCALARS:
            value = getattr(self, name)
            if value is None and name == "saturation_alpha":
                continue
            object.__setattr__(self, name, float(value))
        if self.activation_kind not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation_kind!r}")
        self.validate()

    def validate(self):
        for name in FIELD_ORDER:
            value = getattr(self, name)
            if value is None:
                continue
            if not np.all(np.isfinite(value)):
                raise ValidationError(f"genome field {name} is not finite")
        if np.any(self.norm_std <= 0):
            raise ValidationError("norm_std entries must be strictly positive")
        if self.saturation_alpha is not None and self.saturation_alpha <= 0:
            raise ValidationError("saturation_alpha must be positive")

    def replace(self, **changes) -> "Genome":
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, Genome):
            return NotImplemented
        if (self.num_states, self.activation_kind) != (other.num_states, other.activation_kind):
            return False
        for name in FIELD_ORDER:
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True

    __hash__ = None


@dataclass(frozen=True)
class GenomeLayout:
    """How a genome maps to and from a flat parameter vector.

    ``frozen`` names fields that are left out of the vector; on decode they
    are copied from ``defaults``.  The vector length with nothing frozen is
    ``4 + 4k^2 + 2k + 1`` plus one when saturation is enabled.
    """

    num_states: int
    saturation: bool = False
    frozen: frozenset = field(default_factory=frozenset)
    defaults: Optional[Genome] = None
    activation_kind: str = "tanh"
    version: int = LAYOUT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "frozen", frozenset(self.frozen))
        unknown = self.frozen - set(FIELD_ORDER)
        if unknown:
            raise LayoutError(f"unknown frozen fields: {sorted(unknown)}")
        if self.frozen and self.defaults is None:
            raise LayoutError("frozen fields require a defaults genome")
        if self.defaults is not None and self.defaults.num_states != self.num_states:
            raise LayoutError("defaults genome has a different state count")
        if self.activation_kind not in ACTIVATIONS:
            raise LayoutError(f"unknown activation {self.activation_kind!r}")

    def field_size(self, name):
        k = self.num_states
        if name in _MATRICES:
            return k * k
        if name in _VECTORS:
            return k
        return 1

    @property
    def fields(self):
        out = []
        for name in FIELD_ORDER:
            if name == "saturation_alpha" and not self.saturation:
                continue
            if name in self.frozen:
                continue
            out.append(name)
        return tuple(out)

    @property
    def size(self):
        return sum(self.field_size(name) for name in self.fields)

    @classmethod
    def for_genome(cls, genome: Genome, **kwargs) -> "GenomeLayout":
        kwargs.setdefault("saturation", genome.saturation_alpha is not None)
        kwargs.setdefault("activation_kind", genome.activation_kind)
        if kwargs.get("frozen"):
            kwargs.setdefault("defaults", genome)
        return cls(num_states=genome.num_states, **kwargs)


def encode(genome: Genome, layout: GenomeLayout) -> np.ndarray:
    if genome.num_states != layout.num_states:
        raise LayoutError(
            f"genome has {genome.num_states} states, layout expects {layout.num_states}"
        )
    if layout.saturation and genome.saturation_alpha is None:
        raise LayoutError("layout expects a saturation_alpha but the genome has none")
    parts = [np.ravel(np.asarray(getattr(genome, name), dtype=np.float64)) for name in layout.fields]
    return np.concatenate(parts) if parts else np.zeros(0)


def decode(vector, layout: GenomeLayout) -> Genome:
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.size != layout.size:
        raise LayoutError(f"expected a flat vector of length {layout.size}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("genome vector contains non-finite entries")
    k = layout.num_states
    values = {}
    pos = 0
    for name in layout.fields:
        n = layout.field_size(name)
        chunk = v[pos:pos + n]
        pos += n
        if name in _MATRICES:
            values[name] = chunk.reshape(k, k).copy()
        elif name in _VECTORS:
            values[name] = chunk.copy()
        else:
            values[name] = float(chunk[0])
    for name in FIELD_ORDER:
        if name in values:
            continue
        if name == "saturation_alpha" and not layout.saturation:
            values[name] = None
        elif layout.defaults is not None:
            values[name] = getattr(layout.defaults, name)
        else:  # pragma: no cover - guarded by GenomeLayout
            raise LayoutError(f"no value for field {name}")
    return Genome(num_states=k, activation_kind=layout.activation_kind, **values)


def backprop_init(k: int, variant: str = "section31", lr: float = 0.1,
                  activation_kind: str = "sigmoid") -> Genome:
    """Genome under which the inner loop performs gradient descent.

    With ``section31`` and the multiplicative-second-state backward mode the
    network reproduces SGD exactly (state 1 carries activations, state 2
    the error signal).  ``section45`` is the nearby starting point used for
    the ablation runs.

    The injected feedback (+1 at the true class) points along the negative
    loss gradient, so descent needs ``eta_tilde = +lr``.
    """
    if k != 2:
        raise UnsupportedStateCountError(f"backprop genome needs exactly 2 states, got {k}")
    if not lr > 0:
        raise ValidationError(f"lr must be positive, got {lr}")
    if variant not in BACKPROP_VARIANTS:
        raise ValidationError(f"unknown backprop variant {variant!r}")
    nu = np.array([[1.0, 0.0], [1.0, 0.0]])
    if variant == "section31":
        mu = np.array([[0.0, 0.0], [0.0, 1.0]])
        nu_tilde = np.array([[1.0, 0.0], [0.0, 0.0]])
        mu_tilde = np.array([[0.0, 1.0], [0.0, 0.0]])
    else:
        mu = np.eye(2)
        nu_tilde = np.eye(2)
        mu_tilde = np.array([[0.0, 1.0], [1.0, 0.0]])
    return Genome(
        num_states=2,
        f=0.0,
        eta=1.0,
        f_tilde=1.0,
        eta_tilde=float(lr),
        nu=nu,
        mu=mu,
        nu_tilde=nu_tilde,
        mu_tilde=mu_tilde,
        norm_mean=np.zeros(2),
        norm_std=np.ones(2),
        oja_multiplier=0.0,
        activation_kind=activation_kind,
    )


def random_init(k: int, seed: int, scale: float = 0.1, activation_kind: str = "tanh",
                saturation_alpha: Optional[float] = None) -> Genome:
    """Random genome near the stable point (f ~ 0, f_tilde ~ 1)."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not scale > 0:
        raise ValidationError(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    mats = rng.normal(0.0, scale, size=(4, k, k))
    f, eta, f_tilde, eta_tilde = rng.normal(0.0, scale, size=4)
    return Genome(
        num_states=k,
        f=f,
        eta=1.0 + eta,
        f_tilde=1.0 + 0.1 * f_tilde,
        eta_tilde=eta_tilde,
        nu=mats[0],
        mu=mats[1],
        nu_tilde=mats[2],
        mu_tilde=mats[3],
        norm_mean=np.zeros(k),
        norm_std=np.ones(k),
        oja_multiplier=0.0,
        saturation_alpha=saturation_alpha,
        activation_kind=activation_kind,
    )


def zero_update(k: int, activation_kind: str = "tanh") -> Genome:
    """Genome that never changes the synapses (f=f_tilde=1, eta=eta_tilde=0)."""
    eye = np.eye(k)
    return Genome(
        num_states=k, f=1.0, eta=0.0, f_tilde=1.0, eta_tilde=0.0,
        nu=eye, mu=eye, nu_tilde=eye, mu_tilde=eye,
        norm_mean=np.zeros(k), norm_std=np.ones(k),
        activation_kind=activation_kind,
    )


# -- persistence -------------------------------------------------------------

def to_document(genome: Genome, layout: Optional[GenomeLayout] = None) -> dict:
    """Serializable form: layout metadata plus the full flat vector.

    The vector always covers every field (frozen or not) so a file is
    self-contained; the frozen list is kept as metadata.
    """
    full = GenomeLayout.for_genome(genome)
    frozen = sorted(layout.frozen) if layout is not None else []
    return {
        "format": FILE_FORMAT,
        "version": LAYOUT_VERSION,
        "num_states": genome.num_states,
        "activation": genome.activation_kind,
        "saturation": genome.saturation_alpha is not None,
        "frozen": frozen,
        "fields": list(full.fields),
        "vector": [float(x) for x in encode(genome, full)],
    }


def from_document(doc: dict) -> Genome:
    if doc.get("format") != FILE_FORMAT:
        raise LayoutError(f"not a genome document (format={doc.get('format')!r})")
    if doc.get("version") != LAYOUT_VERSION:
        raise LayoutError(f"unsupported genome file version {doc.get('version')!r}")
    layout = GenomeLayout(
        num_states=int(doc["num_states"]),
        saturation=bool(doc["saturation"]),
        activation_kind=doc["activation"],
    )
    if "fields" in doc and tuple(doc["fields"]) != layout.fields:
        raise LayoutError("field list in file does not match the layout")
    return decode(np.array(doc["vector"], dtype=np.float64), layout)


def save_genome(genome: Genome, path, layout: Optional[GenomeLayout] = None):
    text = json.dumps(to_document(genome, layout), indent=2) + "\n"
    Path(path).write_text(text)


def load_genome(path) -> Genome:
    return from_document(json.loads(Path(path).read_text()))
