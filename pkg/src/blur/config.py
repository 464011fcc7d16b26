"""Experiment configuration files (YAML, versioned).

A config describes one experiment: where the genome comes from, the
architecture, the tasks, the inner-loop and ES settings and the per-command
options.  ``ExperimentConfig.to_dict`` produces the canonical form that
``blur echo-config`` prints; parsing that output again gives an identical
structure.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .errors import ConfigurationError
from .genome import ACTIVATIONS, BACKPROP_VARIANTS, Genome, GenomeLayout, backprop_init, load_genome, random_init
from .inner_loop import UnrollConfig
from .meta_es import EsConfig
from .network import BACKWARD_MODES, STABILIZERS, Architecture
from .tasks import (
    BOOLEAN_OPS,
    Task,
    blobs_task,
    boolean_task,
    class_subset,
    dataset_task,
    idx_load,
    moons_task,
    preprocess,
)

CONFIG_VERSION = 1
MNIST_ENV = "BLUR_MNIST_DIR"
# a 5000-image MNIST subset shipped with the repository (see data/mnist5k/README.md)
BUNDLED_MNIST = Path(__file__).resolve().parents[2] / "data" / "mnist5k"
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "eval_images": "t10k-images-idx3-ubyte",
    "eval_labels": "t10k-labels-idx1-ubyte",
}


class ConfigError(ConfigurationError):
    """Invalid config file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        where = f"{path or '<config>'}" + (f":{line}" if line is not None else "")
        super().__init__(f"{where}: {message}")
        self.line = line


# -- sections ----------------------------------------------------------------------

@dataclass
class GenomeSpec:
    source: str = "random"            # random | backprop | file
    path: Optional[str] = None
    num_states: int = 2
    scale: float = 0.1
    activation: str = "tanh"
    variant: str = "section31"
    lr: float = 0.1
    oja_multiplier: Optional[float] = None
    saturation_alpha: Optional[float] = None
    frozen: List[str] = field(default_factory=list)
    seed: Optional[int] = None        # random init seed, defaults to the global seed

    def validate(self, base: Path):
        if self.source not in ("random", "backprop", "file"):
            raise ValueError(f"genome.source must be random, backprop or file, not {self.source!r}")
        if self.source == "file":
            if not self.path:
                raise ValueError("genome.path is required when genome.source is file")
            if not resolve(base, self.path).exists():
                raise ValueError(f"genome file {self.path} does not exist")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.variant not in BACKPROP_VARIANTS:
            raise ValueError(f"unknown backprop variant {self.variant!r}")
        if self.num_states < 1:
            raise ValueError("genome.num_states must be >= 1")

    def build(self, seed: int, base: Path) -> Genome:
        if self.source == "file":
            return load_genome(resolve(base, self.path))
        if self.source == "backprop":
            g = backprop_init(self.num_states, self.variant, self.lr, self.activation)
        else:
            g = random_init(self.num_states, self.seed if self.seed is not None else seed,
                            self.scale, self.activation, self.saturation_alpha)
        if self.oja_multiplier is not None:
            g = g.replace(oja_multiplier=float(self.oja_multiplier))
        return g

    def layout(self, genome: Genome) -> GenomeLayout:
        return GenomeLayout.for_genome(genome, frozen=frozenset(self.frozen))


@dataclass
class ArchSpec:
    hidden: List[int] = field(default_factory=lambda: [20])
    symmetric_synapses: bool = True
    multistate_synapses: bool = True
    backward_mode: str = "additive"
    normalize_activations: bool = True
    synapse_stabilizer: str = "oja"

    def validate(self, base):
        if self.backward_mode not in BACKWARD_MODES:
            raise ValueError(f"unknown backward_mode {self.backward_mode!r}")
        if self.synapse_stabilizer not in STABILIZERS:
            raise ValueError(f"unknown synapse_stabilizer {self.synapse_stabilizer!r}")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden layer sizes must be positive")

    def build(self, input_dim=2, num_classes=2) -> Architecture:
        return Architecture((input_dim, *self.hidden, num_classes), self.symmetric_synapses,
                            self.multistate_synapses, self.backward_mode,
                            self.normalize_activations, self.synapse_stabilizer)


TASK_KINDS = ("boolean", "moons", "blobs", "mnist", "idx")


@dataclass
class TaskSpec:
    kind: str
    op: Optional[str] = None
    noise: float = 0.1
    num_classes: int = 5
    cluster_std: float = 0.1
    centers_seed: int = 0
    name: Optional[str] = None
    crop: int = 28
    resize: int = 14
    classes: Optional[List[int]] = None
    dir: Optional[str] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    eval_images: Optional[str] = None
    eval_labels: Optional[str] = None

    def validate(self, base):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r} (expected one of {', '.join(TASK_KINDS)})")
        if self.kind == "boolean" and self.op not in BOOLEAN_OPS:
            raise ValueError(f"boolean task needs op in {sorted(BOOLEAN_OPS)}, got {self.op!r}")
        if self.kind in ("mnist", "idx"):
            for path in self._paths(base).values():
                if path is not None and not path.exists():
                    raise ValueError(f"data file {path} does not exist")
            if self.kind == "idx" and self.train_images is None:
                raise ValueError("idx task needs train_images and train_labels")

    def _paths(self, base):
        if self.kind == "idx":
            return {k: (resolve(base, getattr(self, k)) if getattr(self, k) else None)
                    for k in MNIST_FILES}
        root = Path(self.dir) if self.dir else Path(os.environ.get(MNIST_ENV, BUNDLED_MNIST))
        root = resolve(base, root)
        out = {}
        for key, stem in MNIST_FILES.items():
            plain, gz = root / stem, root / (stem + ".gz")
            out[key] = plain if plain.exists() else gz
        return out

    @property
    def label(self):
        if self.name:
            return self.name
        if self.kind == "boolean":
            return self.op
        if self.kind == "blobs":
            return f"blobs{self.num_classes}"
        if self.kind == "moons":
            return "moons"
        suffix = "" if self.classes is None else "_" + "".join(str(c) for c in self.classes)
        return f"{self.kind}{self.resize}{suffix}"

    def build(self, base: Path) -> Task:
        if self.kind == "boolean":
            t = boolean_task(self.op, self.noise)
        elif self.kind == "moons":
            t = moons_task(self.noise)
        elif self.kind == "blobs":
            t = blobs_task(self.num_classes, self.cluster_std, self.centers_seed)
        else:
            paths = self._paths(base)
            train = preprocess(idx_load(paths["train_images"], paths["train_labels"]),
                               self.crop, self.resize)
            evals = None
            if paths["eval_images"] is not None and paths["eval_labels"] is not None:
                evals = preprocess(idx_load(paths["eval_images"], paths["eval_labels"]),
                                   self.crop, self.resize)
            if self.classes is not None:
                train = class_subset(train, self.classes)
                evals = class_subset(evals, self.classes) if evals is not None else None
            t = dataset_task(self.label, train, evals)
        t.name = self.label
        return t


@dataclass
class UnrollSpec:
    unroll_steps: int = 10
    eval_batches: int = 20
    batch_size: int = 128

    def validate(self, base):
        UnrollConfig(self.unroll_steps, self.eval_batches, self.batch_size)

    def build(self, seed=0) -> UnrollConfig:
        return UnrollConfig(self.unroll_steps, self.eval_batches, self.batch_size, seed, seed)


@dataclass
class EsSpec:
    population: Optional[int] = None
    parents: Optional[int] = None
    sigma0: float = 0.1
    generations: int = 100
    fitness: str = "train"
    curriculum_increment: int = 5
    curriculum_period: Optional[float] = None   # null = constant unroll length
    confirm_best: bool = True
    snapshot_every: int = 10
    dtype: str = "float64"

    def validate(self, base):
        self.build(UnrollConfig(), 0, 1)
        if self.snapshot_every < 1:
            raise ValueError("es.snapshot_every must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("es.dtype must be float32 or float64")

    def build(self, unroll: UnrollConfig, seed: int, threads: int) -> EsConfig:
        period = math.inf if self.curriculum_period is None else float(self.curriculum_period)
        return EsConfig(self.population, self.parents, self.sigma0, self.generations, unroll,
                        self.fitness, self.curriculum_increment, period, self.confirm_best,
                        seed, threads)


@dataclass
class EvalSpec:
    unrolls: List[int] = field(default_factory=lambda: [1, 5, 10])
    episodes: int = 1
    input_scale: float = 1.0

    def validate(self, base):
        if not self.unrolls or any(u < 0 for u in self.unrolls):
            raise ValueError("eval.unrolls must be a non-empty list of non-negative integers")
        if self.episodes < 1:
            raise ValueError("eval.episodes must be positive")


@dataclass
class SgdSpec:
    learning_rates: List[float] = field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0])
    momentum: float = 0.0
    steps: int = 50
    activation: str = "sigmoid"
    loss: str = "softmax_ce"
    eval_every: int = 1

    def validate(self, base):
        if not self.learning_rates:
            raise ValueError("sgd.learning_rates must not be empty")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.steps < 0 or self.eval_every < 1:
            raise ValueError("sgd.steps must be >= 0 and sgd.eval_every >= 1")


@dataclass
class AnalysisSpec:
    task: int = 0                 # index into tasks
    batch_size: int = 128
    h: float = 1e-5
    probes: int = 100
    tol: float = 1e-8
    check_tol: float = 1e-6
    synapse_seed: Optional[int] = None

    def validate(self, base):
        if not 1e-6 <= self.h <= 1e-3:
            raise ValueError("analysis.h must lie in [1e-6, 1e-3]")
        if self.probes < 0:
            raise ValueError("analysis.probes must be >= 0")


SECTIONS = {
    "genome": GenomeSpec,
    "architecture": ArchSpec,
    "unroll": UnrollSpec,
    "es": EsSpec,
    "eval": EvalSpec,
    "sgd": SgdSpec,
    "analysis": AnalysisSpec,
}


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: Optional[str] = None
    genome: GenomeSpec = field(default_factory=GenomeSpec)
    architecture: ArchSpec = field(default_factory=ArchSpec)
    tasks: List[TaskSpec] = field(default_factory=lambda: [TaskSpec("boolean", op="xor")])
    eval_tasks: Optional[List[TaskSpec]] = None
    unroll: UnrollSpec = field(default_factory=UnrollSpec)
    es: EsSpec = field(default_factory=EsSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    sgd: SgdSpec = field(default_factory=SgdSpec)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    base_dir: str = field(default=".", repr=False, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @property
    def base(self) -> Path:
        return Path(self.base_dir)

    def build_tasks(self, which="tasks") -> List[Task]:
        specs = self.tasks if which == "tasks" or self.eval_tasks is None else self.eval_tasks
        return [s.build(self.base) for s in specs]

    def build_genome(self) -> Genome:
        return self.genome.build(self.seed, self.base)

    def portable(self) -> "ExperimentConfig":
        """Copy whose file references are absolute, so it loads from any directory."""
        cfg = copy.deepcopy(self)
        if cfg.genome.path:
            cfg.genome.path = str(resolve(self.base, cfg.genome.path))
        for spec in cfg.tasks + (cfg.eval_tasks or []):
            for key in ("dir", *MNIST_FILES):
                if getattr(spec, key):
                    setattr(spec, key, str(resolve(self.base, getattr(spec, key))))
        return cfg


def resolve(base: Path, path) -> Path:
    p = Path(path).expanduser()
    return p if p.is_absolute() else Path(base) / p


# -- parsing -----------------------------------------------------------------------

def _key_lines(text):
    """Map dotted key paths to 1-based line numbers using the YAML node tree."""
    lines = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[path] = k.start_mark.line + 1
                walk(v, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                path = f"{prefix}[{i}]"
                lines[path] = v.start_mark.line + 1
                walk(v, path)

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return lines


def _build(cls, data, where, lines, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping", lines.get(where), path)
    names = {f.name for f in fields(cls)} - {"base_dir"}
    for key in data:
        if key not in names:
            key_path = f"{where}.{key}" if where else str(key)
            raise ConfigError(f"unknown key {key_path!r}", lines.get(key_path), path)
    try:
        return cls(**data)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}", lines.get(where), path) from err


def from_dict(data: Dict[str, Any], text: str = "", path=None, base_dir=".") -> ExperimentConfig:
    lines = _key_lines(text) if text else {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, path)
    version = data.get("version")
    if version is None:
        raise ConfigError("missing 'version' field", 1, path)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})",
                          lines.get("version"), path)
    top = {f.name for f in fields(ExperimentConfig)} - {"base_dir"}
    for key in data:
        if key not in top:
            raise ConfigError(f"unknown key {key!r}", lines.get(str(key)), path)
    kwargs = {k: data[k] for k in ("version", "seed", "output_dir") if k in data}
    for name, cls in SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data[name], name, lines, path)
    for name in ("tasks", "eval_tasks"):
        if name in data and data[name] is not None:
            if not isinstance(data[name], list) or not data[name]:
                raise ConfigError(f"{name} must be a non-empty list", lines.get(name), path)
            kwargs[name] = [_build(TaskSpec, t, f"{name}[{i}]", lines, path)
                            for i, t in enumerate(data[name])]
    cfg = ExperimentConfig(**kwargs, base_dir=str(base_dir))
    _validate(cfg, lines, path)
    return cfg


def _validate(cfg, lines, path):
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer", lines.get("seed"), path)
    checks = [(name, getattr(cfg, name)) for name in SECTIONS]
    checks += [(f"tasks[{i}]", t) for i, t in enumerate(cfg.tasks)]
    checks += [(f"eval_tasks[{i}]", t) for i, t in enumerate(cfg.eval_tasks or [])]
    for where, section in checks:
        try:
            section.validate(cfg.base)
        except (ValueError, ConfigurationError) as err:
            raise ConfigError(str(err), lines.get(where), path) from err
    if cfg.genome.source == "file":
        k = cfg.build_genome().num_states
    else:
        k = cfg.genome.num_states
    try:
        cfg.architecture.build().check_states(k)
    except ConfigurationError as err:
        raise ConfigError(str(err), lines.get("architecture"), path) from err
    if cfg.genome.source == "backprop" and k != 2:
        raise ConfigError("backprop genomes need num_states = 2", lines.get("genome"), path)
    if not 0 <= cfg.analysis.task < len(cfg.tasks):
        raise ConfigError("analysis.task is out of range", lines.get("analysis.task"), path)


def loads(text: str, path=None, base_dir=".") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(err, "problem", None) or str(err)
        raise ConfigError(f"YAML syntax error: {problem}", line, path) from err
    return from_dict(data, text, path, base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err.strerror}", None, path) from err
    return loads(text, path, path.parent)


def dumps(cfg: ExperimentConfig) -> str:
    return cfg.dump()
