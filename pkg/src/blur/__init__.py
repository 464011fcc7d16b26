"""Bidirectional learned update rules: multi-state networks whose learning rule is a genome."""

from .errors import (
    BlurError,
    ConfigurationError,
    DataError,
    LayoutError,
    NumericOverflowError,
    UnsupportedStateCountError,
    ValidationError,
)
from .genome import Genome, GenomeLayout, backprop_init, decode, encode, load_genome, random_init, save_genome
from .inner_loop import FitnessReport, UnrollConfig, run_episode, sgd_reference
from .meta_es import EsConfig, EsHistory, accuracy_fitness, cma_es_optimize, curriculum
from .network import Architecture, SynapseSet, init_synapses

__version__ = "0.1.0"
