"""Gated parametric spiking neurons with surrogate-gradient BPTT, from scratch on numpy."""

from .autodiff import ActivationMode, Value
from .checkpoint import CheckpointBundle
from .network import Network, parse_architecture
from .neurons import NeuronConfig, NeuronKind
from .training import LossMode, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ActivationMode", "CheckpointBundle", "LossMode", "Network", "NeuronConfig", "NeuronKind",
    "TrainConfig", "Value", "evaluate", "parse_architecture", "train",
]
