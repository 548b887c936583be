"""Hybrid-parallel training of layered neural networks.

Layers of a :class:`~hybridnet.graph.ModelGraph` are split into contiguous
partitions, each partition can be replicated, and every mini-batch can be
pipelined in micro-batches. Every combination computes the same updates as
plain single-process SGD on the effective batch.
"""

from .graph import ModelGraph, build_model_from_spec, forward_seq, backward_seq
from .partition import PartitionPlan, partition
from .trainer import TrainConfig, fit, fit_sequential, run_rank
from .zoo import load_config

__version__ = "0.1.0"

__all__ = [
    "ModelGraph", "PartitionPlan", "TrainConfig", "backward_seq", "build_model_from_spec",
    "fit", "fit_sequential", "forward_seq", "load_config", "partition", "run_rank",
]
