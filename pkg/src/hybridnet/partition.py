"""Model partitioning and cross-partition dependency lists.

Partitions are contiguous ranges of the topological layer order. For every
partition we record which local layers send activations forward ("F") and
which receive them ("B"), and derive the order in which messages must be
posted so that no blocking send can wait on a receive that will never be
issued, even with a one-message transport buffer.

Per phase every partition receives all of its inputs, computes, then sends
all of its outputs. Forward receives are ordered by source partition
ascending, forward sends by destination partition ascending; the backward
pass mirrors both (descending). Within one peer pair both sides use the same
edge order, so each channel is drained in the order it is filled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .graph import ModelGraph, activation_size

# Tag layout: edge key (src * L + dst) times STAGE_STRIDE plus the stage.
STAGE_STRIDE = 1 << 20


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionPlan:
    num_partitions: int
    num_replicas: int
    assignment: tuple[int, ...]  # layer id -> partition index

    def __post_init__(self):
        a = self.assignment
        if self.num_partitions < 1 or self.num_replicas < 1:
            raise PartitionError("partition and replica counts must be positive")
        if any(x > y for x, y in zip(a, a[1:])):
            raise PartitionError("assignment must be non-decreasing in layer id")
        if set(a) != set(range(self.num_partitions)):
            raise PartitionError("every partition must own at least one layer")

    @property
    def world_size(self) -> int:
        return self.num_partitions * self.num_replicas

    def rank_of(self, replica: int, partition: int) -> int:
        return replica * self.num_partitions + partition

    def coords(self, rank: int) -> tuple[int, int]:
        """``(replica, partition)`` of ``rank``."""
        return divmod(rank, self.num_partitions)

    def local_layers(self, partition: int) -> list[int]:
        return [i for i, p in enumerate(self.assignment) if p == partition]

    def with_replicas(self, num_replicas: int) -> "PartitionPlan":
        return PartitionPlan(self.num_partitions, num_replicas, self.assignment)


@dataclass(frozen=True)
class CrossEdge:
    src_layer: int
    dst_layer: int
    src_part: int
    dst_part: int
    edge_key: int

    def tag(self, stage: int = 0) -> int:
        return self.edge_key * STAGE_STRIDE + stage


@dataclass
class DependencyLists:
    """Cross-partition communication plan for one partition.

    ``fwd[layer]`` lists the edges along which local ``layer`` sends its
    output; ``bwd[layer]`` lists the edges along which it receives a
    remote input. Both are keyed by local layer id, one inner list per layer.
    """

    partition: int
    layers: list[int]
    fwd: dict[int, list[CrossEdge]] = field(default_factory=dict)
    bwd: dict[int, list[CrossEdge]] = field(default_factory=dict)

    def _all(self, table) -> list[CrossEdge]:
        return [e for i in self.layers for e in table.get(i, ())]

    def forward_sends(self) -> list[CrossEdge]:
        return sorted(self._all(self.fwd), key=lambda e: (e.dst_part, e.dst_layer, e.src_layer))

    def forward_recvs(self) -> list[CrossEdge]:
        return sorted(self._all(self.bwd), key=lambda e: (e.src_part, e.dst_layer, e.src_layer))

    def backward_sends(self) -> list[CrossEdge]:
        """Partial errors to producers, nearest (highest) partition first."""
        return sorted(self._all(self.bwd), key=lambda e: (-e.src_part, e.dst_layer, e.src_layer))

    def backward_recvs(self) -> list[CrossEdge]:
        """Partial errors from consumers, farthest (highest) partition first."""
        return sorted(self._all(self.fwd), key=lambda e: (-e.dst_part, e.dst_layer, e.src_layer))

    def fwd_peers(self) -> list[int]:
        return _distinct(e.dst_part for e in self.forward_sends())

    def bwd_peers(self) -> list[int]:
        return _distinct(e.src_part for e in self.forward_recvs())


def _distinct(xs) -> list[int]:
    out: list[int] = []
    for x in xs:
        if not out or out[-1] != x:
            out.append(x)
    return out


CostModel = Union[str, Callable[[ModelGraph, int], float]]


def layer_costs(model: ModelGraph, cost_model: CostModel = "params+activations") -> list[float]:
    """Per-layer balancing weights; a layer's ``cost`` field always wins."""
    if callable(cost_model):
        fn = cost_model
    elif cost_model == "params+activations":
        fn = lambda m, i: m[i].num_params() + activation_size(m, i)
    elif cost_model == "params":
        fn = lambda m, i: m[i].num_params()
    elif cost_model == "uniform":
        fn = lambda m, i: 1.0
    else:
        raise PartitionError(f"unknown cost model {cost_model!r}")
    return [float(n.cost) if n.cost is not None else float(fn(model, n.id)) for n in model.layers]


def partition(model: ModelGraph, num_partitions: int, num_replicas: int = 1,
              cost_model: CostModel = "params+activations",
              costs: Optional[list[float]] = None) -> PartitionPlan:
    """Split the layers into ``num_partitions`` contiguous, cost-balanced ranges.

    Each layer goes to the partition containing the midpoint of its slice
    of the cumulative cost, clamped so that no partition is skipped or
    left empty. With uniform costs, layer ``i`` of ``n`` lands in
    ``floor((i + 0.5) * P / n)``.
    """
    n = len(model)
    P = num_partitions
    if not 1 <= P <= n:
        raise PartitionError(f"cannot split {n} layers into {P} partitions")
    if costs is None:
        costs = layer_costs(model, cost_model)
    total = sum(costs)
    assignment = []
    prefix = 0.0
    prev = 0
    for i, c in enumerate(costs):
        if total > 0:
            raw = math.floor(P * (prefix + c / 2) / total)
        else:
            raw = math.floor(P * (i + 0.5) / n)
        prefix += c
        lo = max(prev, P - (n - i))
        hi = prev + 1 if i > 0 else 0
        part = min(max(raw, lo), hi)
        assignment.append(part)
        prev = part
    return PartitionPlan(P, num_replicas, tuple(assignment))


def cross_edges(model: ModelGraph, plan: PartitionPlan) -> list[CrossEdge]:
    L = len(model)
    a = plan.assignment
    return [CrossEdge(s, d, a[s], a[d], s * L + d)
            for s, d in model.edges() if a[s] != a[d]]


def build_dependency_lists(model: ModelGraph, plan: PartitionPlan) -> list[DependencyLists]:
    """One :class:`DependencyLists` per partition, indexed by partition."""
    deps = [DependencyLists(p, plan.local_layers(p)) for p in range(plan.num_partitions)]
    for e in cross_edges(model, plan):
        deps[e.src_part].fwd.setdefault(e.src_layer, []).append(e)
        deps[e.dst_part].bwd.setdefault(e.dst_layer, []).append(e)
    for d in deps:
        for table in (d.fwd, d.bwd):
            for lst in table.values():
                lst.sort(key=lambda e: (e.dst_part, e.src_part, e.dst_layer, e.src_layer))
    return deps


def replica_groups(plan: PartitionPlan) -> list[list[int]]:
    """Ranks holding partition ``p`` across all replicas, for each ``p``."""
    return [[plan.rank_of(r, p) for r in range(plan.num_replicas)]
            for p in range(plan.num_partitions)]


def dump(model: ModelGraph, plan: PartitionPlan) -> str:
    """Diagnostic text: layer assignment, cut edges, and per-partition message order."""
    lines = [f"partitions={plan.num_partitions} replicas={plan.num_replicas} layers={len(model)}"]
    deps = build_dependency_lists(model, plan)
    for p in range(plan.num_partitions):
        ids = plan.local_layers(p)
        lines.append(f"partition {p}: layers {ids[0]}..{ids[-1]}")
        for i in ids:
            n = model[i]
            ins = ",".join(map(str, n.inputs)) or "-"
            lines.append(f"  {i:3d} {n.kind:<11s} {n.name:<12s} <- {ins}")
        d = deps[p]
        for label, edges in (("fwd recv", d.forward_recvs()), ("fwd send", d.forward_sends()),
                             ("bwd recv", d.backward_recvs()), ("bwd send", d.backward_sends())):
            if edges:
                # @peer is the partition on the other end of the edge
                lines.append(f"  {label}: " + " ".join(
                    f"{e.src_layer}->{e.dst_layer}@{e.dst_part if e.src_part == p else e.src_part}"
                    for e in edges))
    lines.append("cut edges:")
    for e in cross_edges(model, plan):
        lines.append(f"  {e.src_layer}->{e.dst_layer} part {e.src_part}->{e.dst_part} "
                     f"tag {e.tag(0)}")
    return "\n".join(lines)
