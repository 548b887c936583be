"""Distributed training: model, data and hybrid parallelism over any transport.

Every rank owns one partition of one replica (``rank = replica * P +
partition``) and runs the same sequence of phases each step::

    forward(stage 0) .. forward(stage S-1)       # fill
    backward(stage 0) .. backward(stage S-1)     # drain
    gradient allreduce over the partition's replica group
    SGD update, loss gathered on rank 0

Within a phase a partition first receives every boundary input, then
computes, then sends, in the orders given by its dependency lists.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .comm import CommError, Endpoint, MessageKind, RankGroup, reduce_in_order, run_ranks
from .data import Dataset
from .graph import (GradientSet, ModelGraph, backward_seq, forward_layers, backward_layers,
                    forward_seq, sgd_apply)
from .partition import (PartitionPlan, build_dependency_lists, partition, replica_groups)

log = logging.getLogger(__name__)

STRATEGIES = ("data", "model", "hybrid")
_LOSS_TAG = 1 << 60
_GATHER_TAG = (1 << 60) + (1 << 40)
_EVAL_TAG = (1 << 60) + (1 << 41)

Act = MessageKind.Activation
Err = MessageKind.PartialError
GC = MessageKind.GradientContribution


class ConfigError(ValueError):
    pass


class DataExhausted(ValueError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "model"
    num_partitions: int = 1
    num_replicas: int = 1
    pipeline_stages: int = 1
    batch_size: int = 32
    epochs: int = 1
    lr_schedule: list[tuple[int, float]] = field(default_factory=lambda: [(0, 0.1)])
    seed: int = 0
    async_allreduce: bool = False
    max_steps: Optional[int] = None
    cost_model: str = "params+activations"

    def validate(self) -> "TrainConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("num_partitions", "num_replicas", "pipeline_stages", "batch_size", "epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.strategy == "data" and self.num_partitions != 1:
            raise ConfigError("num_partitions: data parallelism needs exactly 1 partition")
        if self.strategy == "model" and self.num_replicas != 1:
            raise ConfigError("num_replicas: model parallelism needs exactly 1 replica")
        if self.pipeline_stages > self.batch_size:
            raise ConfigError(f"pipeline_stages: {self.pipeline_stages} exceeds batch_size {self.batch_size}")
        if self.batch_size % self.pipeline_stages:
            raise ConfigError(f"pipeline_stages: {self.pipeline_stages} does not divide "
                              f"batch_size {self.batch_size}")
        if not self.lr_schedule:
            raise ConfigError("lr_schedule: must not be empty")
        epochs = [e for e, _ in self.lr_schedule]
        if epochs[0] != 0 or any(a >= b for a, b in zip(epochs, epochs[1:])):
            raise ConfigError("lr_schedule: epochs must start at 0 and strictly increase")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ConfigError("lr_schedule: learning rates must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps: must be >= 1")
        return self

    @property
    def world_size(self) -> int:
        return self.num_partitions * self.num_replicas

    @property
    def effective_batch_size(self) -> int:
        if self.strategy == "model":
            return self.batch_size
        return self.batch_size * self.num_replicas

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for e, v in self.lr_schedule:
            if e <= epoch:
                lr = v
        return lr


@dataclass
class StepMetrics:
    step: int
    epoch: int
    loss: float
    images_per_sec: float
    wall_ms: float


@dataclass(frozen=True)
class PipelineSchedule:
    micro_batches: tuple[tuple[int, int], ...]

    @classmethod
    def split(cls, batch_size: int, stages: int) -> "PipelineSchedule":
        if stages < 1 or batch_size % stages:
            raise ConfigError(f"pipeline_stages: {stages} does not divide batch_size {batch_size}")
        size = batch_size // stages
        return cls(tuple((s * size, (s + 1) * size) for s in range(stages)))

    @property
    def stages(self) -> int:
        return len(self.micro_batches)


def iter_steps(n: int, config: TrainConfig) -> Iterator[tuple[int, int, np.ndarray]]:
    """Yield ``(step, epoch, row indices of the effective batch)``.

    Rows are reshuffled every epoch from ``(seed, epoch)``; a trailing
    partial batch is dropped.
    """
    ebs = config.effective_batch_size
    per_epoch = n // ebs
    if per_epoch == 0:
        raise DataExhausted(f"{n} training rows cannot fill one effective batch of {ebs}")
    step = 0
    for epoch in range(config.epochs):
        perm = np.random.default_rng((config.seed, epoch)).permutation(n)
        for k in range(per_epoch):
            if config.max_steps is not None and step >= config.max_steps:
                return
            yield step, epoch, perm[k * ebs:(k + 1) * ebs]
            step += 1


def _context(err: CommError, where: str) -> CommError:
    return type(err)(f"{where}: {err}")


class PartitionState:
    """The slice of a distributed model owned by one rank."""

    def __init__(self, model: ModelGraph, plan: PartitionPlan, endpoint: Endpoint,
                 deps=None):
        self.model = model
        self.plan = plan
        self.ep = endpoint
        self.replica, self.partition = plan.coords(endpoint.rank)
        if deps is None:
            deps = build_dependency_lists(model, plan)
        self.deps = deps[self.partition]
        self.local = self.deps.layers
        self.param_ids = [i for i in self.local if model[i].has_params]
        self.owns_input = model.input_id in self.local
        self.owns_output = model.output_id in self.local
        self.group = RankGroup(tuple(replica_groups(plan)[self.partition]))
        self._acts: dict[int, dict[int, np.ndarray]] = {}
        self._logit_grads: dict[int, np.ndarray] = {}

    def rank_of(self, partition: int) -> int:
        return self.plan.rank_of(self.replica, partition)

    # -- phases ---------------------------------------------------------

    def distributed_forward(self, stage: int, x: Optional[np.ndarray] = None,
                            labels: Optional[np.ndarray] = None) -> Optional[float]:
        """Run the local layers for one micro-batch; returns the loss on the sink partition."""
        acts: dict[int, np.ndarray] = {}
        if self.owns_input:
            acts[self.model.input_id] = x
        for e in self.deps.forward_recvs():
            try:
                acts[e.src_layer] = self.ep.recv_tensor(self.rank_of(e.src_part), Act, e.tag(stage))
            except CommError as err:
                raise _context(err, f"partition {self.partition} layer {e.dst_layer} "
                                    f"tag {e.tag(stage)}") from err
        loss, grad = forward_layers(self.model, self.local, acts, labels)
        for e in self.deps.forward_sends():
            try:
                self.ep.send_tensor(self.rank_of(e.dst_part), Act, e.tag(stage), acts[e.src_layer])
            except CommError as err:
                raise _context(err, f"partition {self.partition} layer {e.src_layer} "
                                    f"tag {e.tag(stage)}") from err
        self._acts[stage] = acts
        if grad is not None:
            self._logit_grads[stage] = grad
        return loss

    def distributed_backward(self, stage: int, on_layer_done: Optional[Callable] = None
                             ) -> GradientSet:
        """Back-propagate one micro-batch through the local layers.

        Partial errors from consumer partitions are received first and summed
        per producer in descending consumer order, exactly as the
        single-process pass would accumulate them.
        """
        acts = self._acts.pop(stage, None)
        if acts is None:
            raise CommError(f"partition {self.partition}: no cached forward for stage {stage}")
        upstream: dict[int, np.ndarray] = {}
        if self.owns_output:
            upstream[self.model.output_id] = self._logit_grads.pop(stage)
        received = []
        for e in self.deps.backward_recvs():
            try:
                g = self.ep.recv_tensor(self.rank_of(e.dst_part), Err, e.tag(stage))
            except CommError as err:
                raise _context(err, f"partition {self.partition} layer {e.src_layer} "
                                    f"tag {e.tag(stage)}") from err
            received.append((e, g))
        for e, g in sorted(received, key=lambda eg: -eg[0].dst_layer):
            prev = upstream.get(e.src_layer)
            upstream[e.src_layer] = g if prev is None else prev + g
        grads, edge_errors = backward_layers(self.model, self.local, acts, upstream,
                                             on_layer_done=on_layer_done)
        for e in self.deps.backward_sends():
            try:
                self.ep.send_tensor(self.rank_of(e.src_part), Err, e.tag(stage),
                                    edge_errors[(e.src_layer, e.dst_layer)])
            except CommError as err:
                raise _context(err, f"partition {self.partition} layer {e.dst_layer} "
                                    f"tag {e.tag(stage)}") from err
        return grads

    def pipeline_step(self, x: Optional[np.ndarray], labels: Optional[np.ndarray],
                      batch_size: int, stages: int = 1, on_grad_final: Optional[Callable] = None
                      ) -> tuple[GradientSet, Optional[float]]:
        """Fill-drain over ``stages`` equal micro-batches.

        Returns the micro-batch-size-weighted average of the stage gradients
        and, on the sink partition, the weighted average of stage losses.
        ``on_grad_final(layer, (dW, db))`` fires as each layer's gradient is
        finalised during the last backward stage.
        """
        rows = batch_size
        sched = PipelineSchedule.split(rows, stages)
        loss = None
        for s, (lo, hi) in enumerate(sched.micro_batches):
            ls = self.distributed_forward(s, None if x is None else x[lo:hi],
                                          None if labels is None else labels[lo:hi])
            if ls is not None:
                w = (hi - lo) / rows
                loss = w * ls if loss is None else loss + w * ls
        acc: GradientSet = {}
        last = sched.stages - 1
        for s, (lo, hi) in enumerate(sched.micro_batches):
            w = (hi - lo) / rows

            def merge(i, g, s=s, w=w):
                dW, db = g
                if i in acc:
                    acc[i] = (acc[i][0] + w * dW, acc[i][1] + w * db)
                else:
                    acc[i] = (w * dW, w * db)
                if s == last and on_grad_final is not None:
                    on_grad_final(i, acc[i])

            self.distributed_backward(s, on_layer_done=merge)
        return acc, loss

    def replica_sync(self, grads: GradientSet, handles: Optional[dict[int, tuple[Future, Future]]] = None
                     ) -> GradientSet:
        """Mean-allreduce every local gradient over this partition's replica group.

        With ``handles`` (from :meth:`start_sync`), waits for the reductions
        already in flight instead of starting new ones.
        """
        out: GradientSet = {}
        for i in sorted(grads):
            if handles is not None:
                fw, fb = handles[i]
                out[i] = (fw.result(), fb.result())
            else:
                dW, db = grads[i]
                out[i] = (self.ep.allreduce(self.group, dW, "mean"),
                          self.ep.allreduce(self.group, db, "mean"))
        return out

    def start_sync(self, handles: dict) -> Callable:
        def start(i, g):
            handles[i] = (self.ep.start_allreduce(self.group, g[0], "mean"),
                          self.ep.start_allreduce(self.group, g[1], "mean"))
        return start

    def train_step(self, x, labels, batch_size: int, stages: int, lr: float,
                   async_allreduce: bool = False) -> Optional[float]:
        handles: Optional[dict] = {} if async_allreduce else None
        hook = self.start_sync(handles) if handles is not None else None
        grads, loss = self.pipeline_step(x, labels, batch_size, stages, on_grad_final=hook)
        grads = self.replica_sync(grads, handles)
        sgd_apply(self.model, grads, lr)
        return self.gather_loss(loss)

    # -- coordination with rank 0 ---------------------------------------

    def _sink_rank(self, replica: int) -> int:
        return self.plan.rank_of(replica, self.plan.assignment[self.model.output_id])

    def gather_loss(self, loss: Optional[float]) -> Optional[float]:
        """Mean of the replicas' losses, on rank 0 only."""
        if self.ep.rank == 0:
            parts = []
            for r in range(self.plan.num_replicas):
                src = self._sink_rank(r)
                if src == 0:
                    parts.append(np.array([loss]))
                else:
                    parts.append(self.ep.recv_tensor(src, GC, _LOSS_TAG))
            return float(reduce_in_order(parts, "mean")[0])
        if self.owns_output:
            self.ep.send_tensor(0, GC, _LOSS_TAG, np.array([loss]))
        return None

    def sync_initial_weights(self) -> None:
        root = self.plan.rank_of(0, self.partition)
        for i in self.param_ids:
            n = self.model[i]
            n.W = self.ep.broadcast(self.group, root, n.W)
            n.b = self.ep.broadcast(self.group, root, n.b)

    def gather_model(self) -> Optional[ModelGraph]:
        """Collect replica 0's parameters on rank 0 (other ranks return None)."""
        if self.replica != 0:
            return None
        if self.ep.rank != 0:
            for i in self.param_ids:
                self.ep.send_tensor(0, GC, _GATHER_TAG + 2 * i, self.model[i].W)
                self.ep.send_tensor(0, GC, _GATHER_TAG + 2 * i + 1, self.model[i].b)
            return None
        model = self.model.copy()
        for p in range(1, self.plan.num_partitions):
            src = self.plan.rank_of(0, p)
            for i in self.plan.local_layers(p):
                if model[i].has_params:
                    model[i].W = self.ep.recv_tensor(src, GC, _GATHER_TAG + 2 * i).copy()
                    model[i].b = self.ep.recv_tensor(src, GC, _GATHER_TAG + 2 * i + 1).copy()
        return model

    def evaluate(self, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> Optional[float]:
        """Forward-only accuracy over ``(x, y)`` on replica 0; the result lands on rank 0."""
        if self.replica != 0:
            return None
        correct = 0
        for lo in range(0, len(x), batch_size):
            self.distributed_forward(0, x[lo:lo + batch_size] if self.owns_input else None)
            acts = self._acts.pop(0)
            if self.owns_output:
                pred = np.argmax(acts[self.model.output_id], axis=1)
                correct += int(np.sum(pred == np.argmax(y[lo:lo + batch_size], axis=1)))
        sink = self._sink_rank(0)
        if self.ep.rank == 0:
            if sink != 0:
                correct = int(self.ep.recv_tensor(sink, GC, _EVAL_TAG)[0])
            return correct / len(x)
        if self.owns_output:
            self.ep.send_tensor(0, GC, _EVAL_TAG, np.array([float(correct)]))
        return None


@dataclass
class RankResult:
    rank: int
    replica: int
    partition: int
    checksums: list[str] = field(default_factory=list)
    param_history: list[dict[int, tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)
    metrics: list[StepMetrics] = field(default_factory=list)
    model: Optional[ModelGraph] = None
    test_accuracy: Optional[float] = None
    trace: list = field(default_factory=list)


@dataclass
class FitResult:
    metrics: list[StepMetrics]
    model: ModelGraph
    test_accuracy: Optional[float]
    ranks: list[RankResult]
    plan: PartitionPlan

    @property
    def losses(self) -> list[float]:
        return [m.loss for m in self.metrics]


def make_plan(model: ModelGraph, config: TrainConfig) -> PartitionPlan:
    return partition(model, config.num_partitions, config.num_replicas, config.cost_model)


def run_rank(model: ModelGraph, data: Dataset, config: TrainConfig, endpoint: Endpoint, *,
             plan: Optional[PartitionPlan] = None, deps=None, record_params: bool = False,
             evaluate_test: bool = True,
             on_step: Optional[Callable[[StepMetrics], None]] = None) -> RankResult:
    """Train as one rank of a ``config.world_size`` job. ``model`` is mutated.

    ``on_step`` is called on rank 0 with each step's metrics as soon as the
    step finishes.
    """
    if plan is None:
        plan = make_plan(model, config)
    if endpoint.world_size != plan.world_size:
        raise ConfigError(f"world size {endpoint.world_size} != partitions x replicas "
                          f"{plan.world_size}")
    state = PartitionState(model, plan, endpoint, deps)
    res = RankResult(endpoint.rank, state.replica, state.partition)
    bs = config.batch_size
    state.sync_initial_weights()

    for step, epoch, idx in iter_steps(len(data.x_train), config):
        t0 = time.perf_counter()
        rows = idx[state.replica * bs:(state.replica + 1) * bs]
        x = data.x_train[rows] if state.owns_input else None
        y = data.y_train[rows] if state.owns_output else None
        loss = state.train_step(x, y, bs, config.pipeline_stages, config.lr_at(epoch),
                                config.async_allreduce)
        res.checksums.append(model.checksum(state.param_ids))
        if record_params:
            res.param_history.append({i: (model[i].W.copy(), model[i].b.copy())
                                      for i in state.param_ids})
        if endpoint.rank == 0:
            dt = time.perf_counter() - t0
            m = StepMetrics(step, epoch, loss, config.effective_batch_size / dt, dt * 1e3)
            res.metrics.append(m)
            if on_step is not None:
                on_step(m)
            log.debug("step %d epoch %d loss %.6f", step, epoch, loss)

    if evaluate_test and len(data.x_test):
        res.test_accuracy = state.evaluate(data.x_test, data.y_test)
    res.model = state.gather_model()
    return res


def fit(model: ModelGraph, data: Dataset, config: TrainConfig, *, bound: int = 64,
        timeout: Optional[float] = None, record_params: bool = False,
        record_payloads: bool = False, evaluate_test: bool = True,
        on_step: Optional[Callable[[StepMetrics], None]] = None) -> FitResult:
    """Train ``model`` with the strategy in ``config`` on the in-process transport.

    All ``num_partitions * num_replicas`` ranks run as threads. The input
    model is left untouched; the trained model (replica 0, gathered to
    rank 0) is returned in the result.
    """
    config.validate()
    plan = make_plan(model, config)
    deps = build_dependency_lists(model, plan)
    # fail before any worker starts
    next(iter_steps(len(data.x_train), config))

    def worker(ep):
        ep.record_payloads = record_payloads
        return run_rank(model.copy(), data, config, ep, plan=plan, deps=deps,
                        record_params=record_params, evaluate_test=evaluate_test,
                        on_step=on_step if ep.rank == 0 else None), ep.trace

    out = run_ranks(plan.world_size, worker, bound=bound, timeout=timeout)
    ranks = []
    for res, trace in out:
        res.trace = trace
        ranks.append(res)
    head = ranks[0]
    return FitResult(head.metrics, head.model, head.test_accuracy, ranks, plan)


# ---------------------------------------------------------------------------
# single-process reference


@dataclass
class SequentialResult:
    losses: list[float]
    param_history: list[dict[int, tuple[np.ndarray, np.ndarray]]]
    model: ModelGraph


def fit_sequential(model: ModelGraph, data: Dataset, config: TrainConfig,
                   record_params: bool = False) -> SequentialResult:
    """Plain mini-batch SGD on the full effective batch, one process."""
    model = model.copy()
    losses, history = [], []
    for _step, epoch, idx in iter_steps(len(data.x_train), config):
        loss, acts = forward_seq(model, data.x_train[idx], data.y_train[idx])
        grads = backward_seq(model, acts)
        sgd_apply(model, grads, config.lr_at(epoch))
        losses.append(loss)
        if record_params:
            history.append({i: (model[i].W.copy(), model[i].b.copy()) for i in model.param_ids()})
    return SequentialResult(losses, history, model)
