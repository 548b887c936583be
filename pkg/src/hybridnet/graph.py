"""Layer DAG, model-config loading and the sequential reference passes.

The forward and backward kernels here are shared with the distributed
trainer: a partition simply runs :func:`forward_layers` / :func:`backward_layers`
over its own layer ids, with boundary tensors supplied by the transport.
"""

from __future__ import annotations

import copy
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

import jsonschema
import numpy as np

from . import tensor as T

KINDS = ("Input", "Dense", "ReLU", "Add", "Flatten", "SoftmaxXent")
ARITY = {"Input": 0, "Dense": 1, "ReLU": 1, "Flatten": 1, "Add": 2, "SoftmaxXent": 1}
SCHEMA_VERSION = 1

# (dW, db) per parameterised layer id.
GradientSet = dict[int, tuple[np.ndarray, np.ndarray]]


class ModelSpecError(ValueError):
    """A model-config document is malformed or describes an invalid graph."""


class GraphShapeError(T.ShapeError):
    def __init__(self, layer_id: int, message: str):
        super().__init__(f"layer {layer_id}: {message}")
        self.layer_id = layer_id


@dataclass
class LayerNode:
    id: int
    kind: str
    inputs: tuple[int, ...] = ()
    name: str = ""
    units: Optional[int] = None
    shape: tuple[int, ...] = ()  # per-sample output shape
    W: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    cost: Optional[float] = None  # partitioner override

    @property
    def has_params(self) -> bool:
        return self.W is not None

    def num_params(self) -> int:
        return 0 if self.W is None else self.W.size + self.b.size


@dataclass
class ModelGraph:
    layers: list[LayerNode]
    output_id: int
    input_id: int = 0
    name: str = ""
    seed: int = 0
    _consumers: dict[int, list[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._consumers = {n.id: [] for n in self.layers}
        for n in self.layers:
            for i in n.inputs:
                self._consumers[i].append(n.id)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, layer_id: int) -> LayerNode:
        return self.layers[layer_id]

    def consumers(self, layer_id: int) -> list[int]:
        return self._consumers[layer_id]

    def edges(self) -> list[tuple[int, int]]:
        return [(i, n.id) for n in self.layers for i in n.inputs]

    def param_ids(self) -> list[int]:
        return [n.id for n in self.layers if n.has_params]

    @property
    def num_classes(self) -> int:
        return self.layers[self.output_id].shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[self.input_id].shape

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def parameters(self, ids: Optional[Iterable[int]] = None) -> list[np.ndarray]:
        ids = self.param_ids() if ids is None else ids
        out = []
        for i in ids:
            n = self.layers[i]
            if n.has_params:
                out.extend((n.W, n.b))
        return out

    def checksum(self, ids: Optional[Iterable[int]] = None) -> str:
        return T.checksum(*self.parameters(ids))

    def validate(self) -> None:
        outputs = [n.id for n in self.layers if n.kind == "SoftmaxXent"]
        if len(outputs) != 1:
            raise ModelSpecError(f"need exactly one SoftmaxXent layer, found {len(outputs)}")
        if self.consumers(outputs[0]):
            raise ModelSpecError("SoftmaxXent must be the unique sink")
        inputs = [n.id for n in self.layers if n.kind == "Input"]
        if len(inputs) != 1:
            raise ModelSpecError(f"need exactly one Input layer, found {len(inputs)}")
        for n in self.layers:
            if len(n.inputs) != ARITY[n.kind]:
                raise ModelSpecError(
                    f"layer {n.id} ({n.kind}) takes {ARITY[n.kind]} inputs, got {len(n.inputs)}")
            if any(i >= n.id or i < 0 for i in n.inputs):
                raise ModelSpecError(f"layer {n.id}: inputs {n.inputs} are not earlier layers")
            if len(set(n.inputs)) != len(n.inputs):
                raise ModelSpecError(f"layer {n.id}: repeated input")
            if n.id != outputs[0] and not self.consumers(n.id):
                raise ModelSpecError(f"layer {n.id} ({n.name}) does not reach the output")


# ---------------------------------------------------------------------------
# model-config documents

_LAYER_SCHEMA = {
    "type": "object",
    "required": ["name", "kind"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "kind": {"enum": list(KINDS)},
        "inputs": {"type": "array", "items": {"type": "string"}},
        "units": {"type": "integer", "minimum": 1},
        "shape": {"type": "array", "items": {"type": "integer", "minimum": 1},
                  "minItems": 1, "maxItems": 3},
        "cost": {"type": "number", "minimum": 0},
    },
    "allOf": [
        {"if": {"properties": {"kind": {"const": "Dense"}}},
         "then": {"required": ["units"]}},
        {"if": {"properties": {"kind": {"const": "Input"}}},
         "then": {"required": ["shape"]}},
    ],
}

MODEL_SCHEMA = {
    "type": "object",
    "required": ["version", "layers"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "layers": {"type": "array", "minItems": 2, "items": _LAYER_SCHEMA},
    },
}


def load_model_spec(path: Union[str, Path]) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ModelSpecError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None


def build_model_from_spec(spec: Union[dict, str, Path], seed: Optional[int] = None) -> ModelGraph:
    """Construct a :class:`ModelGraph` from a model-config document.

    Layers may be declared in any order; they are renumbered in a stable
    topological order (declaration order breaks ties). Weights are drawn
    from ``numpy.random.default_rng(seed)`` in layer-id order.

    Raises:
        ModelSpecError: schema violations (with the offending field path),
            unknown input names, cycles, or shape inference failures.
    """
    if not isinstance(spec, dict):
        spec = load_model_spec(spec)
    try:
        jsonschema.validate(spec, MODEL_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ModelSpecError(f"{where}: {e.message}") from None

    decl = spec["layers"]
    names = [d["name"] for d in decl]
    if len(set(names)) != len(names):
        raise ModelSpecError("layer names must be unique")
    index = {n: i for i, n in enumerate(names)}
    deps: list[list[int]] = []
    for i, d in enumerate(decl):
        ins = d.get("inputs")
        if ins is None:
            ins = [] if d["kind"] == "Input" else ([names[i - 1]] if i > 0 else [])
        for name in ins:
            if name not in index:
                raise ModelSpecError(f"layers/{i}/inputs: unknown layer {name!r}")
        deps.append([index[name] for name in ins])

    order = _toposort(deps, names)
    new_id = {old: new for new, old in enumerate(order)}
    layers = []
    for old in order:
        d = decl[old]
        layers.append(LayerNode(
            id=new_id[old], kind=d["kind"], name=d["name"],
            inputs=tuple(new_id[j] for j in deps[old]),
            units=d.get("units"), shape=tuple(d.get("shape", ())), cost=d.get("cost")))

    sinks = [n.id for n in layers if n.kind == "SoftmaxXent"]
    sources = [n.id for n in layers if n.kind == "Input"]
    model = ModelGraph(layers, output_id=sinks[0] if sinks else -1,
                       input_id=sources[0] if sources else -1,
                       name=spec.get("name", ""),
                       seed=spec.get("seed", 0) if seed is None else seed)
    model.validate()
    try:
        _infer_shapes(model)
    except GraphShapeError as e:
        raise ModelSpecError(f"layers/{order[e.layer_id]}: {e}") from None
    init_weights(model, model.seed)
    return model


def _toposort(deps: list[list[int]], names: list[str]) -> list[int]:
    """Kahn's algorithm, always releasing the earliest-declared ready node."""
    indeg = [len(d) for d in deps]
    users: list[list[int]] = [[] for _ in deps]
    for i, d in enumerate(deps):
        for j in d:
            users[j].append(i)
    ready = [i for i, k in enumerate(indeg) if k == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for u in users[i]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(deps):
        stuck = sorted(names[i] for i, k in enumerate(indeg) if k > 0)
        raise ModelSpecError(f"cycle detected among layers {stuck}")
    return order


def _infer_shapes(model: ModelGraph) -> None:
    for n in model.layers:
        ins = [model.layers[i].shape for i in n.inputs]
        if n.kind == "Input":
            continue
        if n.kind == "Dense":
            if len(ins[0]) != 1:
                raise GraphShapeError(n.id, f"Dense needs a flat input, got {ins[0]}")
            n.shape = (n.units,)
        elif n.kind in ("ReLU",):
            n.shape = ins[0]
        elif n.kind == "Flatten":
            n.shape = (math.prod(ins[0]),)
        elif n.kind == "Add":
            if ins[0] != ins[1]:
                raise GraphShapeError(n.id, f"Add operands differ: {ins[0]} vs {ins[1]}")
            n.shape = ins[0]
        elif n.kind == "SoftmaxXent":
            if len(ins[0]) != 1:
                raise GraphShapeError(n.id, f"SoftmaxXent needs flat logits, got {ins[0]}")
            n.shape = ins[0]


def init_weights(model: ModelGraph, seed: int) -> None:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    for n in model.layers:
        if n.kind != "Dense":
            continue
        fan_in = model.layers[n.inputs[0]].shape[0]
        limit = math.sqrt(6.0 / (fan_in + n.units))
        n.W = rng.uniform(-limit, limit, size=(fan_in, n.units))
        n.b = np.zeros(n.units)


def activation_size(model: ModelGraph, layer_id: int) -> int:
    return math.prod(model.layers[layer_id].shape)


# ---------------------------------------------------------------------------
# kernels


def _forward_one(n: LayerNode, xs: list[np.ndarray]) -> np.ndarray:
    if n.kind == "Dense":
        return T.matmul(xs[0], n.W) + n.b
    if n.kind == "ReLU":
        return T.relu(xs[0])
    if n.kind == "Add":
        return T.add(xs[0], xs[1])
    if n.kind == "Flatten":
        return xs[0].reshape(xs[0].shape[0], -1)
    raise AssertionError(n.kind)


def forward_layers(model: ModelGraph, layer_ids: Iterable[int],
                   acts: dict[int, np.ndarray], labels: Optional[np.ndarray] = None
                   ) -> tuple[Optional[float], Optional[np.ndarray]]:
    """Evaluate ``layer_ids`` (ascending) in place into ``acts``.

    ``acts`` must already hold every input produced outside ``layer_ids``
    (the batch for the Input layer, received tensors for boundary inputs).
    For the loss layer the cached activation is the logits' softmax; the
    loss and logits gradient are returned when ``labels`` is given.

    Returns:
        ``(loss, grad_logits)``; both ``None`` unless the loss layer ran with labels.
    """
    loss = grad = None
    for i in layer_ids:
        n = model.layers[i]
        if n.kind == "Input":
            x = acts.get(i)
            if x is None:
                raise GraphShapeError(i, "no batch supplied for the Input layer")
            if x.shape[1:] != n.shape:
                raise GraphShapeError(i, f"batch shape {x.shape} does not match input {n.shape}")
            continue
        try:
            xs = [acts[j] for j in n.inputs]
        except KeyError as e:
            raise GraphShapeError(i, f"missing activation for input layer {e.args[0]}") from None
        if n.kind == "SoftmaxXent":
            logits = xs[0]
            if labels is None:
                acts[i] = T.softmax(logits)
            else:
                if labels.shape != logits.shape:
                    raise GraphShapeError(i, f"labels {labels.shape} vs logits {logits.shape}")
                loss, grad = T.softmax_xent(logits, labels)
                acts[i] = T.softmax(logits)
            continue
        try:
            acts[i] = _forward_one(n, xs)
        except T.ShapeError as e:
            raise GraphShapeError(i, str(e)) from None
    return loss, grad


def backward_layers(model: ModelGraph, layer_ids: Iterable[int], acts: dict[int, np.ndarray],
                    upstream: dict[int, np.ndarray],
                    on_layer_done: Optional[Callable[[int, tuple[np.ndarray, np.ndarray]], None]] = None,
                    act_grads: Optional[dict[int, np.ndarray]] = None,
                    ) -> tuple[GradientSet, dict[tuple[int, int], np.ndarray]]:
    """Back-propagate through ``layer_ids`` in descending order.

    ``upstream`` maps layer id to the accumulated loss gradient w.r.t. that
    layer's output; it is seeded with the logits gradient (keyed by the loss
    layer id) and/or partial errors received from other partitions, and is
    updated in place. When a layer has several consumers the contributions
    are summed in descending consumer-id order.

    Returns:
        ``(grads, edge_errors)``: parameter gradients for layers in the set,
        and the partial error for every edge ``(src, dst)`` whose producer
        ``src`` lies outside the set.
    """
    ids = sorted(layer_ids, reverse=True)
    local = set(ids)
    grads: GradientSet = {}
    edge_errors: dict[tuple[int, int], np.ndarray] = {}

    def emit(src: int, dst: int, g: np.ndarray) -> None:
        if src in local:
            prev = upstream.get(src)
            upstream[src] = g if prev is None else prev + g
        else:
            edge_errors[(src, dst)] = g

    for i in ids:
        n = model.layers[i]
        dy = upstream.get(i)
        if dy is None:
            raise GraphShapeError(i, "no upstream gradient")
        if act_grads is not None:
            act_grads[i] = dy
        if n.kind == "Input":
            continue
        try:
            xs = [acts[j] for j in n.inputs]
        except KeyError as e:
            raise GraphShapeError(i, f"missing activation for input layer {e.args[0]}") from None
        if n.kind == "SoftmaxXent":
            # seeded with the logits gradient by the caller
            emit(n.inputs[0], i, dy)
        elif n.kind == "Dense":
            grads[i] = (T.matmul(xs[0].T, dy), T.sum_rows(dy))
            if on_layer_done is not None:
                on_layer_done(i, grads[i])
            emit(n.inputs[0], i, T.matmul(dy, n.W.T))
        elif n.kind == "ReLU":
            emit(n.inputs[0], i, T.relu_grad(dy, xs[0]))
        elif n.kind == "Add":
            emit(n.inputs[0], i, dy)
            emit(n.inputs[1], i, dy)
        elif n.kind == "Flatten":
            emit(n.inputs[0], i, dy.reshape(xs[0].shape))
    return grads, edge_errors


# ---------------------------------------------------------------------------
# sequential reference


def forward_seq(model: ModelGraph, batch: np.ndarray, labels: np.ndarray
                ) -> tuple[float, dict[int, np.ndarray]]:
    """Run every layer on ``batch``; return the mean loss and all activations.

    The logits gradient is cached under key ``-1`` for :func:`backward_seq`.
    """
    acts = {model.input_id: batch}
    loss, grad = forward_layers(model, range(len(model)), acts, labels)
    acts[-1] = grad
    return loss, acts


def backward_seq(model: ModelGraph, activations: dict[int, np.ndarray],
                 labels: Optional[np.ndarray] = None,
                 act_grads: Optional[dict[int, np.ndarray]] = None) -> GradientSet:
    """Full-model parameter gradients from the activations of :func:`forward_seq`.

    ``labels`` is accepted for symmetry; the logits gradient cached by the
    forward pass already encodes them. Pass ``act_grads`` (a dict) to also
    collect dL/d(output) for every layer.
    """
    grad = activations.get(-1)
    if grad is None:
        if labels is None:
            raise GraphShapeError(model.output_id, "missing activation for the loss gradient")
        probs = activations[model.output_id]
        grad = (probs - labels) / probs.shape[0]
    upstream = {model.output_id: grad}
    grads, _ = backward_layers(model, range(len(model)), activations, upstream,
                               act_grads=act_grads)
    return grads


def sgd_apply(model: ModelGraph, grads: GradientSet, lr: float) -> None:
    """``W -= lr * dW`` in place, layer ids ascending."""
    for i in sorted(grads):
        n = model.layers[i]
        dW, db = grads[i]
        if dW.shape != n.W.shape or db.shape != n.b.shape:
            raise T.ShapeError(
                f"layer {i}: gradient shapes {dW.shape}/{db.shape} vs params {n.W.shape}/{n.b.shape}")
    for i in sorted(grads):
        n = model.layers[i]
        dW, db = grads[i]
        n.W -= lr * dW
        n.b -= lr * db


def predict(model: ModelGraph, batch: np.ndarray) -> np.ndarray:
    acts = {model.input_id: batch}
    forward_layers(model, range(len(model)), acts)
    return np.argmax(acts[model.output_id], axis=1)


def evaluate(model: ModelGraph, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Fraction of rows whose argmax prediction matches the one-hot label."""
    correct = 0
    for lo in range(0, len(x), batch_size):
        pred = predict(model, x[lo:lo + batch_size])
        correct += int(np.sum(pred == np.argmax(y[lo:lo + batch_size], axis=1)))
    return correct / len(x)
