"""Bundled model configs and random topologies for property tests."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .graph import ModelGraph, ModelSpecError, build_model_from_spec

BUNDLED = ("fig4_mlp", "resnet_toy", "mlp_mnist")


def bundled_spec(name: str) -> dict:
    try:
        text = resources.files(__package__).joinpath("configs", f"{name}.json").read_text()
    except FileNotFoundError:
        raise KeyError(f"no bundled config {name!r}; choose from {BUNDLED}") from None
    return json.loads(text)


def load_config(name_or_path: Union[str, Path], seed: Optional[int] = None) -> ModelGraph:
    """Build a bundled config by name, or any config file by path."""
    if str(name_or_path) in BUNDLED:
        return build_model_from_spec(bundled_spec(str(name_or_path)), seed)
    path = Path(name_or_path)
    if not path.is_file():
        raise ModelSpecError(f"{path}: no such file and not a bundled config {BUNDLED}")
    return build_model_from_spec(path, seed)


def random_model_spec(rng: np.random.Generator, max_layers: int = 12, max_skips: int = 2,
                      input_dim: int = 4, num_classes: int = 3) -> dict:
    """Draw a random valid chain-with-skips topology.

    All hidden layers share one width so any earlier hidden output can be
    added back in. The layer count includes the Input and loss layers.
    """
    width = int(rng.integers(2, 9))
    n_layers = int(rng.integers(4, max_layers + 1))
    layers = [{"name": "x", "kind": "Input", "shape": [input_dim]},
              {"name": "h0", "kind": "Dense", "units": width}]
    hidden = ["h0"]
    skips = 0
    while len(layers) < n_layers - 2:
        name = f"h{len(layers) - 1}"
        prev = layers[-1]["name"]
        r = rng.random()
        earlier = hidden[:-1]
        if skips < max_skips and earlier and r < 0.3:
            other = earlier[int(rng.integers(len(earlier)))]
            layers.append({"name": name, "kind": "Add", "inputs": [prev, other]})
            skips += 1
        elif r < 0.6 and layers[-1]["kind"] != "ReLU":
            layers.append({"name": name, "kind": "ReLU"})
        else:
            layers.append({"name": name, "kind": "Dense", "units": width})
        hidden.append(name)
    layers.append({"name": "logits", "kind": "Dense", "units": num_classes})
    layers.append({"name": "loss", "kind": "SoftmaxXent"})
    return {"version": 1, "name": "random", "seed": int(rng.integers(2**31)), "layers": layers}


def random_dag_spec(rng: np.random.Generator, max_layers: int = 16, input_dim: int = 4,
                    num_classes: int = 3) -> dict:
    """Draw a random DAG with branches and merges.

    Each new layer reads from any earlier hidden layer (biased towards
    recent ones); ``Add`` merges two distinct earlier layers. Layers left
    without a consumer are folded into the output with a chain of ``Add``.
    """
    width = int(rng.integers(2, 7))
    layers = [{"name": "x", "kind": "Input", "shape": [input_dim]},
              {"name": "h0", "kind": "Dense", "units": width, "inputs": ["x"]}]
    hidden = ["h0"]
    used: set[str] = set()
    target = int(rng.integers(3, max(4, max_layers - 4)))

    def pick() -> str:
        back = min(int(rng.geometric(0.5)) - 1, len(hidden) - 1)
        return hidden[-1 - back]

    while len(hidden) < target:
        name = f"h{len(hidden)}"
        k = len(hidden)
        r = rng.random()
        if r < 0.3 and k >= 2:
            a = pick()
            b = pick()
            while b == a:
                b = hidden[int(rng.integers(k))]
            layers.append({"name": name, "kind": "Add", "inputs": [a, b]})
            used.update((a, b))
        else:
            src = pick()
            kind = "ReLU" if r < 0.55 else "Dense"
            layer = {"name": name, "kind": kind, "inputs": [src]}
            if kind == "Dense":
                layer["units"] = width
            layers.append(layer)
            used.add(src)
        hidden.append(name)
    loose = [h for h in hidden if h not in used]
    tail = loose[0]
    for j, other in enumerate(loose[1:]):
        name = f"merge{j}"
        layers.append({"name": name, "kind": "Add", "inputs": [tail, other]})
        tail = name
    layers.append({"name": "logits", "kind": "Dense", "units": num_classes, "inputs": [tail]})
    layers.append({"name": "loss", "kind": "SoftmaxXent", "inputs": ["logits"]})
    return {"version": 1, "name": "random_dag", "seed": int(rng.integers(2**31)), "layers": layers}


def compute_heavy_spec(input_dim: int = 256, width: int = 512, depth: int = 8,
                       num_classes: int = 10) -> dict:
    """A deep wide MLP whose cost is dominated by matrix products."""
    layers = [{"name": "x", "kind": "Input", "shape": [input_dim]}]
    for i in range(depth):
        layers.append({"name": f"fc{i}", "kind": "Dense", "units": width})
        layers.append({"name": f"relu{i}", "kind": "ReLU"})
    layers.append({"name": "logits", "kind": "Dense", "units": num_classes})
    layers.append({"name": "loss", "kind": "SoftmaxXent"})
    return {"version": 1, "name": "compute_heavy", "seed": 0, "layers": layers}
