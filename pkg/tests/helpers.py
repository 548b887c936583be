"""Shared builders and independent oracles for the test suite."""

import socket

import numpy as np

from hybridnet.data import Dataset, blobs, one_hot
from hybridnet.graph import ModelGraph, build_model_from_spec
from hybridnet.trainer import TrainConfig
from hybridnet.zoo import random_dag_spec, random_model_spec


def blob_data(model: ModelGraph, n_train: int, seed: int = 0, n_test: int = 0) -> Dataset:
    dim = int(np.prod(model.input_shape))
    x, labels = blobs(n_train + n_test, model.num_classes, dim, seed)
    y = one_hot(labels, model.num_classes)
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:])


def strategy_for(P: int, R: int) -> str:
    if R == 1:
        return "model"
    return "data" if P == 1 else "hybrid"


def random_setup(rng: np.random.Generator, steps: int = 3, dag: bool = False,
                 stages=(1, 2, 4), replicas=(1, 2), max_partitions: int = 4):
    """A random model, a partition/replica/pipeline config and just enough data."""
    dim = int(rng.integers(2, 6))
    classes = int(rng.integers(2, 5))
    if dag:
        spec = random_dag_spec(rng, input_dim=dim, num_classes=classes)
    else:
        spec = random_model_spec(rng, max_layers=12, max_skips=2, input_dim=dim,
                                 num_classes=classes)
    model = build_model_from_spec(spec)
    P = int(rng.integers(1, min(max_partitions, len(model)) + 1))
    R = int(rng.choice(replicas))
    S = int(rng.choice(stages))
    bs = S * int(rng.integers(1, 4))
    cfg = TrainConfig(strategy=strategy_for(P, R), num_partitions=P, num_replicas=R,
                      pipeline_stages=S, batch_size=bs, epochs=1,
                      lr_schedule=[(0, float(rng.uniform(0.05, 0.5)))],
                      seed=int(rng.integers(1000)))
    data = blob_data(model, cfg.effective_batch_size * steps, seed=cfg.seed)
    return model, data, cfg


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.max(np.abs(b)) if b.size else 0.0
    diff = np.max(np.abs(a - b)) if a.size else 0.0
    return float(diff / scale) if scale > 0 else float(diff)


def merged_history(ranks, replica: int = 0):
    """Per-step {layer: (W, b)} assembled from the ranks of one replica."""
    own = [r for r in ranks if r.replica == replica]
    steps = len(own[0].param_history)
    out = []
    for s in range(steps):
        merged = {}
        for r in own:
            merged.update(r.param_history[s])
        out.append(merged)
    return out


def straight_line_sum(xs):
    acc = np.array(xs[0], dtype=np.float64, copy=True)
    for x in xs[1:]:
        acc = acc + x
    return acc


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]
