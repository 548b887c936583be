"""Throughput sweeps over parallelism settings.

Each cell trains for ``warmup + steps`` steps, discards the warmup steps and
records images/sec over the rest; the reported value is the median over
``repeats`` independent runs. A failing cell is recorded with its error and
the sweep moves on.
"""

from __future__ import annotations

import csv
import itertools
import logging
import statistics
import time
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .data import Dataset, blobs, one_hot
from .graph import ModelGraph
from .trainer import TrainConfig, fit

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("strategy", "num_partitions", "num_replicas", "pipeline_stages", "batch_size",
                 "effective_batch_size", "world_size", "images_per_sec", "runs",
                 "status", "error")


def synthetic_data(model: ModelGraph, rows: int, seed: int = 0) -> Dataset:
    dim = int(np.prod(model.input_shape))
    x, labels = blobs(rows, model.num_classes, dim, seed)
    x = x.reshape((rows, *model.input_shape))
    y = one_hot(labels, model.num_classes)
    return Dataset(x, y, x[:0], y[:0])


def measure(model: ModelGraph, data: Dataset, config: TrainConfig, *, steps: int = 3,
            warmup: int = 1, repeats: int = 3, timeout: Optional[float] = 60.0) -> list[float]:
    """Images/sec of each repeat, warmup steps excluded."""
    cfg = replace(config, epochs=10**6, max_steps=warmup + steps)
    out = []
    for _ in range(repeats):
        res = fit(model, data, cfg, timeout=timeout, evaluate_test=False)
        timed = res.metrics[warmup:]
        seconds = sum(m.wall_ms for m in timed) / 1e3
        out.append(cfg.effective_batch_size * len(timed) / seconds)
    return out


def expand_grid(strategies: Iterable[str], partitions: Iterable[int], replicas: Iterable[int],
                stages: Iterable[Union[int, str]], batch_sizes: Iterable[int]) -> list[TrainConfig]:
    """Cartesian product of settings; a stage count of ``"batch"`` means one row per stage."""
    cells = []
    for strat, p, r, s, bs in itertools.product(strategies, partitions, replicas, stages, batch_sizes):
        s = bs if s == "batch" else int(s)
        cells.append(TrainConfig(strategy=strat, num_partitions=int(p), num_replicas=int(r),
                                 pipeline_stages=s, batch_size=int(bs)))
    return cells


def bench_sweep(model: ModelGraph, cells: list[TrainConfig], *, data: Optional[Dataset] = None,
                steps: int = 3, warmup: int = 1, repeats: int = 3,
                out: Union[str, Path, None] = None, timeout: Optional[float] = 60.0) -> list[dict]:
    """Measure every cell; rows are appended to ``out`` (CSV) as they finish."""
    rows = []
    writer = None
    f = None
    if out is not None:
        f = open(out, "w", newline="")
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
    try:
        for cfg in cells:
            row = {"strategy": cfg.strategy, "num_partitions": cfg.num_partitions,
                   "num_replicas": cfg.num_replicas, "pipeline_stages": cfg.pipeline_stages,
                   "batch_size": cfg.batch_size, "effective_batch_size": cfg.effective_batch_size,
                   "world_size": cfg.world_size, "images_per_sec": "", "runs": "",
                   "status": "ok", "error": ""}
            t0 = time.perf_counter()
            try:
                cfg.validate()
                d = data
                if d is None:
                    d = synthetic_data(model, cfg.effective_batch_size * (warmup + steps))
                runs = measure(model, d, cfg, steps=steps, warmup=warmup, repeats=repeats,
                               timeout=timeout)
                row["images_per_sec"] = statistics.median(runs)
                row["runs"] = ";".join(f"{v:.3f}" for v in runs)
            except Exception as e:  # record and keep sweeping
                row["status"] = "error"
                row["error"] = f"{type(e).__name__}: {e}"
            log.info("cell %s done in %.1fs: %s", cfg, time.perf_counter() - t0, row["status"])
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
                f.flush()
    finally:
        if f is not None:
            f.close()
    return rows
