"""Per-step metrics logs in CSV or JSON-lines form.

Both formats start with a header holding the run description, the world
size and a build id, so a log can be traced back to the code and settings
that produced it. Floats are written with ``repr`` and read back exactly.

CSV layout::

    # {"run": {...}, "world_size": 4, "build_id": "..."}
    step,epoch,loss,images_per_sec,wall_ms
    0,0,1.0986,5120.3,6.25

JSONL layout: a ``{"header": {...}}`` line, then one object per step.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
from pathlib import Path
from typing import Any, Optional, Union

from .trainer import StepMetrics, TrainConfig

FORMATS = ("csv", "jsonl")
COLUMNS = tuple(f.name for f in dataclasses.fields(StepMetrics))


class MetricsFormatError(ValueError):
    pass


def build_id() -> str:
    """Short digest of the package sources."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def make_header(config: TrainConfig, **extra: Any) -> dict:
    run = dataclasses.asdict(config)
    run["lr_schedule"] = [list(p) for p in config.lr_schedule]
    run.update(extra)
    return {"run": run, "world_size": config.world_size, "build_id": build_id()}


class MetricsLog:
    """Append-only writer; the header goes out before any step row."""

    def __init__(self, path: Union[str, Path], header: dict, fmt: str = "csv"):
        if fmt not in FORMATS:
            raise MetricsFormatError(f"format must be one of {FORMATS}, got {fmt!r}")
        self.fmt = fmt
        self.header = header
        self._last: Optional[int] = None
        self._f = open(path, "w", newline="")
        if fmt == "csv":
            self._f.write("# " + json.dumps(header, sort_keys=True) + "\n")
            self._f.write(",".join(COLUMNS) + "\n")
        else:
            self._f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        self._f.flush()

    def append(self, m: StepMetrics) -> None:
        if self._last is not None and m.step <= self._last:
            raise MetricsFormatError(f"step {m.step} after step {self._last}")
        self._last = m.step
        row = dataclasses.asdict(m)
        if self.fmt == "csv":
            self._f.write(",".join(repr(row[c]) for c in COLUMNS) + "\n")
        else:
            self._f.write(json.dumps(row) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _row(d: dict, where: str) -> StepMetrics:
    try:
        return StepMetrics(int(d["step"]), int(d["epoch"]), float(d["loss"]),
                           float(d["images_per_sec"]), float(d["wall_ms"]))
    except (KeyError, TypeError, ValueError) as e:
        raise MetricsFormatError(f"{where}: {e}") from None


def read_metrics(path: Union[str, Path]) -> tuple[dict, list[StepMetrics]]:
    """Parse a log written by :class:`MetricsLog` (format detected from the first line)."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise MetricsFormatError(f"{path}: empty log")
    if lines[0].startswith("# "):
        header = json.loads(lines[0][2:])
        reader = csv.DictReader(io.StringIO("\n".join(lines[1:])))
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise MetricsFormatError(f"{path}: columns {reader.fieldnames} != {list(COLUMNS)}")
        rows = [_row(r, f"{path}:{i + 3}") for i, r in enumerate(reader)]
    else:
        first = json.loads(lines[0])
        if "header" not in first:
            raise MetricsFormatError(f"{path}: first line is not a header")
        header = first["header"]
        rows = [_row(json.loads(s), f"{path}:{i + 2}") for i, s in enumerate(lines[1:]) if s]
    return header, rows
