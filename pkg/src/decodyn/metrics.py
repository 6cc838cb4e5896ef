"""Append-only JSONL metrics log.

One record per line: {"run": ..., "step": ..., "metrics": {...}, "wall": ...}.
Steps must be non-decreasing within a logger. The wall-clock field exists for
latency inspection but is volatile, so reproducibility comparisons go through
logical_records, which strips it.
"""

from __future__ import annotations

import json
import time
from pathlib import Path


class MetricsLogger:
    def __init__(self, path: str | Path, run_id: str = "run"):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id
        self._last_step: int | None = None
        self._fh = self.path.open("a", encoding="utf-8")

    def log(self, step: int, **metrics) -> None:
        step = int(step)
        if self._last_step is not None and step < self._last_step:
            raise ValueError(f"metrics step went backwards: {step} after {self._last_step}")
        self._last_step = step
        clean = {}
        for key, value in metrics.items():
            if isinstance(value, (bool, str)):
                clean[key] = value
            else:
                clean[key] = float(value)
        record = {"run": self.run_id, "step": step, "metrics": clean, "wall": time.time()}
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsLogger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str | Path) -> list[dict]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def logical_records(records: list[dict]) -> list[dict]:
    """Copy of the records with volatile fields removed; two runs of the same
    (config, seed) must agree on this view exactly."""
    out = []
    for rec in records:
        rec = dict(rec)
        rec.pop("wall", None)
        out.append(rec)
    return out


def logs_equal(path_a: str | Path, path_b: str | Path) -> bool:
    return logical_records(read_metrics(path_a)) == logical_records(read_metrics(path_b))
