"""Append-only results CSV with a JSON index of completed cells."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from filelock import FileLock

COLUMNS = ("dataset", "kernel", "model", "setup", "noise_s", "noise_r", "seed",
           "target_ll", "n_tasks", "K_eval")
GROUP_KEYS = ("dataset", "kernel", "model", "setup", "noise_s", "noise_r")
_TYPES = {"setup": int, "noise_s": float, "noise_r": float, "seed": int,
          "target_ll": float, "n_tasks": int, "K_eval": int}


def _parse_row(row: dict) -> dict:
    return {k: _TYPES.get(k, str)(row[k]) for k in COLUMNS}


class EvalResult:
    """Rows of ``COLUMNS`` plus aggregation over seeds."""

    def __init__(self, rows: Optional[Iterable[dict]] = None):
        self.rows: list[dict] = [dict(r) for r in rows or ()]

    def __len__(self):
        return len(self.rows)

    def extend(self, other: "EvalResult | Iterable[dict]"):
        self.rows.extend(other.rows if isinstance(other, EvalResult) else other)
        return self

    def select(self, **where) -> "EvalResult":
        def ok(r):
            for k, v in where.items():
                if isinstance(v, float) or isinstance(r[k], float):
                    if not math.isclose(float(r[k]), float(v), abs_tol=1e-12):
                        return False
                elif r[k] != v:
                    return False
            return True
        return EvalResult(r for r in self.rows if ok(r))

    def values(self) -> np.ndarray:
        return np.array([r["target_ll"] for r in self.rows], dtype=np.float64)

    def aggregate(self) -> list[dict]:
        """Mean over seeds per group; ``std`` (ddof=1) only with two or more seeds."""
        groups: dict[tuple, list[float]] = {}
        for r in self.rows:
            groups.setdefault(tuple(r[k] for k in GROUP_KEYS), []).append(r["target_ll"])
        out = []
        for key, vals in groups.items():
            arr = np.asarray(vals, dtype=np.float64)
            row = dict(zip(GROUP_KEYS, key))
            row["mean"] = float(arr.mean())
            row["n_seeds"] = len(vals)
            if len(vals) >= 2:
                row["std"] = float(arr.std(ddof=1))
            out.append(row)
        return out

    def mean(self, **where) -> float:
        vals = self.select(**where).values()
        if vals.size == 0:
            raise KeyError(f"no rows match {where}")
        return float(vals.mean())

    def table(self) -> dict:
        """Nested ``{kernel: {model: {noise: "mean ± std"}}}`` mirroring the result tables."""
        out: dict = {}
        for a in self.aggregate():
            cell = f"{a['mean']:.4f}" + (f" ± {a['std']:.4f}" if "std" in a else "")
            kernel = a["kernel"] or a["dataset"]
            noise = f"{a['noise_s']:g}" if a["noise_s"] == a["noise_r"] else \
                f"s={a['noise_s']:g},r={a['noise_r']:g}"
            out.setdefault(f"setup{a['setup']}", {}).setdefault(kernel, {}).setdefault(
                a["model"], {})[noise] = cell
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in COLUMNS})

    @classmethod
    def from_csv(cls, path) -> "EvalResult":
        with open(path, newline="") as fh:
            return cls(_parse_row(r) for r in csv.DictReader(fh))


class ResultsStore:
    """``results.csv`` + ``index.json`` under one directory, guarded by a file lock.

    A cell is committed by appending its rows and then recording it in the
    index with the resulting row count. Rows beyond the committed count (from
    an interrupted write) are dropped when the store is opened.
    """

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.dir / "results.csv"
        self.index_path = self.dir / "index.json"
        self.lock = FileLock(str(self.dir / ".results.lock"))
        with self.lock:
            self._repair()

    def _read_index(self) -> dict:
        if not self.index_path.exists():
            return {"cells": {}, "rows": 0}
        return json.loads(self.index_path.read_text())

    def _write_index(self, index: dict):
        tmp = self.index_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(index, indent=1, sort_keys=True))
        tmp.replace(self.index_path)

    def _repair(self):
        index = self._read_index()
        if not self.csv_path.exists():
            with open(self.csv_path, "w", newline="") as fh:
                csv.writer(fh).writerow(COLUMNS)
            if index["rows"]:
                index = {"cells": {}, "rows": 0}
                self._write_index(index)
            return
        lines = self.csv_path.read_text().splitlines(keepends=True)
        keep = 1 + index["rows"]
        if len(lines) != keep or (lines and not lines[-1].endswith("\n")):
            self.csv_path.write_text("".join(lines[:keep]) if lines else ",".join(COLUMNS) + "\n")

    def has(self, key: str) -> bool:
        return key in self._read_index()["cells"]

    def commit(self, key: str, rows: Iterable[dict], info: Optional[dict] = None):
        rows = list(rows)
        with self.lock:
            index = self._read_index()
            if key in index["cells"]:
                return
            buf = io.StringIO()
            w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
            for r in rows:
                w.writerow({k: r[k] for k in COLUMNS})
            with open(self.csv_path, "a", newline="") as fh:
                fh.write(buf.getvalue())
            index["rows"] += len(rows)
            index["cells"][key] = dict(info or {}, n_rows=len(rows))
            self._write_index(index)

    def cell_info(self, key: str) -> Optional[dict]:
        return self._read_index()["cells"].get(key)

    def load(self) -> EvalResult:
        with self.lock:
            return EvalResult.from_csv(self.csv_path)
