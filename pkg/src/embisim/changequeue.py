"""Bucket-per-level queue of pending node re-checks.

Maintenance pushes (level, node id) pairs as it discovers work; the
level loop drains the smallest pending level, which must move strictly
upward within one transaction (draining never goes back down).  Staged
ids are small u64 arrays per level; when the staged total exceeds the
spill threshold the largest level is flushed as a sorted-unique run to
one shared scratch file, so the in-memory footprint stays bounded.
"""

from __future__ import annotations

import os

import numpy as np

from .tables import BufferBudget, IoCounter, _charge

_NID_DTYPE = np.dtype("<u8")


class ChangeQueue:
    def __init__(
        self,
        max_level: int,
        budget: BufferBudget,
        counters: IoCounter,
        spill_threshold: int | None = None,
    ):
        if max_level < 1:
            raise ValueError("max_level must be at least 1")
        self.max_level = max_level
        self._budget = budget
        self._counters = counters
        self._threshold = (
            spill_threshold if spill_threshold is not None else budget.table_bytes
        )
        self._staged: dict[int, list[np.ndarray]] = {}
        self._staged_bytes = 0
        self._spill_path: str | None = None
        self._spill_runs: dict[int, list[tuple[int, int]]] = {}
        self._drained_past = 0

    def push(self, level: int, nids) -> None:
        """Stage node ids for a level.  Accepts a single id or an array."""
        if not (1 <= level <= self.max_level):
            raise ValueError(f"level {level} outside 1..{self.max_level}")
        if level <= self._drained_past:
            raise ValueError(f"level {level} was already drained")
        arr = np.atleast_1d(np.asarray(nids, dtype=_NID_DTYPE))
        if arr.size == 0:
            return
        self._staged.setdefault(level, []).append(arr)
        self._staged_bytes += arr.nbytes
        while self._staged_bytes > self._threshold:
            self._spill_largest()

    def pending_levels(self) -> list[int]:
        return sorted(set(self._staged) | set(self._spill_runs))

    def _spill_largest(self) -> None:
        level = max(
            self._staged,
            key=lambda lv: sum(a.nbytes for a in self._staged[lv]),
        )
        chunks = self._staged.pop(level)
        self._staged_bytes -= sum(a.nbytes for a in chunks)
        run = np.unique(np.concatenate(chunks))
        if self._spill_path is None:
            self._spill_path = self._budget.mktemp(".queue")
        with open(self._spill_path, "ab") as fh:
            offset = fh.tell()
            run.tofile(fh)
        _charge(self._counters, "table", "write", run.nbytes)
        self._spill_runs.setdefault(level, []).append((offset, run.size))

    def drain_min_level(self) -> tuple[int, np.ndarray] | None:
        """Pop the smallest pending level; returns (level, sorted unique
        node ids) or None when the queue is empty."""
        levels = self.pending_levels()
        if not levels:
            return None
        level = levels[0]
        parts: list[np.ndarray] = self._staged.pop(level, [])
        self._staged_bytes -= sum(a.nbytes for a in parts)
        for offset, count in self._spill_runs.pop(level, []):
            with open(self._spill_path, "rb") as fh:
                fh.seek(offset)
                run = np.fromfile(fh, dtype=_NID_DTYPE, count=count)
            _charge(self._counters, "table", "read", run.nbytes)
            parts.append(run)
        self._drained_past = level
        if not parts:
            return level, np.empty(0, dtype=_NID_DTYPE)
        return level, np.unique(np.concatenate(parts))

    def clear(self) -> None:
        self._staged.clear()
        self._spill_runs.clear()
        self._staged_bytes = 0
        self.close()

    def close(self) -> None:
        if self._spill_path is not None and os.path.exists(self._spill_path):
            os.unlink(self._spill_path)
        self._spill_path = None
