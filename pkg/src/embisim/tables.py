"""Disk tables of fixed-width records and the external-memory primitives.

Tables are flat binary files of numpy structured records (little-endian,
no padding).  Every transfer between a buffer and a file is charged to an
IoCounter at the moment it crosses that boundary, with the exact byte
count moved, so measured I/O is independent of OS caching.

external_sort is a classic run-formation + k-way-merge sort driven by a
page budget: runs the size of the full buffer, merge fan-in B - 1 where B
is the budget in pages.  Sorting X bytes that fit in s = ceil(X/B) runs
therefore costs 2X * (1 + ceil(log_{B-1} s)) bytes of traffic, plus one
read of the unsorted input.
"""

from __future__ import annotations

import itertools
import os
import tempfile
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .model import IntegrityError

DEFAULT_PAGE_SIZE = 4096


@dataclass
class IoCounter:
    """Byte counters, split between table traffic and signature-store
    traffic so the two can be reported separately."""

    table_read: int = 0
    table_write: int = 0
    store_read: int = 0
    store_write: int = 0

    def table_total(self) -> int:
        return self.table_read + self.table_write

    def store_total(self) -> int:
        return self.store_read + self.store_write

    def total(self) -> int:
        return self.table_total() + self.store_total()

    def snapshot(self) -> "IoCounter":
        return replace(self)

    def since(self, earlier: "IoCounter") -> "IoCounter":
        return IoCounter(
            table_read=self.table_read - earlier.table_read,
            table_write=self.table_write - earlier.table_write,
            store_read=self.store_read - earlier.store_read,
            store_write=self.store_write - earlier.store_write,
        )


@dataclass
class BufferBudget:
    """Memory allowance for table operations.

    table_bytes is the working buffer for scans, sorts and joins;
    page_size only matters for the sort fan-in computation.  scratch_dir
    is where run files and other temporaries go (defaults to the system
    temp dir).
    """

    table_bytes: int = 128 * 2**20
    page_size: int = DEFAULT_PAGE_SIZE
    scratch_dir: str | None = None

    def __post_init__(self) -> None:
        if self.page_size <= 0:
            raise ValueError("page_size must be positive")
        if self.table_bytes < 2 * self.page_size:
            raise ValueError("buffer must hold at least two pages")

    @property
    def pages(self) -> int:
        return self.table_bytes // self.page_size

    @property
    def fan_in(self) -> int:
        # A two-page budget still needs an output page next to the input
        # pages, so the fan-in is clamped to 2 (three-page working set).
        return max(2, self.pages - 1)

    def mktemp(self, suffix: str) -> str:
        fd, path = tempfile.mkstemp(suffix=suffix, dir=self.scratch_dir)
        os.close(fd)
        return path


@dataclass
class Table:
    """A file of fixed-width records."""

    path: str
    dtype: np.dtype

    @property
    def nbytes(self) -> int:
        try:
            return os.path.getsize(self.path)
        except FileNotFoundError:
            return 0

    @property
    def count(self) -> int:
        size = self.nbytes
        if size % self.dtype.itemsize:
            raise IntegrityError(f"truncated table file: {self.path}")
        return size // self.dtype.itemsize

    def chunks(
        self, chunk_bytes: int, counters: IoCounter, kind: str = "table"
    ) -> Iterator[np.ndarray]:
        """Stream the table in record-aligned chunks of at most
        chunk_bytes, charging each read."""
        per = max(1, chunk_bytes // self.dtype.itemsize)
        if self.nbytes == 0:
            return
        with open(self.path, "rb") as fh:
            while True:
                arr = np.fromfile(fh, dtype=self.dtype, count=per)
                if arr.size == 0:
                    return
                _charge(counters, kind, "read", arr.nbytes)
                yield arr

    def read_all(self, counters: IoCounter, kind: str = "table") -> np.ndarray:
        if self.nbytes == 0:
            return np.empty(0, dtype=self.dtype)
        arr = np.fromfile(self.path, dtype=self.dtype)
        _charge(counters, kind, "read", arr.nbytes)
        return arr

    def read_range(
        self, start: int, count: int, counters: IoCounter, kind: str = "table"
    ) -> np.ndarray:
        """Seek-based read of records [start, start + count)."""
        if count <= 0:
            return np.empty(0, dtype=self.dtype)
        with open(self.path, "rb") as fh:
            fh.seek(start * self.dtype.itemsize)
            arr = np.fromfile(fh, dtype=self.dtype, count=count)
        _charge(counters, kind, "read", arr.nbytes)
        return arr


class TableWriter:
    """Sequential record writer; charges every append."""

    def __init__(
        self,
        path: str,
        dtype: np.dtype,
        counters: IoCounter,
        kind: str = "table",
    ):
        self.path = path
        self.dtype = dtype
        self._counters = counters
        self._kind = kind
        self._fh = open(path, "wb")
        self.records_written = 0

    def append(self, arr: np.ndarray) -> None:
        if arr.dtype != self.dtype:
            raise TypeError(f"expected {self.dtype}, got {arr.dtype}")
        if arr.size == 0:
            return
        np.ascontiguousarray(arr).tofile(self._fh)
        _charge(self._counters, self._kind, "write", arr.nbytes)
        self.records_written += arr.size

    def close(self) -> Table:
        self._fh.close()
        return Table(self.path, self.dtype)

    def __enter__(self) -> "TableWriter":
        return self

    def __exit__(self, *exc) -> None:
        self._fh.close()


def _charge(counters: IoCounter, kind: str, direction: str, nbytes: int) -> None:
    if kind == "table":
        if direction == "read":
            counters.table_read += nbytes
        else:
            counters.table_write += nbytes
    else:
        if direction == "read":
            counters.store_read += nbytes
        else:
            counters.store_write += nbytes


def write_table(
    path: str, arr: np.ndarray, counters: IoCounter, kind: str = "table"
) -> Table:
    with TableWriter(path, arr.dtype, counters, kind) as w:
        w.append(arr)
    return Table(path, arr.dtype)


def scan(table: Table, budget: BufferBudget, counters: IoCounter) -> Iterator[np.ndarray]:
    return table.chunks(budget.table_bytes, counters)


def sort_records(arr: np.ndarray, fields: Sequence[str]) -> np.ndarray:
    """Stable in-memory sort by the given fields, major first."""
    order = np.lexsort(tuple(arr[f] for f in reversed(fields)))
    return arr[order]


def dedup_sorted(arr: np.ndarray) -> np.ndarray:
    """Drop exact-duplicate consecutive records (input must be sorted by
    every field that can differ)."""
    if arr.size <= 1:
        return arr
    keep = np.zeros(arr.size, dtype=bool)
    keep[0] = True
    for f in arr.dtype.names:
        keep[1:] |= arr[f][1:] != arr[f][:-1]
    return arr[keep]


def leq_mask(arr: np.ndarray, fields: Sequence[str], bound: tuple) -> np.ndarray:
    """Mask of records whose `fields` tuple is <= bound, compared
    lexicographically."""
    result = np.zeros(arr.size, dtype=bool)
    tie = np.ones(arr.size, dtype=bool)
    for f, b in zip(fields, bound):
        col = arr[f]
        result |= tie & (col < b)
        tie = tie & (col == b)
    return result | tie


def _key_of_last(arr: np.ndarray, fields: Sequence[str]) -> tuple:
    rec = arr[-1]
    return tuple(int(rec[f]) for f in fields)


class _RunReader:
    """One sorted run inside a shared spill file."""

    def __init__(self, fh, dtype: np.dtype, offset_bytes: int, count: int):
        self._fh = fh
        self._dtype = dtype
        self._offset = offset_bytes
        self._remaining = count
        self.tail_key: tuple | None = None

    @property
    def exhausted(self) -> bool:
        return self._remaining == 0

    def load(
        self, nrecords: int, fields: Sequence[str], counters: IoCounter, kind: str
    ) -> np.ndarray:
        take = min(nrecords, self._remaining)
        self._fh.seek(self._offset)
        arr = np.fromfile(self._fh, dtype=self._dtype, count=take)
        if arr.size != take:
            raise IntegrityError("short read from sort run")
        _charge(counters, kind, "read", arr.nbytes)
        self._offset += arr.nbytes
        self._remaining -= take
        if arr.size:
            self.tail_key = _key_of_last(arr, fields)
        return arr


def external_sort(
    source: Table,
    fields: Sequence[str],
    budget: BufferBudget,
    counters: IoCounter,
    dst_path: str,
    *,
    dedup: bool = False,
    project: Sequence[str] | None = None,
    kind: str = "table",
) -> Table:
    """Sort `source` by `fields` into a new table at dst_path.

    With dedup=True exact-duplicate records are dropped; the sort key
    must then cover every output field so duplicates are adjacent.  With
    `project` the output keeps only those fields (projection happens
    during run formation, before anything is spilled).
    """
    out_dtype = source.dtype if project is None else np.dtype(
        [(f, source.dtype.fields[f][0]) for f in project], align=False
    )
    if dedup and set(fields) != set(out_dtype.names):
        raise ValueError("dedup requires the sort key to cover all fields")

    reader = source.chunks(budget.table_bytes, counters, kind)

    def prep(chunk: np.ndarray) -> np.ndarray:
        if project is not None:
            proj = np.empty(chunk.size, dtype=out_dtype)
            for f in out_dtype.names:
                proj[f] = chunk[f]
            chunk = proj
        chunk = sort_records(chunk, fields)
        if dedup:
            chunk = dedup_sorted(chunk)
        return chunk

    first = next(reader, None)
    if first is None:
        open(dst_path, "wb").close()
        return Table(dst_path, out_dtype)
    second = next(reader, None)
    if second is None:
        # Single-run case: sort in memory and stream straight to the
        # destination, total traffic exactly read + write.
        return write_table(dst_path, prep(first), counters, kind)

    # Run formation into one shared spill file.
    spill_path = budget.mktemp(".runs")
    runs: list[tuple[int, int]] = []  # (offset_bytes, record_count)
    with open(spill_path, "wb") as spill:
        offset = 0
        for chunk in itertools.chain([first, second], reader):
            chunk = prep(chunk)
            np.ascontiguousarray(chunk).tofile(spill)
            _charge(counters, kind, "write", chunk.nbytes)
            runs.append((offset, chunk.size))
            offset += chunk.nbytes

    fan_in = budget.fan_in
    try:
        while True:
            last_pass = len(runs) <= fan_in
            groups = [runs[i : i + fan_in] for i in range(0, len(runs), fan_in)]
            next_spill = None if last_pass else budget.mktemp(".runs")
            next_runs: list[tuple[int, int]] = []
            next_offset = 0
            with open(spill_path, "rb") as src_fh:
                out_fh = open(dst_path if last_pass else next_spill, "wb")
                try:
                    for group in groups:
                        written = _merge_group(
                            src_fh,
                            out_fh,
                            out_dtype,
                            group,
                            fields,
                            budget,
                            counters,
                            dedup,
                            kind,
                        )
                        next_runs.append((next_offset, written))
                        next_offset += written * out_dtype.itemsize
                finally:
                    out_fh.close()
            os.unlink(spill_path)
            if last_pass:
                return Table(dst_path, out_dtype)
            spill_path = next_spill
            runs = next_runs
    except BaseException:
        for p in (spill_path, dst_path):
            if p and os.path.exists(p):
                os.unlink(p)
        raise


def _merge_group(
    src_fh,
    out_fh,
    dtype: np.dtype,
    group: list[tuple[int, int]],
    fields: Sequence[str],
    budget: BufferBudget,
    counters: IoCounter,
    dedup: bool,
    kind: str,
) -> int:
    """Merge one group of runs from src_fh into out_fh.  Returns the
    record count written.

    Pool-based merge: each run contributes chunks of roughly
    budget / (fan_in + 1); the loaded records are kept merged in a pool,
    and the prefix of the pool at or below the smallest tail key among
    runs with unloaded data is safe to emit.
    """
    chunk_records = max(1, budget.table_bytes // ((len(group) + 1) * dtype.itemsize))
    readers = [_RunReader(src_fh, dtype, off, cnt) for off, cnt in group]

    pieces = [r.load(chunk_records, fields, counters, kind) for r in readers]
    pool = sort_records(np.concatenate(pieces), fields)

    written = 0
    last_emitted: bytes | None = None

    def emit(batch: np.ndarray) -> None:
        nonlocal written, last_emitted
        if dedup:
            batch = dedup_sorted(batch)
            if (
                last_emitted is not None
                and batch.size
                and batch[0].tobytes() == last_emitted
            ):
                batch = batch[1:]
        if batch.size:
            np.ascontiguousarray(batch).tofile(out_fh)
            _charge(counters, kind, "write", batch.nbytes)
            written += batch.size
            if dedup:
                last_emitted = batch[-1].tobytes()

    while True:
        unfinished = [r for r in readers if not r.exhausted]
        if not unfinished:
            emit(pool)
            return written
        cutoff = min(r.tail_key for r in unfinished)
        safe = leq_mask(pool, fields, cutoff)
        n_safe = int(np.count_nonzero(safe))
        # leq_mask selects a prefix of the sorted pool.
        emit(pool[:n_safe])
        pool = pool[n_safe:]
        fresh = [
            r.load(chunk_records, fields, counters, kind)
            for r in unfinished
            if r.tail_key <= cutoff
        ]
        pool = sort_records(np.concatenate([pool] + fresh), fields)


class _Window:
    """Growable sorted window over a streamed table, used by the join."""

    def __init__(self, table: Table, chunk_bytes: int, counters: IoCounter, kind: str):
        self._chunks = table.chunks(chunk_bytes, counters, kind)
        self.buf = np.empty(0, dtype=table.dtype)
        self.exhausted = table.nbytes == 0

    def extend_until(self, key_field: str, key_value: int) -> None:
        """Pull chunks until the window's last key is > key_value or the
        table ends."""
        while not self.exhausted and (
            self.buf.size == 0 or int(self.buf[key_field][-1]) <= key_value
        ):
            nxt = next(self._chunks, None)
            if nxt is None:
                self.exhausted = True
                break
            self.buf = np.concatenate([self.buf, nxt]) if self.buf.size else nxt

    def drop_below(self, key_field: str, key_value: int) -> None:
        if self.buf.size:
            start = np.searchsorted(self.buf[key_field], key_value, side="left")
            if start:
                self.buf = self.buf[start:]


def merge_join(
    left: Table,
    left_key: str,
    right: Table,
    right_key: str,
    take: dict[str, str],
    budget: BufferBudget,
    counters: IoCounter,
    dst_path: str,
) -> Table:
    """Zipper join of two sorted tables.

    left must be sorted by left_key and right by right_key; right keys
    must be unique and every left key must occur in right (a dangling
    left key raises IntegrityError).  The output is the left records with
    each field in `take` overwritten by the named field of the matching
    right record: take maps left field -> right field.
    """
    half = max(left.dtype.itemsize, budget.table_bytes // 2)
    window = _Window(right, half, counters, "table")
    missing: list[int] = []
    with TableWriter(dst_path, left.dtype, counters) as out:
        for chunk in left.chunks(half, counters):
            lo = int(chunk[left_key][0])
            hi = int(chunk[left_key][-1])
            window.drop_below(right_key, lo)
            window.extend_until(right_key, hi)
            rk = window.buf[right_key]
            idx = np.searchsorted(rk, chunk[left_key], side="left")
            ok = idx < rk.size
            if rk.size:
                ok &= rk[np.minimum(idx, rk.size - 1)] == chunk[left_key]
            if not ok.all():
                for v in chunk[left_key][~ok][:10]:
                    missing.append(int(v))
                raise IntegrityError(
                    "left keys missing from right table: "
                    + ", ".join(str(m) for m in missing)
                )
            result = chunk.copy()
            for lf, rf in take.items():
                result[lf] = window.buf[rf][idx]
            out.append(result)
        table = out.close()
    return table


def check_keys_present(
    left: Table,
    left_key: str,
    right: Table,
    right_key: str,
    budget: BufferBudget,
    counters: IoCounter,
) -> list[int]:
    """Return up to 10 values of left_key that do not occur in right
    (both tables sorted by their key).  Empty list means all present."""
    half = max(left.dtype.itemsize, budget.table_bytes // 2)
    window = _Window(right, half, counters, "table")
    missing: list[int] = []
    for chunk in left.chunks(half, counters):
        lo = int(chunk[left_key][0])
        hi = int(chunk[left_key][-1])
        window.drop_below(right_key, lo)
        window.extend_until(right_key, hi)
        rk = window.buf[right_key]
        idx = np.searchsorted(rk, chunk[left_key], side="left")
        ok = (idx < rk.size)
        if rk.size:
            ok &= rk[np.minimum(idx, rk.size - 1)] == chunk[left_key]
        for v in np.unique(chunk[left_key][~ok]):
            if len(missing) < 10:
                missing.append(int(v))
        if len(missing) >= 10:
            break
    return missing


def search_sorted_table(
    table: Table,
    key_field: str,
    key: int,
    counters: IoCounter,
    kind: str = "table",
) -> tuple[int, int]:
    """Binary search a key's record range [lo, hi) in a sorted table
    using seek-based probe reads (each probe charged)."""

    def key_at(i: int) -> int:
        rec = table.read_range(i, 1, counters, kind)
        return int(rec[key_field][0])

    n = table.count
    lo, hi = 0, n
    while lo < hi:
        mid = (lo + hi) // 2
        if key_at(mid) < key:
            lo = mid + 1
        else:
            hi = mid
    first = lo
    hi = n
    while lo < hi:
        mid = (lo + hi) // 2
        if key_at(mid) <= key:
            lo = mid + 1
        else:
            hi = mid
    return first, lo


def gather_by_keys(
    table: Table,
    key_field: str,
    keys: np.ndarray,
    budget: BufferBudget,
    counters: IoCounter,
    kind: str = "table",
) -> np.ndarray:
    """All records of a sorted table whose key_field is in `keys`
    (sorted unique u64 array).

    Picks between seek-based range reads (time proportional to the
    touched rows) and one sequential scan, whichever is estimated
    cheaper in bytes; both charge exactly what they move.
    """
    if keys.size == 0:
        return np.empty(0, dtype=table.dtype)
    n = table.count
    if n == 0:
        return np.empty(0, dtype=table.dtype)
    itemsize = table.dtype.itemsize
    probe_cost = keys.size * 2 * (int(n).bit_length()) * itemsize
    if probe_cost * 4 < n * itemsize:
        parts = []
        for key in keys.tolist():
            lo, hi = search_sorted_table(table, key_field, int(key), counters, kind)
            if hi > lo:
                parts.append(table.read_range(lo, hi - lo, counters, kind))
        if not parts:
            return np.empty(0, dtype=table.dtype)
        return np.concatenate(parts)
    parts = []
    for chunk in table.chunks(budget.table_bytes, counters, kind):
        idx = np.searchsorted(keys, chunk[key_field])
        hit = (idx < keys.size) & (keys[np.minimum(idx, keys.size - 1)] == chunk[key_field])
        if hit.any():
            parts.append(chunk[hit])
    if not parts:
        return np.empty(0, dtype=table.dtype)
    return np.concatenate(parts)
