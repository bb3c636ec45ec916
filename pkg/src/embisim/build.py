"""Partition construction.

The partition is refined one level per iteration.  Iteration 0 groups
nodes by label; iteration j derives each node's signature from the
level j-1 ids of its out-neighbors and asks the signature store for the
level-j id.  Nothing ever random-accesses the node table: each iteration
is a fixed sequence of scans, one sort, and one merge join.

Per iteration j >= 1:

  a. shift: one scan over the node table copies pid_new into pid_old.
  b. the target-sorted edge table is merge-joined with the node table on
     target id = node id, filling each edge's target-partition column
     with the level j-1 id.
  c. the join output is projected to (source id, edge label, target
     partition id), sorted by that triple with duplicates dropped; per
     source, its slice of this table IS the pair list of its signature,
     already sorted and deduplicated.
  d. one zipper pass over the node table and the sorted triples builds
     each node's signature bytes, asks the store for ids (new ids are
     minted in ascending node id of first occurrence), and writes
     pid_new plus a raw per-level id column used later to assemble the
     history table.

When two consecutive levels have the same partition count the
refinement has stabilized (level j refines level j-1, so equal counts
mean equal partitions) and remaining iterations are skipped: the fresh
level-j ids are remapped onto the level j-1 ids, deeper levels alias
the stabilized store mapping, and their history columns are copies.
"""

from __future__ import annotations

import dataclasses
import os
import struct
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .graphdir import EDGES_TS, HISTORY, NODES, GraphDirectory, Staging
from .model import (
    NODE_DTYPE,
    SIG_PAIR_DTYPE,
    StateError,
    history_dtype,
    label_signature_bytes,
)
from .store import SCOPE_PER_ITERATION, SignatureStore
from .tables import (
    BufferBudget,
    IoCounter,
    Table,
    TableWriter,
    external_sort,
    merge_join,
)

_SIG_HEAD = struct.Struct("<QI")
_COL_DTYPE = np.dtype("<u8")


@dataclass
class IterationStats:
    iteration: int
    partition_count: int
    max_signature_pairs: int
    table_read: int
    table_write: int
    store_read: int
    store_write: int
    prepare_seconds: float
    signature_seconds: float


STATS_FIELDS = [f.name for f in dataclasses.fields(IterationStats)]


@dataclass
class BuildResult:
    k: int
    k_effective: int
    partition_counts: list[int]
    stats: list[IterationStats]


class Construction:
    """Shared iteration engine for full builds, rebuild-style
    maintenance, and view extensions."""

    def __init__(
        self,
        gdir: GraphDirectory,
        staging: Staging,
        store: SignatureStore,
        budget: BufferBudget,
        counters: IoCounter,
        config: RunConfig,
    ):
        self.gdir = gdir
        self.staging = staging
        self.store = store
        self.budget = budget
        self.counters = counters
        self.config = config
        self.stats: list[IterationStats] = []
        self.partition_counts: list[int] = []
        self.max_pairs_by_level: list[int] = []
        self.col_paths: dict[int, str] = {}
        self.nodes_cur: Table | None = None
        self.edges_ts_cur: Table | None = None
        # Maintenance runs the engine on working copies instead of the
        # committed tables, and against a store that already has level
        # mappings (so stabilization must not alias over them).
        self.nodes_src: Table | None = None
        self.edges_ts_src: Table | None = None
        self.alias_skip_existing = False
        self._scratch: list[str] = []

    def _tmp(self, suffix: str) -> str:
        path = self.budget.mktemp(suffix)
        self._scratch.append(path)
        return path

    def cleanup(self) -> None:
        for path in self._scratch:
            if os.path.exists(path):
                os.unlink(path)
        self._scratch.clear()

    # -- iteration 0 -----------------------------------------------------

    def iteration_zero(self) -> None:
        """Group nodes by label.  Ids are handed out in ascending label
        order (the node table is label-sorted for the pass, so the store
        sees labels in order and numbers them 1, 2, ...)."""
        t0 = time.perf_counter()
        start_io = self.counters.snapshot()
        src = self.nodes_src if self.nodes_src is not None else self.gdir.nodes_table()
        by_label = external_sort(
            src,
            ("nlabel", "nid"),
            self.budget,
            self.counters,
            self._tmp(".n0"),
        )
        t1 = time.perf_counter()
        self.store.begin_wave(0)
        assigned_path = self._tmp(".n0a")
        with TableWriter(assigned_path, NODE_DTYPE, self.counters) as w:
            for chunk in by_label.chunks(self.budget.table_bytes, self.counters):
                labels_here = chunk["nlabel"]
                bounds = np.flatnonzero(
                    np.r_[True, labels_here[1:] != labels_here[:-1]]
                )
                for i, start in enumerate(bounds):
                    end = bounds[i + 1] if i + 1 < bounds.size else labels_here.size
                    pid = self.store.insert(
                        0, label_signature_bytes(int(labels_here[start]))
                    )
                    chunk["pid0"][start:end] = pid
                chunk["pid_new"] = chunk["pid0"]
                chunk["pid_old"] = 0
                w.append(chunk)
        distinct, _ = self.store.end_wave()
        self.nodes_cur = external_sort(
            Table(assigned_path, NODE_DTYPE),
            ("nid",),
            self.budget,
            self.counters,
            self._tmp(".ncur"),
        )
        self.edges_ts_cur = (
            self.edges_ts_src
            if self.edges_ts_src is not None
            else self.gdir.edges_ts_table()
        )
        self.partition_counts.append(distinct)
        self.max_pairs_by_level.append(0)
        io = self.counters.since(start_io)
        t2 = time.perf_counter()
        self.stats.append(
            IterationStats(
                iteration=0,
                partition_count=distinct,
                max_signature_pairs=0,
                table_read=io.table_read,
                table_write=io.table_write,
                store_read=io.store_read,
                store_write=io.store_write,
                prepare_seconds=t1 - t0,
                signature_seconds=t2 - t1,
            )
        )

    # -- refinement iterations ---------------------------------------------

    def run(self, start_level: int, end_level: int, early_stop: bool) -> int:
        """Run iterations start..end; returns the effective level (the
        iteration at which refinement was found stable, or end_level)."""
        for j in range(start_level, end_level + 1):
            self._iterate(j)
            if early_stop and self.partition_counts[j] == self.partition_counts[j - 1]:
                self._stabilize(j, end_level)
                return j
            if self.store.scope == SCOPE_PER_ITERATION:
                self.store.reset_iteration(j)
        return end_level

    def _iterate(self, j: int) -> None:
        t0 = time.perf_counter()
        start_io = self.counters.snapshot()

        shifted_path = self._tmp(f".n{j}s")
        with TableWriter(shifted_path, NODE_DTYPE, self.counters) as w:
            for chunk in self.nodes_cur.chunks(self.budget.table_bytes, self.counters):
                chunk["pid_old"] = chunk["pid_new"]
                w.append(chunk)
        shifted = Table(shifted_path, NODE_DTYPE)

        filled = merge_join(
            self.edges_ts_cur,
            "tid",
            shifted,
            "nid",
            {"pid_old_dst": "pid_old"},
            self.budget,
            self.counters,
            self._tmp(f".e{j}"),
        )
        self.edges_ts_cur = filled

        triples = external_sort(
            filled,
            ("sid", "elabel", "pid_old_dst"),
            self.budget,
            self.counters,
            self._tmp(f".f{j}"),
            dedup=True,
            project=("sid", "elabel", "pid_old_dst"),
        )
        t1 = time.perf_counter()

        self.store.begin_wave(j)
        col_path = self._tmp(f".col{j}")
        max_pairs = 0
        nodes_out_path = self._tmp(f".n{j}")
        with TableWriter(nodes_out_path, NODE_DTYPE, self.counters) as w, open(
            col_path, "wb"
        ) as col_fh:
            feed = triples.chunks(self.budget.table_bytes // 2, self.counters)
            leftover = np.empty(0, dtype=triples.dtype)
            feed_done = triples.nbytes == 0
            for chunk in shifted.chunks(self.budget.table_bytes // 2, self.counters):
                hi = int(chunk["nid"][-1])
                while not feed_done and (
                    leftover.size == 0 or int(leftover["sid"][-1]) <= hi
                ):
                    nxt = next(feed, None)
                    if nxt is None:
                        feed_done = True
                        break
                    leftover = (
                        np.concatenate([leftover, nxt]) if leftover.size else nxt
                    )
                cut = np.searchsorted(leftover["sid"], hi, side="right")
                part, leftover = leftover[:cut], leftover[cut:]

                pairs = np.empty(part.size, dtype=SIG_PAIR_DTYPE)
                pairs["elabel"] = part["elabel"]
                pairs["pid"] = part["pid_old_dst"]
                raw = pairs.tobytes()
                starts = np.searchsorted(part["sid"], chunk["nid"], side="left")
                ends = np.searchsorted(part["sid"], chunk["nid"], side="right")
                if chunk.size:
                    max_pairs = max(max_pairs, int((ends - starts).max()))
                psize = SIG_PAIR_DTYPE.itemsize
                pack = _SIG_HEAD.pack
                sigs = [
                    pack(int(p0), int(e - s)) + raw[s * psize : e * psize]
                    for p0, s, e in zip(chunk["pid0"], starts, ends)
                ]
                pids = self.store.bulk_assign(j, sigs)
                chunk["pid_new"] = pids
                w.append(chunk)
                pids.tofile(col_fh)
                self.counters.table_write += pids.nbytes

        distinct, _ = self.store.end_wave()
        self.nodes_cur = Table(nodes_out_path, NODE_DTYPE)
        self.col_paths[j] = col_path
        self.partition_counts.append(distinct)
        self.max_pairs_by_level.append(max_pairs)
        io = self.counters.since(start_io)
        t2 = time.perf_counter()
        self.stats.append(
            IterationStats(
                iteration=j,
                partition_count=distinct,
                max_signature_pairs=max_pairs,
                table_read=io.table_read,
                table_write=io.table_write,
                store_read=io.store_read,
                store_write=io.store_write,
                prepare_seconds=t1 - t0,
                signature_seconds=t2 - t1,
            )
        )

    def _stabilize(self, j: int, end_level: int) -> None:
        """Refinement stopped refining at iteration j: map the fresh
        level-j ids back onto the level j-1 ids and alias deeper levels.

        Equal counts at consecutive levels imply the partitions are
        equal (level j always refines level j-1), so pid_new -> pid_old
        on the node table is a bijection.
        """
        mapping: dict[int, int] = {}
        for chunk in self.nodes_cur.chunks(self.budget.table_bytes, self.counters):
            fresh = chunk["pid_new"]
            old = chunk["pid_old"]
            firsts = np.flatnonzero(np.r_[True, fresh[1:] != fresh[:-1]])
            for i in firsts:
                mapping[int(fresh[i])] = int(old[i])
        self.store.remap_level(j, mapping)
        # Column j becomes a copy of column j-1; rewrite both the column
        # file and the node table's pid_new in one pass.
        col_path = self._tmp(f".col{j}r")
        nodes_path = self._tmp(f".n{j}r")
        with TableWriter(nodes_path, NODE_DTYPE, self.counters) as w, open(
            col_path, "wb"
        ) as col_fh:
            for chunk in self.nodes_cur.chunks(self.budget.table_bytes, self.counters):
                chunk["pid_new"] = chunk["pid_old"]
                w.append(chunk)
                col = np.ascontiguousarray(chunk["pid_new"], dtype=_COL_DTYPE)
                col.tofile(col_fh)
                self.counters.table_write += col.nbytes
        self.nodes_cur = Table(nodes_path, NODE_DTYPE)
        self.col_paths[j] = col_path
        self.store.alias_levels(
            j, range(j + 1, end_level + 1), skip_existing=self.alias_skip_existing
        )

    # -- final table assembly -----------------------------------------------

    def finalize(
        self,
        k_stored: int,
        k_effective: int,
        base_history: Table | None = None,
        base_levels: int = 0,
    ) -> None:
        """Assemble history.tbl and the refreshed nodes.tbl.

        Levels 1..base_levels come from base_history (view extension);
        levels base_levels+1..k_effective from this run's column files;
        anything deeper copies the stabilized column.
        """
        hist_dtype = history_dtype(k_stored)
        nodes = self.nodes_cur
        chunk_records = max(
            1,
            self.budget.table_bytes
            // (hist_dtype.itemsize + NODE_DTYPE.itemsize * 2 + 8 * max(1, k_stored)),
        )
        col_handles = {
            j: open(path, "rb") for j, path in self.col_paths.items() if j <= k_stored
        }
        base_fh = open(base_history.path, "rb") if base_history is not None else None
        try:
            with TableWriter(
                self.staging.path_for(HISTORY), hist_dtype, self.counters
            ) as hist_w, TableWriter(
                self.staging.path_for(NODES), NODE_DTYPE, self.counters
            ) as nodes_w, open(
                nodes.path, "rb"
            ) as nodes_fh:
                while True:
                    chunk = np.fromfile(nodes_fh, dtype=NODE_DTYPE, count=chunk_records)
                    if chunk.size == 0:
                        break
                    self.counters.table_read += chunk.nbytes
                    out = np.empty(chunk.size, dtype=hist_dtype)
                    out["nid"] = chunk["nid"]
                    out["nlabel"] = chunk["nlabel"]
                    out["pid0"] = chunk["pid0"]
                    if base_fh is not None:
                        base = np.fromfile(
                            base_fh, dtype=base_history.dtype, count=chunk.size
                        )
                        self.counters.table_read += base.nbytes
                        for j in range(1, base_levels + 1):
                            out[f"pid{j}"] = base[f"pid{j}"]
                    for j in range(base_levels + 1, k_stored + 1):
                        src = min(j, k_effective)
                        if src in col_handles and src == j:
                            col = np.fromfile(
                                col_handles[j], dtype=_COL_DTYPE, count=chunk.size
                            )
                            self.counters.table_read += col.nbytes
                            out[f"pid{j}"] = col
                        elif src == 0:
                            out[f"pid{j}"] = out["pid0"]
                        else:
                            out[f"pid{j}"] = out[f"pid{src}"]
                    hist_w.append(out)

                    final = chunk.copy()
                    final["pid_old"] = (
                        out[f"pid{k_stored - 1}"] if k_stored >= 1 else 0
                    )
                    final["pid_new"] = out[f"pid{k_stored}"] if k_stored >= 1 else out["pid0"]
                    nodes_w.append(final)
        finally:
            for fh in col_handles.values():
                fh.close()
            if base_fh is not None:
                base_fh.close()

        # The edge table's target-partition column is whatever the last
        # join filled in (level k-1 once all iterations have run).
        if self.edges_ts_cur.path != self.gdir.path(EDGES_TS):
            self.staging.adopt(EDGES_TS, self.edges_ts_cur.path)


def build_bisim(
    gdir: GraphDirectory,
    k: int,
    config: RunConfig,
    *,
    overwrite: bool = False,
) -> BuildResult:
    """Construct the level-0..k partition for an ingested graph."""
    if k < 0:
        raise StateError("k must be non-negative")
    meta = gdir.read_meta()
    if meta.get("built") and not overwrite:
        raise StateError(
            f"graph at {gdir.root} already has a partition; pass overwrite"
        )
    budget = config.table_budget()
    counters = IoCounter()
    with gdir.lock():
        import shutil

        if os.path.exists(gdir.store_root):
            shutil.rmtree(gdir.store_root)
        store = SignatureStore.create(
            gdir.store_root,
            budget,
            counters,
            backend=config.backend,
            scope=config.scope,
            store_bytes=config.store_buffer,
        )
        staging = gdir.staging()
        work = Construction(gdir, staging, store, budget, counters, config)
        try:
            work.iteration_zero()
            k_eff = work.run(1, k, config.early_stop) if k >= 1 else 0
            work.finalize(k_stored=k, k_effective=k_eff)
            store.flush()
            store.close()
            counts = _pad_counts(work.partition_counts, k)
            meta.update(
                built=True,
                k=k,
                k_stored=k,
                k_valid=k,
                k_eff_valid=k_eff,
                scope=config.scope,
                backend=config.backend,
                partition_counts=counts,
                last_op={
                    "kind": "build",
                    "io": dataclasses.asdict(counters),
                },
            )
            staging.commit(meta)
        except BaseException:
            staging.abort()
            raise
        finally:
            work.cleanup()
    return BuildResult(
        k=k,
        k_effective=k_eff,
        partition_counts=counts,
        stats=work.stats,
    )


def _pad_counts(counts: list[int], k: int) -> list[int]:
    """Partition counts for levels 0..k; levels skipped by the early
    stop repeat the stabilized count."""
    out = list(counts)
    while len(out) < k + 1:
        out.append(out[-1])
    return out


def write_stats_csv(path: str, rows: list[IterationStats]) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=STATS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(dataclasses.asdict(row))
