"""Incremental maintenance of a built partition.

Each mutation runs as one transaction: working copies of the affected
tables accumulate in scratch files and are committed with the usual
staged-rename dance, so a crash leaves the previous state intact.

Propagation works level by level through a change queue.  Draining
level j yields the distinct node ids whose level-j signature may have
changed; their signatures are recomputed from the level j-1 history
column and compared against the stored level-j column.  Only nodes
whose id actually changed push their in-neighbors onto level j+1.
Column updates are batched per level and applied with one merge pass
over the history table before the next level is drained, and a level
with zero changes costs no writes at all.

When a drained level covers more than a θ-fraction of the nodes the
per-node bookkeeping is worse than starting over, so the transaction
switches to a rebuild that reuses the signature store (ids stay stable
for every signature already seen).

Level working sets (the drained node ids, their out-edges, and the
gathered history rows) are processed in memory; at the graph sizes this
tool targets a level working set is at most a few hundred megabytes.
Reads from the sorted tables choose between seek-based range lookups
and a sequential scan by estimated byte cost.

The store's global_counter scope is required: per_iteration_counter
discards the per-level mappings that updates compare against.
"""

from __future__ import annotations

import dataclasses
import os
import struct
import time
from dataclasses import dataclass

import numpy as np

from .build import Construction, IterationStats, _pad_counts
from .changequeue import ChangeQueue
from .config import RunConfig
from .graphdir import (
    EDGES_ST,
    EDGES_TS,
    HISTORY,
    LABELS,
    NODES,
    GraphDirectory,
)
from .model import (
    EDGE_DTYPE,
    NODE_DTYPE,
    InputError,
    LabelDict,
    StateError,
    history_dtype,
)
from .store import SCOPE_GLOBAL, SignatureStore
from .tables import (
    IoCounter,
    Table,
    TableWriter,
    gather_by_keys,
    leq_mask,
    sort_records,
)

_SIG_HEAD = struct.Struct("<QI")
_PAIR = np.dtype([("elabel", "<u4"), ("pid", "<u8")], align=False)


@dataclass
class UpdateStats:
    level: int
    checked_nodes: int
    changed_nodes: int
    changed_partitions: int
    action: str  # "check" or "rebuild"
    table_read: int
    table_write: int
    store_read: int
    store_write: int
    seconds: float


UPDATE_STATS_FIELDS = [f.name for f in dataclasses.fields(UpdateStats)]


@dataclass
class UpdateResult:
    kind: str
    levels: list[UpdateStats]
    rebuilt: bool
    rebuild_stats: list[IterationStats]
    io: IoCounter


def switch_heuristic(queued_distinct: int, node_count: int, theta: float) -> bool:
    """True when a level's pending set is so large that rebuilding from
    scratch beats checking nodes one by one."""
    return node_count > 0 and queued_distinct / node_count > theta


class _Txn:
    """One maintenance transaction over a built graph directory."""

    def __init__(self, gdir: GraphDirectory, config: RunConfig, kind: str):
        self.gdir = gdir
        self.config = config
        self.kind = kind
        self.meta = gdir.require_built()
        if self.meta["scope"] != SCOPE_GLOBAL:
            raise StateError(
                "updates need the global_counter store scope; this graph "
                f"was built with {self.meta['scope']} (rebuild to change)"
            )
        self.k = self.meta["k"]
        self.budget = config.table_budget()
        self.counters = IoCounter()
        self.store = SignatureStore.open(
            gdir.store_root,
            self.budget,
            self.counters,
            store_bytes=config.store_buffer,
        )
        self.labels = gdir.labels()
        self.labels_dirty = False
        self.staging = gdir.staging()
        self.hist_dtype = history_dtype(self.meta["k_stored"])
        self._scratch: list[str] = []
        # Working copies start as the committed tables; mutation steps
        # replace them with scratch files.
        self.nodes = gdir.nodes_table()
        self.history = gdir.history_table(self.meta)
        self.edges_st = gdir.edges_st_table()
        self.edges_ts = gdir.edges_ts_table()
        self.levels: list[UpdateStats] = []
        self.rebuild_stats: list[IterationStats] = []
        self.rebuilt = False
        self.any_changes = False
        # set only when a partition column was rewritten (a pure edge or
        # row change leaves nodes.tbl's pid columns intact)
        self.columns_dirty = False

    def tmp(self, suffix: str) -> str:
        path = self.budget.mktemp(suffix)
        self._scratch.append(path)
        return path

    def node_count(self) -> int:
        return self.nodes.count

    def cleanup(self) -> None:
        for path in self._scratch:
            if os.path.exists(path):
                os.unlink(path)
        self._scratch.clear()

    def commit(self, meta_updates: dict) -> None:
        self.store.flush()
        self.store.close()
        for name, table in (
            (NODES, self.nodes),
            (HISTORY, self.history),
            (EDGES_ST, self.edges_st),
            (EDGES_TS, self.edges_ts),
        ):
            if table.path != self.gdir.path(name) and not self._already_staged(name):
                self.staging.adopt(name, table.path)
        if self.labels_dirty:
            with open(self.staging.path_for(LABELS), "w", encoding="utf-8") as fh:
                fh.write(self.labels.dump_lines())
        meta = dict(self.meta)
        meta.update(meta_updates)
        meta["last_op"] = {"kind": self.kind, "io": dataclasses.asdict(self.counters)}
        if self.any_changes:
            meta["k_valid"] = meta["k"]
            if not self.rebuilt:
                # Stability proven by an earlier run may no longer hold.
                meta["k_eff_valid"] = meta["k_stored"]
                meta["partition_counts"] = None
        self.staging.commit(meta)

    def _already_staged(self, name: str) -> bool:
        return os.path.exists(self.gdir.path(name) + ".stage")

    def abort(self) -> None:
        self.store.close()
        self.staging.abort()


def _unique_u64(values) -> np.ndarray:
    return np.unique(np.asarray(values, dtype="<u8"))


# -- edge batch helpers -------------------------------------------------------


def _edge_batch(
    txn: _Txn, edges: list[tuple[int, str, int]], *, allow_new_labels: bool
) -> np.ndarray:
    """Validate and encode an edge batch against the current dictionary."""
    if not edges:
        return np.empty(0, dtype=EDGE_DTYPE)
    if allow_new_labels:
        fresh = txn.labels.add_new(lab for _, lab, _ in edges)
        if fresh:
            txn.labels_dirty = True
    batch = np.empty(len(edges), dtype=EDGE_DTYPE)
    for i, (sid, lab, tid) in enumerate(edges):
        lid = txn.labels.id_of(lab)
        if lid is None:
            raise InputError(f"unknown edge label: {lab!r}")
        batch[i] = (sid, lid, tid, 0)
    uniq = np.unique(batch)
    if uniq.size != batch.size:
        raise InputError("duplicate edges in the batch")
    return sort_records(batch, ("sid", "tid", "elabel"))


def _require_nodes_exist(txn: _Txn, nids: np.ndarray, what: str) -> None:
    rows = gather_by_keys(txn.nodes, "nid", nids, txn.budget, txn.counters)
    if rows.size != nids.size:
        present = set(rows["nid"].tolist())
        missing = [str(n) for n in nids.tolist() if n not in present][:10]
        raise InputError(f"{what} unknown node ids: {', '.join(missing)}")


def _edge_key_set(rows: np.ndarray) -> set[tuple[int, int, int]]:
    return {
        (int(r["sid"]), int(r["elabel"]), int(r["tid"])) for r in rows
    }


def _merge_edge_rows(
    txn: _Txn, table: Table, batch: np.ndarray, order: tuple[str, ...], suffix: str
) -> Table:
    """One merge pass folding a sorted batch into a sorted edge table."""
    batch = sort_records(batch, order)
    out_path = txn.tmp(suffix)
    pos = 0
    with TableWriter(out_path, EDGE_DTYPE, txn.counters) as w:
        for chunk in table.chunks(txn.budget.table_bytes, txn.counters):
            bound = tuple(int(chunk[f][-1]) for f in order)
            take = batch[pos:]
            if take.size:
                cut = int(np.count_nonzero(leq_mask(take, order, bound)))
                if cut:
                    merged = sort_records(
                        np.concatenate([chunk, take[:cut]]), order
                    )
                    w.append(merged)
                    pos += cut
                    continue
            w.append(chunk)
        if pos < batch.size:
            w.append(batch[pos:])
    return Table(out_path, EDGE_DTYPE)


def _filter_edge_rows(
    txn: _Txn, table: Table, doomed: set[tuple[int, int, int]], suffix: str
) -> tuple[Table, int]:
    """Rewrite an edge table dropping the doomed (sid, elabel, tid)
    triples; returns the new table and the number of rows removed."""
    out_path = txn.tmp(suffix)
    removed = 0
    with TableWriter(out_path, EDGE_DTYPE, txn.counters) as w:
        for chunk in table.chunks(txn.budget.table_bytes, txn.counters):
            keep = np.ones(chunk.size, dtype=bool)
            for i, r in enumerate(chunk):
                if (int(r["sid"]), int(r["elabel"]), int(r["tid"])) in doomed:
                    keep[i] = False
                    removed += 1
            w.append(chunk[keep])
    return Table(out_path, EDGE_DTYPE), removed


# -- the level loop -----------------------------------------------------------


def _propagate(txn: _Txn, queue: ChangeQueue) -> None:
    while True:
        drained = queue.drain_min_level()
        if drained is None:
            return
        level, pending = drained
        if pending.size == 0:
            continue
        n_total = txn.node_count()
        if switch_heuristic(pending.size, n_total, txn.config.theta):
            t0 = time.perf_counter()
            start_io = txn.counters.snapshot()
            queue.clear()
            _rebuild(txn)
            io = txn.counters.since(start_io)
            txn.levels.append(
                UpdateStats(
                    level=level,
                    checked_nodes=int(pending.size),
                    changed_nodes=0,
                    changed_partitions=0,
                    action="rebuild",
                    table_read=io.table_read,
                    table_write=io.table_write,
                    store_read=io.store_read,
                    store_write=io.store_write,
                    seconds=time.perf_counter() - t0,
                )
            )
            return
        _check_level(txn, queue, level, pending)


def _check_level(
    txn: _Txn, queue: ChangeQueue, level: int, pending: np.ndarray
) -> None:
    t0 = time.perf_counter()
    start_io = txn.counters.snapshot()
    j = level

    rows_m = gather_by_keys(txn.history, "nid", pending, txn.budget, txn.counters)
    present = rows_m["nid"]  # deleted nodes drop out silently

    changed_nids = np.empty(0, dtype="<u8")
    new_changed = np.empty(0, dtype="<u8")
    changed_parts = 0
    if present.size:
        out_edges = gather_by_keys(
            txn.edges_st, "sid", present, txn.budget, txn.counters
        )
        if out_edges.size:
            tids = np.unique(out_edges["tid"])
            rows_t = gather_by_keys(txn.history, "nid", tids, txn.budget, txn.counters)
            pos = np.searchsorted(rows_t["nid"], out_edges["tid"])
            pid_prev = rows_t[f"pid{j - 1}"][pos]
        else:
            pid_prev = np.empty(0, dtype="<u8")

        pairs = np.empty(out_edges.size, dtype=_PAIR)
        pairs["elabel"] = out_edges["elabel"]
        pairs["pid"] = pid_prev
        order = np.lexsort((pairs["pid"], pairs["elabel"], out_edges["sid"]))
        sid_s = out_edges["sid"][order]
        pairs = pairs[order]
        if pairs.size:
            keep = np.r_[
                True,
                (sid_s[1:] != sid_s[:-1])
                | (pairs["elabel"][1:] != pairs["elabel"][:-1])
                | (pairs["pid"][1:] != pairs["pid"][:-1]),
            ]
            sid_s = sid_s[keep]
            pairs = pairs[keep]
        raw = pairs.tobytes()
        psize = _PAIR.itemsize
        starts = np.searchsorted(sid_s, present, side="left")
        ends = np.searchsorted(sid_s, present, side="right")
        pack = _SIG_HEAD.pack
        sigs = [
            pack(int(p0), int(e - s)) + raw[s * psize : e * psize]
            for p0, s, e in zip(rows_m["pid0"], starts, ends)
        ]
        txn.store.begin_wave(j)
        new_pids = txn.store.bulk_assign(j, sigs)
        txn.store.end_wave()

        old_pids = rows_m[f"pid{j}"]
        changed = new_pids != old_pids
        changed_nids = present[changed]
        new_changed = new_pids[changed]
        changed_parts = int(np.unique(new_changed).size) if changed_nids.size else 0

    if changed_nids.size:
        txn.any_changes = True
        txn.columns_dirty = True
        _apply_column_update(txn, j, changed_nids, new_changed)
        if j < txn.k:
            parents = gather_by_keys(
                txn.edges_ts, "tid", changed_nids, txn.budget, txn.counters
            )["sid"]
            if parents.size:
                queue.push(j + 1, np.unique(parents))

    io = txn.counters.since(start_io)
    txn.levels.append(
        UpdateStats(
            level=j,
            checked_nodes=int(pending.size),
            changed_nodes=int(changed_nids.size),
            changed_partitions=changed_parts,
            action="check",
            table_read=io.table_read,
            table_write=io.table_write,
            store_read=io.store_read,
            store_write=io.store_write,
            seconds=time.perf_counter() - t0,
        )
    )


def _apply_column_update(
    txn: _Txn, j: int, nids: np.ndarray, new_pids: np.ndarray
) -> None:
    """One merge pass over the history table writing a level's new ids."""
    out_path = txn.tmp(f".h{j}")
    with TableWriter(out_path, txn.hist_dtype, txn.counters) as w:
        for chunk in txn.history.chunks(txn.budget.table_bytes, txn.counters):
            idx = np.searchsorted(nids, chunk["nid"])
            hit = idx < nids.size
            if nids.size:
                safe = np.minimum(idx, nids.size - 1)
                hit &= nids[safe] == chunk["nid"]
            if hit.any():
                chunk[f"pid{j}"][hit] = new_pids[idx[hit]]
            w.append(chunk)
    txn.history = Table(out_path, txn.hist_dtype)


def _rebuild(txn: _Txn) -> None:
    """Start over on the current tables, reusing the signature store so
    ids stay stable."""
    work = Construction(
        txn.gdir, txn.staging, txn.store, txn.budget, txn.counters, txn.config
    )
    work.alias_skip_existing = True
    work.nodes_src = txn.nodes
    work.edges_ts_src = txn.edges_ts
    try:
        work.iteration_zero()
        k = txn.k
        k_eff = work.run(1, k, txn.config.early_stop) if k >= 1 else 0
        work.finalize(k_stored=k, k_effective=k_eff)
    finally:
        work.cleanup()
    txn.rebuilt = True
    txn.any_changes = True
    txn.rebuild_stats = work.stats
    txn.meta["k_stored"] = k
    txn.meta["k_valid"] = k
    txn.meta["k_eff_valid"] = k_eff
    txn.meta["partition_counts"] = _pad_counts(work.partition_counts, k)
    txn.hist_dtype = history_dtype(k)
    # finalize staged nodes/history/edges_ts; point the txn at them so
    # commit() does not re-stage the stale working copies
    txn.nodes = Table(txn.staging.path_for(NODES), NODE_DTYPE)
    txn.history = Table(txn.staging.path_for(HISTORY), txn.hist_dtype)
    txn.edges_ts = Table(txn.staging.path_for(EDGES_TS), EDGE_DTYPE)


def _refresh_nodes_from_history(txn: _Txn) -> None:
    """Rewrite nodes.tbl's pid columns from the history table (view
    level k).  Skipped entirely when nothing changed."""
    k = txn.meta["k"]
    out_path = txn.tmp(".nref")
    last = f"pid{k}" if k >= 1 else "pid0"
    prev = f"pid{k - 1}" if k >= 1 else None
    with TableWriter(out_path, NODE_DTYPE, txn.counters) as w:
        for chunk in txn.history.chunks(txn.budget.table_bytes, txn.counters):
            out = np.empty(chunk.size, dtype=NODE_DTYPE)
            out["nid"] = chunk["nid"]
            out["nlabel"] = chunk["nlabel"]
            out["pid0"] = chunk["pid0"]
            out["pid_old"] = chunk[prev] if prev else 0
            out["pid_new"] = chunk[last]
            w.append(out)
    txn.nodes = Table(out_path, NODE_DTYPE)


# -- public operations ---------------------------------------------------------


def add_edges(
    gdir: GraphDirectory, edges: list[tuple[int, str, int]], config: RunConfig
) -> UpdateResult:
    with gdir.lock():
        txn = _Txn(gdir, config, "add_edges")
        try:
            batch = _edge_batch(txn, edges, allow_new_labels=True)
            if batch.size == 0:
                txn.commit({})
                return _result(txn)
            endpoints = _unique_u64(
                np.concatenate([batch["sid"], batch["tid"]])
            )
            _require_nodes_exist(txn, endpoints, "new edges reference")
            existing = gather_by_keys(
                txn.edges_st, "sid", _unique_u64(batch["sid"]), txn.budget, txn.counters
            )
            clash = _edge_key_set(existing) & _edge_key_set(batch)
            if clash:
                some = sorted(clash)[:10]
                raise InputError(f"edges already present: {some}")

            # New rows carry the target's level-0 id in the partition
            # column as scratch; every use refreshes it from the history
            # column it actually needs.
            tgt_rows = gather_by_keys(
                txn.nodes, "nid", _unique_u64(batch["tid"]), txn.budget, txn.counters
            )
            pos = np.searchsorted(tgt_rows["nid"], batch["tid"])
            batch["pid_old_dst"] = tgt_rows["pid0"][pos]

            txn.edges_st = _merge_edge_rows(
                txn, txn.edges_st, batch, ("sid", "tid", "elabel"), ".est"
            )
            txn.edges_ts = _merge_edge_rows(
                txn, txn.edges_ts, batch, ("tid", "sid", "elabel"), ".ets"
            )
            txn.any_changes = True

            if txn.k >= 1:
                queue = ChangeQueue(txn.k, txn.budget, txn.counters)
                sources = _unique_u64(batch["sid"])
                for level in range(1, txn.k + 1):
                    queue.push(level, sources)
                _propagate(txn, queue)
                queue.close()
            if txn.columns_dirty and not txn.rebuilt:
                _refresh_nodes_from_history(txn)
            txn.commit({"edge_count": txn.meta["edge_count"] + int(batch.size)})
            return _result(txn)
        except BaseException:
            txn.abort()
            raise
        finally:
            txn.cleanup()


def delete_edges(
    gdir: GraphDirectory, edges: list[tuple[int, str, int]], config: RunConfig
) -> UpdateResult:
    with gdir.lock():
        txn = _Txn(gdir, config, "delete_edges")
        try:
            batch = _edge_batch(txn, edges, allow_new_labels=False)
            if batch.size == 0:
                txn.commit({})
                return _result(txn)
            existing = gather_by_keys(
                txn.edges_st, "sid", _unique_u64(batch["sid"]), txn.budget, txn.counters
            )
            have = _edge_key_set(existing)
            want = _edge_key_set(batch)
            missing = sorted(want - have)[:10]
            if missing:
                raise InputError(f"edges not present: {missing}")
            removed = _remove_edges_and_propagate(txn, want)
            if txn.columns_dirty and not txn.rebuilt:
                _refresh_nodes_from_history(txn)
            txn.commit({"edge_count": txn.meta["edge_count"] - removed})
            return _result(txn)
        except BaseException:
            txn.abort()
            raise
        finally:
            txn.cleanup()


def _remove_edges_and_propagate(
    txn: _Txn, doomed: set[tuple[int, int, int]]
) -> int:
    txn.edges_st, removed = _filter_edge_rows(txn, txn.edges_st, doomed, ".est")
    txn.edges_ts, _ = _filter_edge_rows(txn, txn.edges_ts, doomed, ".ets")
    txn.any_changes = True
    if txn.k >= 1 and doomed:
        queue = ChangeQueue(txn.k, txn.budget, txn.counters)
        sources = _unique_u64([s for s, _, _ in doomed])
        for level in range(1, txn.k + 1):
            queue.push(level, sources)
        _propagate(txn, queue)
        queue.close()
    return removed


def add_nodes(
    gdir: GraphDirectory, nodes: list[tuple[int, str]], config: RunConfig
) -> UpdateResult:
    with gdir.lock():
        txn = _Txn(gdir, config, "add_nodes")
        try:
            if not nodes:
                txn.commit({})
                return _result(txn)
            nids = np.array([n for n, _ in nodes], dtype="<u8")
            if np.unique(nids).size != nids.size:
                raise InputError("duplicate node ids in the batch")
            already = gather_by_keys(txn.nodes, "nid", np.sort(nids), txn.budget, txn.counters)
            if already.size:
                some = already["nid"].tolist()[:10]
                raise InputError(f"node ids already present: {some}")
            fresh = txn.labels.add_new(lab for _, lab in nodes)
            if fresh:
                txn.labels_dirty = True

            ordered = sorted(nodes)
            label_ids = [txn.labels.require(lab) for _, lab in ordered]
            # Level 0 first, then each deeper level for the whole batch
            # (an isolated node's signature above level 0 is just its
            # level-0 id with no pairs).
            from .model import label_signature_bytes

            pid0 = [txn.store.insert(0, label_signature_bytes(l)) for l in label_ids]
            k_stored = txn.meta["k_stored"]
            cols = [pid0]
            for level in range(1, k_stored + 1):
                sigs = [_SIG_HEAD.pack(p, 0) for p in pid0]
                cols.append([txn.store.insert(level, s) for s in sigs])

            hist_rows = np.empty(len(ordered), dtype=txn.hist_dtype)
            hist_rows["nid"] = [n for n, _ in ordered]
            hist_rows["nlabel"] = label_ids
            for j in range(k_stored + 1):
                hist_rows[f"pid{j}"] = cols[j]
            node_rows = np.empty(len(ordered), dtype=NODE_DTYPE)
            node_rows["nid"] = hist_rows["nid"]
            node_rows["nlabel"] = label_ids
            node_rows["pid0"] = cols[0]
            k = txn.k
            node_rows["pid_old"] = cols[k - 1] if k >= 1 else 0
            node_rows["pid_new"] = cols[k] if k >= 1 else cols[0]

            txn.nodes = _merge_node_rows(txn, txn.nodes, node_rows, NODE_DTYPE, ".nad")
            txn.history = _merge_node_rows(
                txn, txn.history, hist_rows, txn.hist_dtype, ".had"
            )
            txn.any_changes = True
            txn.commit({"node_count": txn.meta["node_count"] + len(ordered)})
            return _result(txn)
        except BaseException:
            txn.abort()
            raise
        finally:
            txn.cleanup()


def _merge_node_rows(
    txn: _Txn, table: Table, rows: np.ndarray, dtype, suffix: str
) -> Table:
    rows = rows[np.argsort(rows["nid"], kind="stable")]
    out_path = txn.tmp(suffix)
    pos = 0
    with TableWriter(out_path, dtype, txn.counters) as w:
        for chunk in table.chunks(txn.budget.table_bytes, txn.counters):
            bound = int(chunk["nid"][-1])
            cut = int(np.searchsorted(rows["nid"][pos:], bound, side="right"))
            if cut:
                merged = np.concatenate([chunk, rows[pos : pos + cut]])
                merged = merged[np.argsort(merged["nid"], kind="stable")]
                w.append(merged)
                pos += cut
            else:
                w.append(chunk)
        if pos < rows.size:
            w.append(rows[pos:])
    return Table(out_path, dtype)


def delete_nodes(
    gdir: GraphDirectory, nids: list[int], config: RunConfig
) -> UpdateResult:
    with gdir.lock():
        txn = _Txn(gdir, config, "delete_nodes")
        try:
            if not nids:
                txn.commit({})
                return _result(txn)
            gone = _unique_u64(nids)
            if gone.size != len(nids):
                raise InputError("duplicate node ids in the batch")
            _require_nodes_exist(txn, gone, "delete_nodes got")

            out_rows = gather_by_keys(txn.edges_st, "sid", gone, txn.budget, txn.counters)
            in_rows = gather_by_keys(txn.edges_ts, "tid", gone, txn.budget, txn.counters)
            doomed = _edge_key_set(out_rows) | _edge_key_set(in_rows)

            # Drop the node rows first so propagation only sees the
            # surviving graph (a queued deleted id is skipped benignly).
            txn.nodes = _filter_node_rows(txn, txn.nodes, gone, NODE_DTYPE, ".ndel")
            txn.history = _filter_node_rows(
                txn, txn.history, gone, txn.hist_dtype, ".hdel"
            )
            txn.any_changes = True
            removed = _remove_edges_and_propagate(txn, doomed) if doomed else 0
            if txn.columns_dirty and not txn.rebuilt:
                _refresh_nodes_from_history(txn)
            txn.commit(
                {
                    "node_count": txn.meta["node_count"] - int(gone.size),
                    "edge_count": txn.meta["edge_count"] - removed,
                }
            )
            return _result(txn)
        except BaseException:
            txn.abort()
            raise
        finally:
            txn.cleanup()


def _filter_node_rows(
    txn: _Txn, table: Table, gone: np.ndarray, dtype, suffix: str
) -> Table:
    out_path = txn.tmp(suffix)
    with TableWriter(out_path, dtype, txn.counters) as w:
        for chunk in table.chunks(txn.budget.table_bytes, txn.counters):
            idx = np.searchsorted(gone, chunk["nid"])
            hit = idx < gone.size
            if gone.size:
                safe = np.minimum(idx, gone.size - 1)
                hit &= gone[safe] == chunk["nid"]
            w.append(chunk[~hit])
    return Table(out_path, dtype)


def change_k(gdir: GraphDirectory, new_k: int, config: RunConfig) -> UpdateResult:
    """Change the view depth.  Decreases are metadata-only; increases
    reuse valid stored columns where possible and otherwise extend the
    refinement from the deepest valid column."""
    if new_k < 0:
        raise InputError("k must be non-negative")
    with gdir.lock():
        txn = _Txn(gdir, config, "change_k")
        try:
            meta = txn.meta
            k = meta["k"]
            if new_k == k:
                txn.commit({})
                return _result(txn)
            if new_k <= meta["k_valid"]:
                # Pure view change: the stored columns already cover it.
                txn.commit({"k": new_k})
                return _result(txn)

            k_valid = meta["k_valid"]
            k_eff_valid = meta["k_eff_valid"]
            if k_eff_valid < k_valid:
                # Refinement is known stable at k_eff_valid: deeper
                # columns are copies, no signatures to compute.
                _widen_history_copies(txn, new_k, k_eff_valid)
                txn.store.alias_levels(
                    k_eff_valid,
                    [
                        lv
                        for lv in range(meta["k_stored"] + 1, new_k + 1)
                        if lv not in txn.store.known_levels()
                    ],
                )
                counts = meta["partition_counts"]
                if counts is not None:
                    counts = _pad_counts(counts, new_k)
                txn.any_changes = True
                txn.rebuilt = True  # keep k_eff_valid as-is in commit()
                txn.commit(
                    {
                        "k": new_k,
                        "k_stored": new_k,
                        "k_valid": new_k,
                        "partition_counts": counts,
                    }
                )
                return _result(txn)

            # Extend the refinement from column k_valid.
            base_count = _distinct_column_count(txn, k_valid)
            work = Construction(
                txn.gdir, txn.staging, txn.store, txn.budget, txn.counters, txn.config
            )
            work.alias_skip_existing = True
            work.partition_counts = [0] * k_valid + [base_count]
            work.stats = []
            seed_path = txn.tmp(".seed")
            with TableWriter(seed_path, NODE_DTYPE, txn.counters) as w:
                for chunk in txn.history.chunks(txn.budget.table_bytes, txn.counters):
                    out = np.empty(chunk.size, dtype=NODE_DTYPE)
                    out["nid"] = chunk["nid"]
                    out["nlabel"] = chunk["nlabel"]
                    out["pid0"] = chunk["pid0"]
                    out["pid_old"] = 0
                    out["pid_new"] = chunk[f"pid{k_valid}"]
                    w.append(out)
            work.nodes_cur = Table(seed_path, NODE_DTYPE)
            work.edges_ts_cur = txn.edges_ts
            try:
                k_eff = work.run(k_valid + 1, new_k, txn.config.early_stop)
                work.finalize(
                    k_stored=new_k,
                    k_effective=k_eff,
                    base_history=txn.history,
                    base_levels=k_valid,
                )
            finally:
                work.cleanup()
            txn.rebuild_stats = work.stats
            txn.nodes = Table(txn.staging.path_for(NODES), NODE_DTYPE)
            txn.hist_dtype = history_dtype(new_k)
            txn.history = Table(txn.staging.path_for(HISTORY), txn.hist_dtype)
            txn.edges_ts = Table(txn.staging.path_for(EDGES_TS), EDGE_DTYPE)
            txn.any_changes = True
            txn.rebuilt = True
            txn.commit(
                {
                    "k": new_k,
                    "k_stored": new_k,
                    "k_valid": new_k,
                    "k_eff_valid": k_eff,
                    "partition_counts": None,
                }
            )
            return _result(txn)
        except BaseException:
            txn.abort()
            raise
        finally:
            txn.cleanup()


def _widen_history_copies(txn: _Txn, new_k: int, src_level: int) -> None:
    """Grow the history table to new_k columns, filling the new ones
    with copies of the stabilized column."""
    new_dtype = history_dtype(new_k)
    out_path = txn.tmp(".hwide")
    old_k = txn.meta["k_stored"]
    with TableWriter(out_path, new_dtype, txn.counters) as w:
        for chunk in txn.history.chunks(txn.budget.table_bytes, txn.counters):
            out = np.empty(chunk.size, dtype=new_dtype)
            for name in txn.hist_dtype.names:
                out[name] = chunk[name]
            for j in range(old_k + 1, new_k + 1):
                out[f"pid{j}"] = chunk[f"pid{src_level}"]
            w.append(out)
    txn.hist_dtype = new_dtype
    txn.history = Table(out_path, new_dtype)


def _distinct_column_count(txn: _Txn, level: int) -> int:
    field = f"pid{level}" if level >= 1 else "pid0"
    seen: set[int] = set()
    for chunk in txn.history.chunks(txn.budget.table_bytes, txn.counters):
        seen.update(np.unique(chunk[field]).tolist())
    return len(seen)


def _result(txn: _Txn) -> UpdateResult:
    return UpdateResult(
        kind=txn.kind,
        levels=txn.levels,
        rebuilt=txn.rebuilt,
        rebuild_stats=txn.rebuild_stats,
        io=txn.counters,
    )
