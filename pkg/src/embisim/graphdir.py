"""On-disk graph directory: layout, metadata, ingestion, atomic commits.

A graph directory holds:

    nodes.tbl      node records (nid, nlabel, pid0, pid_old, pid_new),
                   sorted by nid at rest
    edges_st.tbl   edge records sorted (sid, tid, elabel)
    edges_ts.tbl   the same edges sorted (tid, sid, elabel)
    history.tbl    per-node partition ids for levels 0..k_stored
                   (only once built)
    labels.dict    shared node/edge label dictionary, one label per line
    store/         the signature store
    meta           JSON metadata, always written last
    lock           present while a process mutates the directory

Mutations are staged as <name>.stage files and committed by a sequence
of os.replace calls with meta last, so a crash mid-commit leaves either
the old state or the new state reachable (the signature store flushes
itself before the graph commit; orphaned store entries are harmless).

Text input format: nodes are "nId<TAB>nLabel" lines, edges
"sId<TAB>eLabel<TAB>tId"; a line with the label column missing gets the
constant label "_".  Blank lines and lines starting with '#' are
skipped.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .model import (
    EDGE_DTYPE,
    NODE_DTYPE,
    InputError,
    IntegrityError,
    LabelDict,
    StateError,
    history_dtype,
)
from .tables import (
    BufferBudget,
    IoCounter,
    Table,
    TableWriter,
    check_keys_present,
    external_sort,
)

FORMAT_VERSION = 1
DEFAULT_LABEL = "_"

NODES = "nodes.tbl"
EDGES_ST = "edges_st.tbl"
EDGES_TS = "edges_ts.tbl"
HISTORY = "history.tbl"
LABELS = "labels.dict"
META = "meta"
LOCK = "lock"
STORE_DIR = "store"


class GraphDirectory:
    def __init__(self, root: str):
        self.root = root

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    @property
    def store_root(self) -> str:
        return self.path(STORE_DIR)

    def exists(self) -> bool:
        return os.path.exists(self.path(META))

    def read_meta(self) -> dict:
        try:
            with open(self.path(META), "r", encoding="utf-8") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            raise StateError(f"not a graph directory: {self.root}")
        if meta.get("format_version") != FORMAT_VERSION:
            raise StateError(f"unsupported graph format in {self.root}")
        return meta

    def is_built(self) -> bool:
        return self.exists() and self.read_meta().get("built", False)

    def require_built(self) -> dict:
        meta = self.read_meta()
        if not meta.get("built"):
            raise StateError(f"graph at {self.root} has no partition yet (run build)")
        return meta

    def labels(self) -> LabelDict:
        with open(self.path(LABELS), "r", encoding="utf-8") as fh:
            return LabelDict.load_lines(fh.read())

    def nodes_table(self) -> Table:
        return Table(self.path(NODES), NODE_DTYPE)

    def edges_st_table(self) -> Table:
        return Table(self.path(EDGES_ST), EDGE_DTYPE)

    def edges_ts_table(self) -> Table:
        return Table(self.path(EDGES_TS), EDGE_DTYPE)

    def history_table(self, meta: dict | None = None) -> Table:
        meta = meta or self.require_built()
        return Table(self.path(HISTORY), history_dtype(meta["k_stored"]))

    @contextmanager
    def lock(self):
        path = self.path(LOCK)
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StateError(
                f"graph at {self.root} is locked by another process "
                f"(remove {path} if that process is gone)"
            )
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            if os.path.exists(path):
                os.unlink(path)

    def staging(self) -> "Staging":
        return Staging(self)

    # Effective view-level values derived from the stored metadata.

    @staticmethod
    def view_k_effective(meta: dict) -> int:
        return min(meta["k_eff_valid"], meta["k"])


class Staging:
    """Collects staged files for one atomic commit."""

    def __init__(self, gdir: GraphDirectory):
        self._gdir = gdir
        self._staged: dict[str, str] = {}

    def path_for(self, name: str) -> str:
        """Register (or return) the staging path for a final name."""
        if name not in self._staged:
            self._staged[name] = self._gdir.path(name) + ".stage"
        return self._staged[name]

    def adopt(self, name: str, src_path: str) -> None:
        """Stage an already-written file (moved into place on commit)."""
        staged = self.path_for(name)
        if os.path.abspath(src_path) != os.path.abspath(staged):
            os.replace(src_path, staged)

    def commit(self, meta: dict) -> None:
        meta_tmp = self.path_for(META)
        with open(meta_tmp, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1)
            fh.flush()
            os.fsync(fh.fileno())
        for name, tmp in self._staged.items():
            if name == META:
                continue
            os.replace(tmp, self._gdir.path(name))
        os.replace(meta_tmp, self._gdir.path(META))
        self._staged.clear()

    def abort(self) -> None:
        for tmp in self._staged.values():
            if os.path.exists(tmp):
                os.unlink(tmp)
        self._staged.clear()


@dataclass
class IngestReport:
    node_count: int
    edge_count: int
    duplicate_edges_removed: int


def _parse_lines(path: str, ncols_full: int, what: str):
    """Yield (line_number, columns) for data lines; pads a missing label
    column with the default label."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) == ncols_full - 1:
                if what == "node":
                    cols = [cols[0], DEFAULT_LABEL]
                else:
                    cols = [cols[0], DEFAULT_LABEL, cols[1]]
            if len(cols) != ncols_full:
                raise InputError(
                    f"{path}:{lineno}: expected {ncols_full} tab-separated "
                    f"columns for a {what} line, got {len(cols)}"
                )
            yield lineno, cols


def _parse_id(text: str, path: str, lineno: int, what: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise InputError(f"{path}:{lineno}: {what} id is not an integer: {text!r}")
    if value < 0 or value >= 2**64:
        raise InputError(f"{path}:{lineno}: {what} id out of range: {value}")
    return value


def _check_label(label: str, path: str, lineno: int) -> str:
    if label == "":
        raise InputError(f"{path}:{lineno}: empty label")
    return label


_CHUNK_LINES = 1 << 17


def ingest(
    nodes_path: str,
    edges_path: str | None,
    dest_root: str,
    budget: BufferBudget,
    counters: IoCounter,
) -> tuple[GraphDirectory, IngestReport]:
    """Create a graph directory from text files.

    Node ids are the external ids from the file, used verbatim; edge
    duplicates (same source, label, target) are dropped with a count in
    the report; an edge endpoint with no node line is an error listing
    the first ten offenders.
    """
    gdir = GraphDirectory(dest_root)
    if gdir.exists():
        raise StateError(f"graph directory already exists: {dest_root}")
    os.makedirs(dest_root, exist_ok=True)

    # Pass 1: collect the label vocabulary from both files.
    texts: set[str] = set()
    node_count = 0
    for lineno, cols in _parse_lines(nodes_path, 2, "node"):
        texts.add(_check_label(cols[1], nodes_path, lineno))
        node_count += 1
    edge_count_raw = 0
    if edges_path is not None:
        for lineno, cols in _parse_lines(edges_path, 3, "edge"):
            texts.add(_check_label(cols[1], edges_path, lineno))
            edge_count_raw += 1
    labels = LabelDict.from_texts(texts)

    staging = gdir.staging()
    try:
        # Pass 2: node records, sorted by id, duplicate ids rejected.
        raw_nodes = budget.mktemp(".nodes")
        with TableWriter(raw_nodes, NODE_DTYPE, counters) as w:
            batch: list[tuple] = []
            for lineno, cols in _parse_lines(nodes_path, 2, "node"):
                nid = _parse_id(cols[0], nodes_path, lineno, "node")
                batch.append((nid, labels.require(cols[1]), 0, 0, 0))
                if len(batch) >= _CHUNK_LINES:
                    w.append(np.array(batch, dtype=NODE_DTYPE))
                    batch.clear()
            if batch:
                w.append(np.array(batch, dtype=NODE_DTYPE))
        nodes_sorted = external_sort(
            Table(raw_nodes, NODE_DTYPE),
            ("nid",),
            budget,
            counters,
            staging.path_for(NODES),
        )
        os.unlink(raw_nodes)
        _reject_duplicate_nids(nodes_sorted, budget, counters)

        # Pass 2 for edges, then both sort orders.
        raw_edges = budget.mktemp(".edges")
        with TableWriter(raw_edges, EDGE_DTYPE, counters) as w:
            batch = []
            if edges_path is not None:
                for lineno, cols in _parse_lines(edges_path, 3, "edge"):
                    sid = _parse_id(cols[0], edges_path, lineno, "edge source")
                    tid = _parse_id(cols[2], edges_path, lineno, "edge target")
                    batch.append((sid, labels.require(cols[1]), tid, 0))
                    if len(batch) >= _CHUNK_LINES:
                        w.append(np.array(batch, dtype=EDGE_DTYPE))
                        batch.clear()
                if batch:
                    w.append(np.array(batch, dtype=EDGE_DTYPE))
        edges_st = external_sort(
            Table(raw_edges, EDGE_DTYPE),
            ("sid", "tid", "elabel", "pid_old_dst"),
            budget,
            counters,
            staging.path_for(EDGES_ST),
            dedup=True,
        )
        os.unlink(raw_edges)
        duplicates = edge_count_raw - edges_st.count
        external_sort(
            edges_st,
            ("tid", "sid", "elabel", "pid_old_dst"),
            budget,
            counters,
            staging.path_for(EDGES_TS),
            dedup=True,
        )

        # Referential integrity: every endpoint must be a node.
        missing = check_keys_present(
            edges_st, "sid", nodes_sorted, "nid", budget, counters
        )
        missing += [
            m
            for m in check_keys_present(
                Table(staging.path_for(EDGES_TS), EDGE_DTYPE),
                "tid",
                nodes_sorted,
                "nid",
                budget,
                counters,
            )
            if m not in missing
        ]
        if missing:
            raise InputError(
                "edges reference unknown node ids: "
                + ", ".join(str(m) for m in sorted(missing)[:10])
            )

        with open(staging.path_for(LABELS), "w", encoding="utf-8") as fh:
            fh.write(labels.dump_lines())

        meta = {
            "format_version": FORMAT_VERSION,
            "node_count": int(nodes_sorted.count),
            "edge_count": int(edges_st.count),
            "label_count": len(labels),
            "duplicate_edges_removed": int(duplicates),
            "built": False,
            "k": None,
            "k_stored": None,
            "k_valid": None,
            "k_eff_valid": None,
            "scope": None,
            "backend": None,
            "partition_counts": None,
            "last_op": {"kind": "ingest"},
        }
        staging.commit(meta)
    except BaseException:
        staging.abort()
        raise
    return gdir, IngestReport(
        node_count=node_count,
        edge_count=int(gdir.edges_st_table().count),
        duplicate_edges_removed=int(duplicates),
    )


def _reject_duplicate_nids(
    nodes: Table, budget: BufferBudget, counters: IoCounter
) -> None:
    prev_last: int | None = None
    for chunk in nodes.chunks(budget.table_bytes, counters):
        nids = chunk["nid"]
        dup_mask = nids[1:] == nids[:-1]
        if dup_mask.any():
            dup = int(nids[1:][dup_mask][0])
            raise InputError(f"duplicate node id: {dup}")
        if prev_last is not None and nids.size and int(nids[0]) == prev_last:
            raise InputError(f"duplicate node id: {prev_last}")
        if nids.size:
            prev_last = int(nids[-1])
