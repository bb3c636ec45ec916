"""The signature-to-partition-id store.

One store holds, per refinement level, an injective mapping from
canonical signature bytes to partition ids.  All levels share a single
monotone id counter (ids start at 1), so an id is issued at exactly one
level; within a level, equal signatures always resolve to the same id.

Two runtime backends over the same on-disk format:

* in_memory: every level mapping is a plain dict, loaded fully at open
  and rewritten at flush.  Store I/O is charged only at those
  boundaries.
* external_sorted: each level keeps a sorted index file of
  (signature hash, heap offset, pid) entries next to a shared
  append-only heap of signature bytes.  Lookups that miss the in-memory
  delta and LRU cache probe the index file (binary search for single
  lookups, one sequential merge pass per bulk call) and confirm hash
  matches against the heap; every byte moved is charged to the store
  counters.  New assignments accumulate in the delta dict, which is
  merged into the index file when it outgrows half the store buffer and
  at flush.

Scope controls retention: global_counter (default) keeps every level
mapping, which incremental maintenance depends on; per_iteration_counter
lets the construction discard mappings below the level being refined,
shrinking the store's footprint, and is refused by maintenance.

On-disk layout (store/ directory): meta.json, sig.heap, level<j>.idx.
Flush writes index files first and meta.json last, each atomically, so
a crash leaves the previous consistent state reachable.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from typing import Iterable, Sequence

import numpy as np

from .model import FIRST_PID, StateError
from .tables import BufferBudget, IoCounter, Table, _charge

SCOPE_GLOBAL = "global_counter"
SCOPE_PER_ITERATION = "per_iteration_counter"
SCOPES = (SCOPE_GLOBAL, SCOPE_PER_ITERATION)

BACKEND_MEMORY = "in_memory"
BACKEND_EXTERNAL = "external_sorted"
BACKENDS = (BACKEND_MEMORY, BACKEND_EXTERNAL)

STORE_ENTRY_DTYPE = np.dtype(
    [("hash", "<u8"), ("heap_off", "<u8"), ("pid", "<u8")], align=False
)

_LEN = struct.Struct("<I")
_LRU_CAPACITY = 1 << 16
_FORMAT_VERSION = 1


def sig_hash(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


class _Level:
    """Runtime state of one level mapping."""

    def __init__(self) -> None:
        self.run_count = 0  # entries in the index file
        self.delta: dict[bytes, tuple[int, int]] = {}  # sig -> (pid, heap_off)
        self.delta_bytes = 0
        self.lru: OrderedDict[bytes, int] = OrderedDict()
        self.mem: dict[bytes, int] | None = None  # in_memory backend only
        self.mem_offs: dict[bytes, int] = {}  # sigs already in the heap
        self.dirty = False


class SignatureStore:
    def __init__(
        self,
        root: str,
        budget: BufferBudget,
        counters: IoCounter,
        *,
        backend: str = BACKEND_EXTERNAL,
        scope: str = SCOPE_GLOBAL,
        store_bytes: int = 128 * 2**20,
        _meta: dict | None = None,
    ):
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend: {backend}")
        if scope not in SCOPES:
            raise ValueError(f"unknown scope: {scope}")
        self.root = root
        self.backend = backend
        self.scope = scope
        self.store_bytes = store_bytes
        self._budget = budget
        self._counters = counters
        self._levels: dict[int, _Level] = {}
        self._alias: dict[int, int] = {}
        self._next_pid = FIRST_PID
        self.hits = 0
        self.misses = 0
        self._heap_fh = None
        self._wave: tuple[int, set[int], list[int]] | None = None
        if _meta is not None:
            self._load_meta(_meta)

    # -- construction / persistence ------------------------------------

    @classmethod
    def create(
        cls,
        root: str,
        budget: BufferBudget,
        counters: IoCounter,
        *,
        backend: str = BACKEND_EXTERNAL,
        scope: str = SCOPE_GLOBAL,
        store_bytes: int = 128 * 2**20,
    ) -> "SignatureStore":
        os.makedirs(root, exist_ok=True)
        store = cls(
            root,
            budget,
            counters,
            backend=backend,
            scope=scope,
            store_bytes=store_bytes,
        )
        store.flush()
        return store

    @classmethod
    def open(
        cls,
        root: str,
        budget: BufferBudget,
        counters: IoCounter,
        *,
        backend: str | None = None,
        store_bytes: int = 128 * 2**20,
    ) -> "SignatureStore":
        meta_path = os.path.join(root, "meta.json")
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        if meta.get("format_version") != _FORMAT_VERSION:
            raise StateError(f"unsupported store format in {meta_path}")
        store = cls(
            root,
            budget,
            counters,
            backend=backend or meta["backend"],
            scope=meta["scope"],
            store_bytes=store_bytes,
            _meta=meta,
        )
        return store

    def _load_meta(self, meta: dict) -> None:
        self._next_pid = meta["next_pid"]
        self.hits = meta["hits"]
        self.misses = meta["misses"]
        self._alias = {int(k): v for k, v in meta.get("aliases", {}).items()}
        for key, info in meta["levels"].items():
            lv = _Level()
            lv.run_count = info["entries"]
            self._levels[int(key)] = lv
        if self.backend == BACKEND_MEMORY:
            for level, lv in self._levels.items():
                lv.mem = self._load_full_level(level, lv)

    def _load_full_level(self, level: int, lv: _Level) -> dict[bytes, int]:
        mapping: dict[bytes, int] = {}
        run = self._run_table(level)
        if run is not None and lv.run_count:
            entries = run.read_all(self._counters, kind="store")
            offs = entries["heap_off"]
            order = np.argsort(offs, kind="stable")
            with open(self._heap_path, "rb") as fh:
                for i in order:
                    off = int(offs[i])
                    sig = self._heap_read_at(fh, off)
                    mapping[sig] = int(entries["pid"][i])
                    lv.mem_offs[sig] = off
        return mapping

    def flush(self) -> None:
        """Persist all dirty state; index files first, meta.json last."""
        if self._heap_fh is not None:
            self._heap_fh.flush()
        for level in sorted(self._levels):
            lv = self._levels[level]
            if self.backend == BACKEND_MEMORY:
                if lv.dirty:
                    self._rewrite_level_from_mem(level, lv)
            elif lv.delta:
                self._merge_delta(level, lv)
        if self._heap_fh is not None:
            self._heap_fh.flush()
            os.fsync(self._heap_fh.fileno())
        meta = {
            "format_version": _FORMAT_VERSION,
            "backend": self.backend,
            "scope": self.scope,
            "next_pid": self._next_pid,
            "hits": self.hits,
            "misses": self.misses,
            "aliases": {str(k): v for k, v in self._alias.items()},
            "levels": {
                str(level): {"entries": lv.run_count}
                for level, lv in self._levels.items()
            },
        }
        data = json.dumps(meta, indent=1).encode()
        tmp = os.path.join(self.root, "meta.json.tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
            os.fsync(fh.fileno())
        os.replace(tmp, os.path.join(self.root, "meta.json"))
        _charge(self._counters, "store", "write", len(data))

    def close(self) -> None:
        if self._heap_fh is not None:
            self._heap_fh.close()
            self._heap_fh = None

    # -- paths and heap --------------------------------------------------

    @property
    def _heap_path(self) -> str:
        return os.path.join(self.root, "sig.heap")

    def _run_path(self, level: int) -> str:
        return os.path.join(self.root, f"level{level}.idx")

    def _run_table(self, level: int) -> Table | None:
        path = self._run_path(level)
        if not os.path.exists(path):
            return None
        return Table(path, STORE_ENTRY_DTYPE)

    def _heap_append(self, sig: bytes) -> int:
        if self._heap_fh is None:
            self._heap_fh = open(self._heap_path, "ab")
        off = self._heap_fh.tell()
        self._heap_fh.write(_LEN.pack(len(sig)))
        self._heap_fh.write(sig)
        _charge(self._counters, "store", "write", _LEN.size + len(sig))
        return off

    def _heap_read_at(self, fh, off: int) -> bytes:
        fh.seek(off)
        (length,) = _LEN.unpack(fh.read(_LEN.size))
        sig = fh.read(length)
        _charge(self._counters, "store", "read", _LEN.size + length)
        return sig

    def _heap_read_many(self, offsets: Iterable[int]) -> dict[int, bytes]:
        if self._heap_fh is not None:
            self._heap_fh.flush()
        out: dict[int, bytes] = {}
        with open(self._heap_path, "rb") as fh:
            for off in sorted(set(offsets)):
                out[off] = self._heap_read_at(fh, off)
        return out

    # -- level plumbing ----------------------------------------------------

    def _resolve(self, level: int) -> int:
        return self._alias.get(level, level)

    def _level(self, level: int) -> _Level:
        level = self._resolve(level)
        lv = self._levels.get(level)
        if lv is None:
            lv = _Level()
            if self.backend == BACKEND_MEMORY:
                lv.mem = {}
            self._levels[level] = lv
        return lv

    def known_levels(self) -> list[int]:
        return sorted(set(self._levels) | set(self._alias))

    @property
    def next_pid(self) -> int:
        return self._next_pid

    # -- waves (per-level accounting used for partition counts) -----------

    def begin_wave(self, level: int) -> None:
        self._wave = (level, set(), [0])

    def end_wave(self) -> tuple[int, int]:
        """Returns (distinct pids seen, fresh ids issued) since
        begin_wave."""
        if self._wave is None:
            raise StateError("no wave in progress")
        _, seen, issued = self._wave
        self._wave = None
        return len(seen), issued[0]

    def _note(self, pid: int, fresh: bool) -> None:
        if fresh:
            self.misses += 1
        else:
            self.hits += 1
        if self._wave is not None:
            self._wave[1].add(pid)
            if fresh:
                self._wave[2][0] += 1

    # -- lookups and assignment -------------------------------------------

    def insert(self, level: int, sig: bytes) -> int:
        """Return the id for a signature at a level, minting the next id
        when the signature is new there."""
        lv = self._level(level)
        if self.backend == BACKEND_MEMORY:
            pid = lv.mem.get(sig)
            if pid is not None:
                self._note(pid, False)
                return pid
            pid = self._mint()
            lv.mem[sig] = pid
            lv.dirty = True
            self._note(pid, True)
            return pid
        found = self._lookup_external(level, lv, sig)
        if found is not None:
            self._note(found, False)
            return found
        pid = self._mint()
        self._delta_add(lv, sig, pid)
        self._note(pid, True)
        return pid

    def lookup(self, level: int, sig: bytes) -> int | None:
        """Probe without assigning (no wave accounting)."""
        lv = self._level(level)
        if self.backend == BACKEND_MEMORY:
            return lv.mem.get(sig)
        return self._lookup_external(level, lv, sig)

    def _mint(self) -> int:
        pid = self._next_pid
        self._next_pid += 1
        return pid

    def _delta_add(self, lv: _Level, sig: bytes, pid: int) -> None:
        off = self._heap_append(sig)
        lv.delta[sig] = (pid, off)
        lv.delta_bytes += len(sig) + 24
        lv.dirty = True

    def _lru_put(self, lv: _Level, sig: bytes, pid: int) -> None:
        lv.lru[sig] = pid
        lv.lru.move_to_end(sig)
        while len(lv.lru) > _LRU_CAPACITY:
            lv.lru.popitem(last=False)

    def _lookup_external(self, level: int, lv: _Level, sig: bytes) -> int | None:
        hit = lv.delta.get(sig)
        if hit is not None:
            return hit[0]
        pid = lv.lru.get(sig)
        if pid is not None:
            lv.lru.move_to_end(sig)
            return pid
        run = self._run_table(self._resolve(level))
        if run is None or lv.run_count == 0:
            return None
        h = sig_hash(sig)
        lo, hi = self._hash_range(run, h)
        if hi > lo:
            entries = run.read_range(lo, hi - lo, self._counters, kind="store")
            heap = self._heap_read_many(int(o) for o in entries["heap_off"])
            for rec in entries:
                if heap[int(rec["heap_off"])] == sig:
                    pid = int(rec["pid"])
                    self._lru_put(lv, sig, pid)
                    return pid
        return None

    def _hash_range(self, run: Table, h: int) -> tuple[int, int]:
        """Binary search the entry range with hash == h (probes charged)."""
        n = run.count

        def hash_at(i: int) -> int:
            rec = run.read_range(i, 1, self._counters, kind="store")
            return int(rec["hash"][0])

        lo, hi = 0, n
        while lo < hi:
            mid = (lo + hi) // 2
            if hash_at(mid) < h:
                lo = mid + 1
            else:
                hi = mid
        first = lo
        hi = n
        while lo < hi:
            mid = (lo + hi) // 2
            if hash_at(mid) <= h:
                lo = mid + 1
            else:
                hi = mid
        return first, lo

    def bulk_assign(self, level: int, sigs: Sequence[bytes]) -> np.ndarray:
        """Ids for a batch of signatures (one per node, callers pass
        nodes in ascending node-id order).

        New signatures are numbered in order of first occurrence, so the
        assignment is independent of batch boundaries.  At most one
        sequential pass is made over the level's index file per call.
        """
        pids = np.zeros(len(sigs), dtype="<u8")
        if not sigs:
            return pids
        lv = self._level(level)

        occurrences: dict[bytes, list[int]] = {}
        for i, sig in enumerate(sigs):
            occurrences.setdefault(sig, []).append(i)

        if self.backend == BACKEND_MEMORY:
            for sig, idxs in occurrences.items():
                pid = lv.mem.get(sig)
                if pid is None:
                    pid = self._mint()
                    lv.mem[sig] = pid
                    lv.dirty = True
                    self._note(pid, True)
                else:
                    self._note(pid, False)
                for _ in idxs[1:]:
                    self._note(pid, False)
                pids[idxs] = pid
            return pids

        unresolved: list[bytes] = []
        resolved: dict[bytes, int] = {}
        for sig in occurrences:
            hit = lv.delta.get(sig)
            if hit is not None:
                resolved[sig] = hit[0]
                continue
            pid = lv.lru.get(sig)
            if pid is not None:
                resolved[sig] = pid
                continue
            unresolved.append(sig)

        if unresolved and lv.run_count:
            resolved.update(self._bulk_probe(level, lv, unresolved))

        for sig, idxs in occurrences.items():
            pid = resolved.get(sig)
            if pid is None:
                pid = self._mint()
                self._delta_add(lv, sig, pid)
                self._note(pid, True)
            else:
                self._note(pid, False)
            for _ in idxs[1:]:
                self._note(pid, False)
            pids[idxs] = pid

        if lv.delta_bytes > self.store_bytes // 2:
            self._merge_delta(self._resolve(level), lv)
        return pids

    def _bulk_probe(
        self, level: int, lv: _Level, sigs: list[bytes]
    ) -> dict[bytes, int]:
        """One sequential pass over the index file resolving the given
        signatures; heap bytes are read only on hash matches."""
        run = self._run_table(self._resolve(level))
        if run is None:
            return {}
        hashes = np.array([sig_hash(s) for s in sigs], dtype="<u8")
        order = np.argsort(hashes, kind="stable")
        by_hash: dict[int, list[bytes]] = {}
        for i in order:
            by_hash.setdefault(int(hashes[i]), []).append(sigs[int(i)])
        sorted_hashes = hashes[order]

        found: dict[bytes, int] = {}
        chunk_bytes = max(STORE_ENTRY_DTYPE.itemsize, self.store_bytes // 4)
        for chunk in run.chunks(chunk_bytes, self._counters, kind="store"):
            idx = np.searchsorted(sorted_hashes, chunk["hash"])
            mask = idx < sorted_hashes.size
            if sorted_hashes.size:
                safe = np.minimum(idx, sorted_hashes.size - 1)
                mask &= sorted_hashes[safe] == chunk["hash"]
            if not mask.any():
                continue
            cand = chunk[mask]
            heap = self._heap_read_many(int(o) for o in cand["heap_off"])
            for rec in cand:
                data = heap[int(rec["heap_off"])]
                for sig in by_hash.get(int(rec["hash"]), ()):
                    if sig == data:
                        found[sig] = int(rec["pid"])
                        self._lru_put(lv, sig, found[sig])
        return found

    # -- merging, remapping, aliasing ---------------------------------------

    def _merge_delta(self, level: int, lv: _Level) -> None:
        """Fold the delta dict into the level's sorted index file."""
        if not lv.delta:
            return
        fresh = np.empty(len(lv.delta), dtype=STORE_ENTRY_DTYPE)
        for i, (sig, (pid, off)) in enumerate(lv.delta.items()):
            fresh[i] = (sig_hash(sig), off, pid)
        fresh.sort(order=("hash", "heap_off"))
        self._write_merged_run(level, lv, fresh)
        lv.delta.clear()
        lv.delta_bytes = 0
        lv.dirty = True

    def _write_merged_run(self, level: int, lv: _Level, fresh: np.ndarray) -> None:
        run = self._run_table(level)
        tmp = self._run_path(level) + ".tmp"
        written = 0
        with open(tmp, "wb") as out:
            if run is None or lv.run_count == 0:
                fresh.tofile(out)
                _charge(self._counters, "store", "write", fresh.nbytes)
                written = fresh.size
            else:
                pos = 0
                for chunk in run.chunks(
                    max(STORE_ENTRY_DTYPE.itemsize, self.store_bytes // 4),
                    self._counters,
                    kind="store",
                ):
                    bound = (int(chunk["hash"][-1]), int(chunk["heap_off"][-1]))
                    take = fresh[pos:]
                    cut = np.searchsorted(
                        take["hash"], bound[0], side="right"
                    )
                    # entries with equal hash: order by heap_off
                    eq = take[:cut]
                    back = np.count_nonzero(
                        (eq["hash"] == bound[0]) & (eq["heap_off"] > bound[1])
                    )
                    cut -= back
                    merged = np.concatenate([chunk, fresh[pos : pos + cut]])
                    merged.sort(order=("hash", "heap_off"))
                    merged.tofile(out)
                    _charge(self._counters, "store", "write", merged.nbytes)
                    written += merged.size
                    pos += cut
                rest = fresh[pos:]
                if rest.size:
                    rest.tofile(out)
                    _charge(self._counters, "store", "write", rest.nbytes)
                    written += rest.size
        os.replace(tmp, self._run_path(level))
        lv.run_count = written

    def _rewrite_level_from_mem(self, level: int, lv: _Level) -> None:
        entries = np.empty(len(lv.mem), dtype=STORE_ENTRY_DTYPE)
        for i, (sig, pid) in enumerate(lv.mem.items()):
            off = lv.mem_offs.get(sig)
            if off is None:
                off = self._heap_append(sig)
                lv.mem_offs[sig] = off
            entries[i] = (sig_hash(sig), off, pid)
        entries.sort(order=("hash", "heap_off"))
        tmp = self._run_path(level) + ".tmp"
        entries.tofile(tmp)
        _charge(self._counters, "store", "write", entries.nbytes)
        os.replace(tmp, self._run_path(level))
        lv.run_count = entries.size
        lv.dirty = False

    def remap_level(self, level: int, mapping: dict[int, int]) -> None:
        """Rewrite a level's pids through `mapping` (ids not present map
        to themselves)."""
        level = self._resolve(level)
        lv = self._level(level)
        if self.backend == BACKEND_MEMORY:
            lv.mem = {s: mapping.get(p, p) for s, p in lv.mem.items()}
            lv.dirty = True
            return
        lv.delta = {
            s: (mapping.get(pid, pid), off) for s, (pid, off) in lv.delta.items()
        }
        lv.lru.clear()
        run = self._run_table(level)
        if run is not None and lv.run_count:
            old = np.array(sorted(mapping), dtype="<u8")
            new = np.array([mapping[int(o)] for o in old], dtype="<u8")
            tmp = self._run_path(level) + ".tmp"
            with open(tmp, "wb") as out:
                for chunk in run.chunks(
                    self.store_bytes // 4, self._counters, kind="store"
                ):
                    idx = np.searchsorted(old, chunk["pid"])
                    ok = idx < old.size
                    if old.size:
                        safe = np.minimum(idx, old.size - 1)
                        ok &= old[safe] == chunk["pid"]
                    chunk["pid"][ok] = new[idx[ok]]
                    chunk.tofile(out)
                    _charge(self._counters, "store", "write", chunk.nbytes)
            os.replace(tmp, self._run_path(level))
        lv.dirty = True

    def alias_levels(
        self, src: int, dst_levels: Iterable[int], *, skip_existing: bool = False
    ) -> None:
        """Make dst levels share src's mapping (used once refinement has
        stabilized: further levels cannot differ).

        With skip_existing, levels that already have their own mapping
        are left alone: a rebuild over a store that predates it keeps
        old per-level dictionaries, which stay usable because each one
        is injective on its own.
        """
        src = self._resolve(src)
        for d in dst_levels:
            if d == src:
                continue
            if d in self._levels:
                if skip_existing:
                    continue
                raise StateError(f"level {d} already has its own mapping")
            self._alias[d] = src

    def reset_iteration(self, below_level: int) -> None:
        """Drop level mappings strictly below a level.  Only meaningful
        for the per-iteration scope; the id counter keeps rising."""
        if self.scope != SCOPE_PER_ITERATION:
            raise StateError("reset_iteration requires per_iteration_counter scope")
        for level in [lv for lv in self._levels if lv < below_level]:
            del self._levels[level]
            path = self._run_path(level)
            if os.path.exists(path):
                os.unlink(path)

    def stats(self) -> dict:
        return {
            "backend": self.backend,
            "scope": self.scope,
            "next_pid": self._next_pid,
            "hits": self.hits,
            "misses": self.misses,
            "levels": {
                level: (lv.run_count, len(lv.delta) if lv.delta else len(lv.mem or ()))
                for level, lv in self._levels.items()
            },
            "aliases": dict(self._alias),
        }
