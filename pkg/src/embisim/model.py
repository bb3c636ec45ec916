"""Record layouts, the shared label dictionary, and signature encoding.

Every on-disk record is little-endian with no padding, so file size is
always ``record_count * itemsize`` and the layouts below double as the
file-format documentation (see docs/formats.md for byte offsets).

Partition ids are unsigned 64-bit integers starting at 1; the value 0 is
reserved as the "not assigned yet" sentinel in pid columns.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

NodeId = int
LabelId = int
PartitionId = int

PID_UNSET = 0
FIRST_PID = 1

# Hard cap on one encoded signature (guards against degenerate graphs
# producing signatures too large to buffer).
MAX_SIGNATURE_BYTES = 16 * 2**20

# Construction-time node record: (nId, nLabel, pid0, pidOld, pidNew).
NODE_DTYPE = np.dtype(
    [
        ("nid", "<u8"),
        ("nlabel", "<u4"),
        ("pid0", "<u8"),
        ("pid_old", "<u8"),
        ("pid_new", "<u8"),
    ],
    align=False,
)

# Edge record: (sId, eLabel, tId, pidOldT).  Stored twice, sorted
# (sId, tId, eLabel) and (tId, sId, eLabel).
EDGE_DTYPE = np.dtype(
    [
        ("sid", "<u8"),
        ("elabel", "<u4"),
        ("tid", "<u8"),
        ("pid_old_dst", "<u8"),
    ],
    align=False,
)

# Signature-input row: the projection of the edge table used to build
# signatures, one row per (source, edge label, target partition) triple.
SIG_ROW_DTYPE = np.dtype(
    [
        ("sid", "<u8"),
        ("elabel", "<u4"),
        ("pid_old_dst", "<u8"),
    ],
    align=False,
)

# One encoded signature pair, as it appears inside canonical bytes.
SIG_PAIR_DTYPE = np.dtype([("elabel", "<u4"), ("pid", "<u8")], align=False)

_SIG_HEAD = struct.Struct("<QI")
_SIG_PAIR = struct.Struct("<IQ")
SIG_HEADER_BYTES = _SIG_HEAD.size
SIG_PAIR_BYTES = _SIG_PAIR.size


def history_dtype(k: int) -> np.dtype:
    """Maintenance-time node record: (nId, nLabel, pid_0 .. pid_k)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    fields = [("nid", "<u8"), ("nlabel", "<u4")]
    fields += [(f"pid{j}", "<u8") for j in range(k + 1)]
    return np.dtype(fields, align=False)


@dataclass(frozen=True)
class Signature:
    """A node signature: the level-0 partition id plus the deduplicated,
    ascending-sorted set of (edge label id, child partition id) pairs."""

    pid0: PartitionId
    pairs: tuple[tuple[LabelId, PartitionId], ...]

    def __post_init__(self) -> None:
        if encoded_signature_size(len(self.pairs)) > MAX_SIGNATURE_BYTES:
            raise ValueError("signature exceeds the maximum encoded size")


def encoded_signature_size(npairs: int) -> int:
    return SIG_HEADER_BYTES + SIG_PAIR_BYTES * npairs


def make_signature(
    pid0: PartitionId, pairs: Iterable[tuple[LabelId, PartitionId]]
) -> Signature:
    """Build a signature from any iterable of pairs.

    Duplicates are removed and the pairs sorted by (edge label, child
    pid), so any permutation of the same pair multiset yields the same
    signature.
    """
    return Signature(pid0, tuple(sorted(set((int(a), int(b)) for a, b in pairs))))


def canonical_bytes(sig: Signature) -> bytes:
    """The canonical byte encoding of a signature.

    Layout: header ``<QI`` = (pid0: u64, pair count: u32), followed by
    one ``<IQ`` = (edge label: u32, child pid: u64) entry per pair in
    ascending order.  The encoding is injective over signatures.
    """
    out = bytearray(_SIG_HEAD.pack(sig.pid0, len(sig.pairs)))
    for elabel, pid in sig.pairs:
        out += _SIG_PAIR.pack(elabel, pid)
    return bytes(out)


def signature_from_bytes(data: bytes) -> Signature:
    """Inverse of canonical_bytes, mainly for tests and debugging."""
    pid0, count = _SIG_HEAD.unpack_from(data, 0)
    if len(data) != encoded_signature_size(count):
        raise ValueError("signature byte string has the wrong length")
    pairs = tuple(
        _SIG_PAIR.unpack_from(data, SIG_HEADER_BYTES + i * SIG_PAIR_BYTES)
        for i in range(count)
    )
    return Signature(pid0, pairs)


def label_signature_bytes(label_id: LabelId) -> bytes:
    """The store key used for the level-0 (label) partition."""
    return struct.pack("<I", label_id)


class InputError(Exception):
    """Malformed or inconsistent user input (exit code 2 at the CLI)."""


class StateError(Exception):
    """The graph directory is not in the state the operation requires
    (unbuilt, already built without --overwrite, wrong store scope, ...).
    Reported like an input error at the CLI."""


class IntegrityError(Exception):
    """An on-disk invariant does not hold (dangling key during a join,
    truncated table file, version mismatch)."""


class LabelDict:
    """Shared dictionary for node and edge labels.

    Ids are dense, starting at 0, assigned in lexicographic order of the
    label text at ingest time.  Labels first seen during maintenance are
    appended in sorted batches after the existing entries, keeping the
    on-disk file (one label per line) append-only.
    """

    def __init__(self, labels: Iterable[str] = ()):
        self._labels: list[str] = list(labels)
        self._index: dict[str, int] = {s: i for i, s in enumerate(self._labels)}
        if len(self._index) != len(self._labels):
            raise ValueError("duplicate label in dictionary")

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "LabelDict":
        return cls(sorted(set(texts)))

    def id_of(self, label: str) -> int | None:
        return self._index.get(label)

    def require(self, label: str) -> int:
        idx = self._index.get(label)
        if idx is None:
            raise KeyError(f"unknown label: {label!r}")
        return idx

    def label_of(self, label_id: int) -> str:
        return self._labels[label_id]

    def add_new(self, labels: Iterable[str]) -> list[tuple[str, int]]:
        """Append labels not yet present, in sorted order.  Returns the
        (label, id) pairs that were added."""
        fresh = sorted(set(labels) - self._index.keys())
        added = []
        for lab in fresh:
            self._index[lab] = len(self._labels)
            self._labels.append(lab)
            added.append((lab, self._index[lab]))
        return added

    def __len__(self) -> int:
        return len(self._labels)

    def __iter__(self) -> Iterator[str]:
        return iter(self._labels)

    def dump_lines(self) -> str:
        return "".join(lab + "\n" for lab in self._labels)

    @classmethod
    def load_lines(cls, text: str) -> "LabelDict":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)
