"""In-memory reference implementations of k-bisimulation.

These are the ground-truth implementations the test suite checks the
external-memory pipeline against.  Three deliberately different
formulations of the same equivalence are provided (plus the classical
non-localized fixpoint), so that a bug in one is unlikely to be
reproduced by the others:

* :func:`naive_k_bisim` groups nodes by label block and labeled
  transitions into the previous round's blocks.
* :func:`kaushik_k_bisim` folds the previous round's equivalence into
  the grouping key instead of the label block.
* :func:`refine_k_bisim` is splitter-based partition refinement: blocks
  are split against labeled parent sets of the previous round's blocks
  until stable.

Everything here is pure Python over dicts and sets, sized for graphs
that fit comfortably in memory (at most 10^4 nodes, enforced).
"""

from __future__ import annotations

from dataclasses import dataclass, field

MAX_ORACLE_NODES = 10_000

# A partition is represented as a dict mapping node id -> dense block id.
Partition = dict[int, int]


@dataclass
class SmallGraph:
    """A labeled directed graph small enough for the reference oracles.

    nodes: list of (node id, node label) pairs, ids unique.
    edges: list of (source id, edge label, target id) triples.
    """

    nodes: list[tuple[int, str]]
    edges: list[tuple[int, str, int]]
    _out: dict[int, list[tuple[str, int]]] = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if len(self.nodes) > MAX_ORACLE_NODES:
            raise ValueError(
                f"oracle graphs are capped at {MAX_ORACLE_NODES} nodes, "
                f"got {len(self.nodes)}"
            )
        ids = [nid for nid, _ in self.nodes]
        idset = set(ids)
        if len(idset) != len(ids):
            raise ValueError("duplicate node ids")
        for s, _, t in self.edges:
            if s not in idset or t not in idset:
                raise ValueError(f"edge endpoint not in node set: ({s}, {t})")

    @property
    def out(self) -> dict[int, list[tuple[str, int]]]:
        if self._out is None:
            adj: dict[int, list[tuple[str, int]]] = {nid: [] for nid, _ in self.nodes}
            for s, lab, t in self.edges:
                adj[s].append((lab, t))
            self._out = adj
        return self._out

    @classmethod
    def from_files(cls, nodes_path, edges_path) -> "SmallGraph":
        """Read the tab-separated text formats used by the ingest command.

        Nodes: ``nId<TAB>nLabel`` (label defaults to ``_`` if missing).
        Edges: ``sId<TAB>eLabel<TAB>tId`` or ``sId<TAB>tId`` (label ``_``).
        Lines starting with ``#`` and blank lines are skipped.
        """
        nodes = []
        with open(nodes_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) == 1:
                    nodes.append((int(parts[0]), "_"))
                else:
                    nodes.append((int(parts[0]), parts[1]))
        edges = []
        with open(edges_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) == 2:
                    edges.append((int(parts[0]), "_", int(parts[1])))
                else:
                    edges.append((int(parts[0]), parts[1], int(parts[2])))
        return cls(nodes, edges)


def _densify(keys: dict[int, object]) -> Partition:
    """Assign dense block ids by first appearance in ascending node id order."""
    out: Partition = {}
    seen: dict[object, int] = {}
    for nid in sorted(keys):
        key = keys[nid]
        if key not in seen:
            seen[key] = len(seen)
        out[nid] = seen[key]
    return out


def _label_partition(g: SmallGraph) -> Partition:
    return _densify({nid: lab for nid, lab in g.nodes})


def _naive_step(g: SmallGraph, p0: Partition, prev: Partition) -> Partition:
    keys = {
        nid: (p0[nid], frozenset((lab, prev[t]) for lab, t in g.out[nid]))
        for nid, _ in g.nodes
    }
    return _densify(keys)


def naive_k_bisim(g: SmallGraph, k: int) -> Partition:
    """k rounds of signature grouping over (label block, labeled transitions)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    p0 = _label_partition(g)
    p = p0
    for _ in range(k):
        p = _naive_step(g, p0, p)
    return p


def kaushik_k_bisim(g: SmallGraph, k: int) -> Partition:
    """Variant that keys each round on the previous round's block instead
    of the label block (the extra containment clause folded in)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    p = _label_partition(g)
    for _ in range(k):
        keys = {
            nid: (p[nid], frozenset((lab, p[t]) for lab, t in g.out[nid]))
            for nid, _ in g.nodes
        }
        p = _densify(keys)
    return p


def refine_k_bisim(g: SmallGraph, k: int) -> Partition:
    """Splitter-based refinement.

    Each round splits every current block against parents_l(J) for every
    block J of the previous round and every edge label l, where
    parents_l(J) is the set of nodes with an l-labeled edge into J.  The
    result of a round is the coarsest partition refining the previous one
    that is stable with respect to it.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    labels = sorted({lab for _, lab, _ in g.edges})
    blocks: list[set[int]] = []
    by_key: dict[str, set[int]] = {}
    for nid, lab in g.nodes:
        by_key.setdefault(lab, set()).add(nid)
    blocks = [by_key[lab] for lab in sorted(by_key)]

    for _ in range(k):
        prev = [set(b) for b in blocks]
        cur = [set(b) for b in prev]
        for j_block in prev:
            for lab in labels:
                parents = {
                    s for s, elab, t in g.edges if elab == lab and t in j_block
                }
                nxt: list[set[int]] = []
                for i_block in cur:
                    inside = i_block & parents
                    outside = i_block - parents
                    if inside and outside:
                        nxt.append(inside)
                        nxt.append(outside)
                    else:
                        nxt.append(i_block)
                cur = nxt
        blocks = cur

    keys: dict[int, object] = {}
    for idx, block in enumerate(blocks):
        for nid in block:
            keys[nid] = idx
    return _densify(keys)


def full_bisim(g: SmallGraph) -> tuple[Partition, int]:
    """Iterate refinement to fixpoint.

    Returns the fixpoint partition and the stabilization round: the
    smallest j such that round j and round j+1 yield the same partition.
    The round is bounded by the node count.
    """
    p0 = _label_partition(g)
    p = p0
    j = 0
    while True:
        nxt = _naive_step(g, p0, p)
        if relation_equal(p, nxt):
            return p, j
        p = nxt
        j += 1
        if j > len(g.nodes) + 1:
            raise AssertionError("refinement failed to stabilize within the node bound")


def relation_equal(a: Partition, b: Partition) -> bool:
    """True when two partitions induce the same equivalence relation.

    Block ids are arbitrary, so this checks that the block structure
    matches: the mapping between a's ids and b's ids must be a bijection
    over the shared node set.
    """
    if a.keys() != b.keys():
        return False
    fwd: dict[int, int] = {}
    rev: dict[int, int] = {}
    for nid, ba in a.items():
        bb = b[nid]
        if fwd.setdefault(ba, bb) != bb:
            return False
        if rev.setdefault(bb, ba) != ba:
            return False
    return True


def blocks_of(p: Partition) -> list[list[int]]:
    """The partition as sorted node-id blocks (sorted by smallest
    member), convenient for comparing against worked examples."""
    grouped: dict[int, list[int]] = {}
    for nid in sorted(p):
        grouped.setdefault(p[nid], []).append(nid)
    return sorted(grouped.values())


def partition_count(p: Partition) -> int:
    return len(set(p.values()))
