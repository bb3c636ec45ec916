"""Synthetic graph families for benchmarks and tests.

Each generator returns the node and edge lists plus one extra
"insertion" edge that is deliberately left out of the graph.  The
insertion edge is the interesting update for that family: for the
full tree it changes no partition at any level, for the complete
digraph it drags every node through every level.

The random generator uses a hand-rolled SplitMix64 so output is
byte-identical across platforms and Python versions (random.Random
makes no such promise for its higher-level methods).
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import InputError

_MASK = (1 << 64) - 1


class SplitMix64:
    """Tiny deterministic PRNG (public-domain constants)."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) without modulo bias."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = _MASK - (_MASK + 1) % bound
        while True:
            v = self.next_u64()
            if v <= limit:
                return v % bound


@dataclass
class GeneratedGraph:
    nodes: list[tuple[int, str]]
    edges: list[tuple[int, str, int]]
    insertion: tuple[int, str, int] | None


def dbest(arity: int, height: int) -> GeneratedGraph:
    """Full tree with `arity` children per internal node and `height`
    levels of nodes (ids in breadth-first order, root 0).

    Every node carries the same label; edges out of the root are
    labeled "x", all deeper edges "y".  The insertion edge goes from
    the second-to-last-level's second node to its neighbor's second
    child: the new pair duplicates one already in the source's
    signature at every level, so nothing changes anywhere.
    """
    if arity < 2 or height < 2:
        raise InputError("dbest needs arity >= 2 and height >= 2")
    total = (arity**height - 1) // (arity - 1)
    nodes = [(i, "n") for i in range(total)]
    first_leaf = (arity ** (height - 1) - 1) // (arity - 1)
    edges = []
    for parent in range(first_leaf):
        lab = "x" if parent == 0 else "y"
        for c in range(1, arity + 1):
            edges.append((parent, lab, arity * parent + c))
    insertion = None
    if height >= 3:
        f1 = (arity ** (height - 2) - 1) // (arity - 1)
        insertion = (f1 + 1, "y", arity * f1 + 2)
    return GeneratedGraph(nodes, edges, insertion)


def dworst(n: int) -> GeneratedGraph:
    """Complete digraph on nodes 0..n-1 plus one isolated node n, all
    with the same label.  The insertion edge (0, "y", n) separates node
    0 at level 1 and then forces every complete-graph node to be
    re-examined at every deeper level.
    """
    if n < 2:
        raise InputError("dworst needs n >= 2")
    nodes = [(i, "n") for i in range(n + 1)]
    edges = [(s, "x", t) for s in range(n) for t in range(n) if s != t]
    return GeneratedGraph(nodes, edges, insertion=(0, "y", n))


def random_graph(
    n_nodes: int,
    n_edges: int,
    seed: int,
    *,
    n_node_labels: int = 4,
    n_edge_labels: int = 3,
) -> GeneratedGraph:
    """Uniform random digraph: distinct (source, target) pairs, no
    self-loops, labels drawn uniformly."""
    if n_nodes < 1:
        raise InputError("random graph needs at least one node")
    if n_node_labels < 1 or n_edge_labels < 1:
        raise InputError("label counts must be positive")
    cap = n_nodes * (n_nodes - 1)
    if n_edges > cap:
        raise InputError(f"at most {cap} distinct non-loop edges exist")
    rng = SplitMix64(seed)
    nodes = [(i, f"n{rng.below(n_node_labels)}") for i in range(n_nodes)]
    seen: set[tuple[int, int]] = set()
    edges = []
    while len(edges) < n_edges:
        s = rng.below(n_nodes)
        t = rng.below(n_nodes)
        if s == t or (s, t) in seen:
            continue
        seen.add((s, t))
        edges.append((s, f"e{rng.below(n_edge_labels)}", t))
    return GeneratedGraph(nodes, edges, insertion=None)


def write_graph(
    graph: GeneratedGraph, nodes_path: str, edges_path: str
) -> None:
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for nid, lab in graph.nodes:
            fh.write(f"{nid}\t{lab}\n")
    with open(edges_path, "w", encoding="utf-8") as fh:
        for sid, lab, tid in graph.edges:
            fh.write(f"{sid}\t{lab}\t{tid}\n")
