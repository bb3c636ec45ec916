"""Shared fixtures: the six-node social graph used across the suite and
helpers for writing graph text files."""

from __future__ import annotations

import random

import pytest

from embisim.oracle import SmallGraph

# A small social graph: two members (M) and four posts (P).  Used as the
# worked example throughout the tests because every partition of it can
# be checked by hand.
SOCIAL_NODES = [(1, "M"), (2, "M"), (3, "P"), (4, "P"), (5, "P"), (6, "P")]
SOCIAL_EDGES = [
    (1, "w", 2),
    (1, "l", 4),
    (2, "w", 2),
    (2, "l", 6),
    (3, "l", 1),
    (4, "l", 3),
    (5, "l", 2),
]


@pytest.fixture
def social_graph() -> SmallGraph:
    return SmallGraph(list(SOCIAL_NODES), list(SOCIAL_EDGES))


def write_graph_files(tmp_path, nodes, edges, prefix="g"):
    """Write node/edge text files in the ingest format; returns paths."""
    nodes_path = tmp_path / f"{prefix}.nodes"
    edges_path = tmp_path / f"{prefix}.edges"
    nodes_path.write_text("".join(f"{n}\t{lab}\n" for n, lab in nodes))
    edges_path.write_text("".join(f"{s}\t{lab}\t{t}\n" for s, lab, t in edges))
    return nodes_path, edges_path


def random_small_graph(rng: random.Random, max_nodes=50, max_edges=200,
                       n_node_labels=4, n_edge_labels=3):
    """Seeded random graph as plain lists (no self-loops, no duplicate
    (source, label, target) triples)."""
    n = rng.randint(1, max_nodes)
    nodes = [(i, f"n{rng.randrange(n_node_labels)}") for i in range(1, n + 1)]
    edges = set()
    m_target = rng.randint(0, max_edges)
    for _ in range(m_target):
        s = rng.randint(1, n)
        t = rng.randint(1, n)
        if s == t:
            continue
        edges.add((s, f"e{rng.randrange(n_edge_labels)}", t))
    return nodes, sorted(edges)
