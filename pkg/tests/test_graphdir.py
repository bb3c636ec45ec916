import json
import os

import numpy as np
import pytest

from conftest import SOCIAL_EDGES, SOCIAL_NODES, write_graph_files

from embisim.graphdir import (
    EDGES_ST,
    EDGES_TS,
    LABELS,
    META,
    NODES,
    GraphDirectory,
    ingest,
)
from embisim.model import InputError, StateError
from embisim.tables import BufferBudget, IoCounter


def _ingest_social(tmp_path, budget=None, nodes=None, edges=None):
    nodes_path, edges_path = write_graph_files(
        tmp_path, nodes or SOCIAL_NODES, edges or SOCIAL_EDGES
    )
    return ingest(
        nodes_path,
        edges_path,
        str(tmp_path / "g"),
        budget or BufferBudget(table_bytes=1 << 20, scratch_dir=str(tmp_path)),
        IoCounter(),
    )


def test_ingest_round_trip(tmp_path):
    gdir, report = _ingest_social(tmp_path)
    assert report.node_count == 6
    assert report.edge_count == 7
    assert report.duplicate_edges_removed == 0

    meta = gdir.read_meta()
    assert meta["node_count"] == 6
    assert meta["edge_count"] == 7
    assert meta["label_count"] == 4
    assert meta["built"] is False

    # labels are assigned dense ids in lexicographic order
    labels = gdir.labels()
    assert [labels.label_of(i) for i in range(4)] == ["M", "P", "l", "w"]

    counters = IoCounter()
    nodes = gdir.nodes_table().read_all(counters)
    assert nodes["nid"].tolist() == [1, 2, 3, 4, 5, 6]
    assert nodes["nlabel"].tolist() == [0, 0, 1, 1, 1, 1]
    assert nodes["pid0"].tolist() == [0] * 6  # unset until a build runs

    st = gdir.edges_st_table().read_all(counters)
    assert [(int(r["sid"]), int(r["tid"]), int(r["elabel"])) for r in st] == [
        (1, 2, 3),
        (1, 4, 2),
        (2, 2, 3),
        (2, 6, 2),
        (3, 1, 2),
        (4, 3, 2),
        (5, 2, 2),
    ]
    ts = gdir.edges_ts_table().read_all(counters)
    assert [(int(r["tid"]), int(r["sid"]), int(r["elabel"])) for r in ts] == [
        (1, 3, 2),
        (2, 1, 3),
        (2, 2, 3),
        (2, 5, 2),
        (3, 4, 2),
        (4, 1, 2),
        (6, 2, 2),
    ]


def test_ingest_drops_duplicate_edges(tmp_path):
    edges = SOCIAL_EDGES + [(1, "w", 2), (5, "l", 2)]
    gdir, report = _ingest_social(tmp_path, edges=edges)
    assert report.edge_count == 7
    assert report.duplicate_edges_removed == 2
    assert gdir.read_meta()["duplicate_edges_removed"] == 2


def test_ingest_rejects_dangling_edge(tmp_path):
    edges = SOCIAL_EDGES + [(1, "w", 99), (98, "l", 2)]
    with pytest.raises(InputError) as err:
        _ingest_social(tmp_path, edges=edges)
    assert "98" in str(err.value) or "99" in str(err.value)
    # a failed ingest leaves nothing behind
    assert not os.path.exists(tmp_path / "g" / META)


def test_ingest_rejects_duplicate_node_ids(tmp_path):
    nodes = SOCIAL_NODES + [(3, "M")]
    with pytest.raises(InputError) as err:
        _ingest_social(tmp_path, nodes=nodes)
    assert "3" in str(err.value)


def test_ingest_reports_malformed_line_number(tmp_path):
    nodes_path = tmp_path / "bad_nodes.txt"
    nodes_path.write_text("1\tA\n2\tB\tEXTRA\tCOLS\n")
    with pytest.raises(InputError) as err:
        ingest(
            str(nodes_path),
            None,
            str(tmp_path / "g"),
            BufferBudget(scratch_dir=str(tmp_path)),
            IoCounter(),
        )
    assert "bad_nodes.txt:2" in str(err.value)


def test_ingest_rejects_non_numeric_id(tmp_path):
    nodes_path = tmp_path / "n.txt"
    nodes_path.write_text("abc\tA\n")
    with pytest.raises(InputError) as err:
        ingest(
            str(nodes_path),
            None,
            str(tmp_path / "g"),
            BufferBudget(scratch_dir=str(tmp_path)),
            IoCounter(),
        )
    assert "n.txt:1" in str(err.value)


def test_ingest_missing_label_defaults(tmp_path):
    nodes_path = tmp_path / "n.txt"
    nodes_path.write_text("# comment line\n5\n\n7\tZ\n")
    edges_path = tmp_path / "e.txt"
    edges_path.write_text("5\t7\n")
    gdir, report = ingest(
        str(nodes_path),
        str(edges_path),
        str(tmp_path / "g"),
        BufferBudget(scratch_dir=str(tmp_path)),
        IoCounter(),
    )
    assert report.node_count == 2
    labels = gdir.labels()
    nodes = gdir.nodes_table().read_all(IoCounter())
    assert labels.label_of(int(nodes[0]["nlabel"])) == "_"
    edges = gdir.edges_st_table().read_all(IoCounter())
    assert labels.label_of(int(edges[0]["elabel"])) == "_"


def test_ingest_nodes_only(tmp_path):
    nodes_path = tmp_path / "n.txt"
    nodes_path.write_text("1\tA\n2\tB\n")
    gdir, report = ingest(
        str(nodes_path),
        None,
        str(tmp_path / "g"),
        BufferBudget(scratch_dir=str(tmp_path)),
        IoCounter(),
    )
    assert report.edge_count == 0
    assert gdir.edges_st_table().count == 0


def test_ingest_refuses_existing_directory(tmp_path):
    _ingest_social(tmp_path)
    with pytest.raises(StateError):
        _ingest_social(tmp_path)


def test_ingest_budget_independent(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    g_small, _ = _ingest_social(
        tmp_path / "a",
        budget=BufferBudget(table_bytes=512, page_size=256, scratch_dir=str(tmp_path)),
    )
    g_big, _ = _ingest_social(
        tmp_path / "b",
        budget=BufferBudget(table_bytes=1 << 24, scratch_dir=str(tmp_path)),
    )
    for name in (NODES, EDGES_ST, EDGES_TS, LABELS):
        with open(g_small.path(name), "rb") as fa, open(g_big.path(name), "rb") as fb:
            assert fa.read() == fb.read(), name


def test_lock_is_exclusive(tmp_path):
    gdir, _ = _ingest_social(tmp_path)
    with gdir.lock():
        with pytest.raises(StateError):
            with gdir.lock():
                pass
    # released on exit
    with gdir.lock():
        pass


def test_meta_is_committed_last(tmp_path):
    """A commit replaces data files before the meta file, so a reader
    never sees new meta with old tables."""
    gdir, _ = _ingest_social(tmp_path)
    staging = gdir.staging()
    replaced = []
    real_replace = os.replace

    def spy(src, dst):
        replaced.append(os.path.basename(dst))
        return real_replace(src, dst)

    with open(staging.path_for(LABELS), "w") as fh:
        fh.write("M\nP\nl\nw\n")
    meta = gdir.read_meta()
    import unittest.mock

    with unittest.mock.patch("embisim.graphdir.os.replace", side_effect=spy):
        staging.commit(meta)
    assert replaced[-1] == META
    assert LABELS in replaced


def test_abort_removes_staged_files(tmp_path):
    gdir, _ = _ingest_social(tmp_path)
    staging = gdir.staging()
    p = staging.path_for(LABELS)
    with open(p, "w") as fh:
        fh.write("x\n")
    staging.abort()
    assert not os.path.exists(p)


def test_read_meta_missing(tmp_path):
    gdir = GraphDirectory(str(tmp_path / "nope"))
    with pytest.raises(StateError):
        gdir.read_meta()


def test_require_built_on_fresh_ingest(tmp_path):
    gdir, _ = _ingest_social(tmp_path)
    with pytest.raises(StateError):
        gdir.require_built()


def test_meta_json_is_plain(tmp_path):
    gdir, _ = _ingest_social(tmp_path)
    with open(gdir.path(META), encoding="utf-8") as fh:
        meta = json.load(fh)
    assert meta["format_version"] == 1
    assert isinstance(meta["node_count"], int)
