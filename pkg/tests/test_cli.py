import json
import os
import subprocess
import sys

import pytest

from conftest import SOCIAL_EDGES, SOCIAL_NODES, write_graph_files

from embisim.cli import _size, main
from embisim.model import InputError


def _social_files(tmp_path):
    nodes, edges = write_graph_files(tmp_path, SOCIAL_NODES, SOCIAL_EDGES)
    return str(nodes), str(edges)


def _ingest_and_build(tmp_path, k=2, extra=()):
    nodes, edges = _social_files(tmp_path)
    d = str(tmp_path / "g")
    assert main(["ingest", d, "--nodes", nodes, "--edges", edges]) == 0
    assert main(["build", d, "-k", str(k), *extra]) == 0
    return d


def test_size_parsing():
    assert _size("4096") == 4096
    assert _size("64K") == 64 * 1024
    assert _size("128m") == 128 * 2**20
    assert _size("2G") == 2 * 2**30
    with pytest.raises(InputError):
        _size("12Q")
    with pytest.raises(InputError):
        _size("-5")
    with pytest.raises(InputError):
        _size("")


def test_ingest_and_build_output(tmp_path, capsys):
    d = _ingest_and_build(tmp_path)
    out = capsys.readouterr().out
    assert "ingest: 6 nodes, 7 edges, 4 labels" in out
    assert "build: k=2 effective=2 partitions per level: 2 4 5" in out
    assert "iteration 0: partitions=2" in out


def test_ingest_error_exit_code(tmp_path, capsys):
    nodes, edges = _social_files(tmp_path)
    bad = tmp_path / "bad_edges.txt"
    bad.write_text("1\tw\t99\n")
    rc = main(["ingest", str(tmp_path / "g"), "--nodes", nodes, "--edges", str(bad)])
    assert rc == 2
    assert "unknown node ids" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path, capsys):
    rc = main(["ingest", str(tmp_path / "g"), "--nodes", str(tmp_path / "nope.txt")])
    assert rc == 3
    assert "io error" in capsys.readouterr().err


def test_build_twice_needs_overwrite(tmp_path, capsys):
    d = _ingest_and_build(tmp_path)
    assert main(["build", d, "-k", "2"]) == 2
    assert "overwrite" in capsys.readouterr().err
    assert main(["build", d, "-k", "3", "--overwrite"]) == 0


def test_validate_ok_and_level_flag(tmp_path, capsys):
    d = _ingest_and_build(tmp_path)
    assert main(["validate", d]) == 0
    out = capsys.readouterr().out
    assert "level 0 ok (2 blocks)" in out
    assert "level 2 ok (5 blocks)" in out
    assert "3 level(s) match" in out
    assert main(["validate", d, "--level", "1"]) == 0
    assert "1 level(s) match" in capsys.readouterr().out


def test_validate_detects_corruption(tmp_path, capsys):
    import numpy as np

    from embisim.graphdir import GraphDirectory
    from embisim.model import history_dtype

    d = _ingest_and_build(tmp_path)
    gdir = GraphDirectory(d)
    meta = gdir.read_meta()
    dt = history_dtype(meta["k_stored"])
    hist = np.fromfile(gdir.path("history.tbl"), dtype=dt)
    hist["pid2"][0] = hist["pid2"][3]  # force nodes 1 and 4 together
    hist.tofile(gdir.path("history.tbl"))

    assert main(["validate", d]) == 1
    out = capsys.readouterr().out
    assert "MISMATCH" in out
    assert "level 2" in out


def test_update_add_edges_and_stats(tmp_path, capsys):
    d = _ingest_and_build(tmp_path)
    upd = tmp_path / "new_edges.txt"
    upd.write_text("6\tl\t5\n")
    csv_path = tmp_path / "upd.csv"
    rc = main(["update", d, "add-edges", str(upd), "--stats-csv", str(csv_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "update add-edges: applied" in out
    assert "level 1: checked=1 changed=1" in out
    assert "level 2: checked=2 changed=2" in out
    header = csv_path.read_text().splitlines()[0]
    assert header.startswith("level,checked_nodes,changed_nodes,changed_partitions")
    assert main(["validate", d]) == 0


def test_update_add_nodes_del_nodes(tmp_path, capsys):
    d = _ingest_and_build(tmp_path)
    nf = tmp_path / "new_nodes.txt"
    nf.write_text("7\tP\n8\tM\n")
    assert main(["update", d, "add-nodes", str(nf)]) == 0
    df = tmp_path / "gone.txt"
    df.write_text("# doomed\n8\n")
    assert main(["update", d, "del-nodes", str(df)]) == 0
    assert main(["validate", d]) == 0
    capsys.readouterr()
    assert main(["stats", d]) == 0
    out = capsys.readouterr().out
    assert "nodes: 7" in out


def test_update_del_edges(tmp_path):
    d = _ingest_and_build(tmp_path)
    f = tmp_path / "drop.txt"
    f.write_text("1\tw\t2\n")
    assert main(["update", d, "del-edges", str(f)]) == 0
    assert main(["validate", d]) == 0


def test_update_set_k(tmp_path, capsys):
    d = _ingest_and_build(tmp_path, k=1)
    assert main(["update", d, "set-k", "3"]) == 0
    assert main(["validate", d]) == 0
    capsys.readouterr()
    assert main(["stats", d]) == 0
    assert "k=3" in capsys.readouterr().out
    assert main(["update", d, "set-k", "x"]) == 2


def test_update_error_codes(tmp_path, capsys):
    d = _ingest_and_build(tmp_path)
    f = tmp_path / "bad.txt"
    f.write_text("1\tw\t2\n")  # already present
    assert main(["update", d, "add-edges", str(f)]) == 2
    assert "already present" in capsys.readouterr().err


def test_stats_recounts_after_update(tmp_path, capsys):
    d = _ingest_and_build(tmp_path)
    f = tmp_path / "e.txt"
    f.write_text("6\tl\t5\n")
    assert main(["update", d, "add-edges", str(f)]) == 0
    capsys.readouterr()
    assert main(["stats", d]) == 0
    out = capsys.readouterr().out
    assert "level 0: 2 partitions" in out
    assert "level 1: 3 partitions" in out
    assert "level 2: 3 partitions" in out
    # the recount was cached back into the meta file
    meta = json.load(open(os.path.join(d, "meta")))
    assert meta["partition_counts"][:3] == [2, 3, 3]


def test_generate_subcommands(tmp_path, capsys):
    n, e, ins = (
        str(tmp_path / "n.txt"),
        str(tmp_path / "e.txt"),
        str(tmp_path / "i.txt"),
    )
    rc = main(
        [
            "generate",
            "dbest",
            "--arity",
            "2",
            "--height",
            "3",
            "--nodes-out",
            n,
            "--edges-out",
            e,
            "--insert-out",
            ins,
        ]
    )
    assert rc == 0
    assert "7 nodes, 6 edges" in capsys.readouterr().out
    assert open(ins).read() == "2\ty\t4\n"

    rc = main(
        ["generate", "random", "--n", "10", "--edges-count", "20",
         "--seed", "3", "--nodes-out", n, "--edges-out", e]
    )
    assert rc == 0
    # and the output ingests cleanly
    assert main(["ingest", str(tmp_path / "g"), "--nodes", n, "--edges", e]) == 0


def test_generate_dworst_pipeline_end_to_end(tmp_path):
    n, e, ins = (
        str(tmp_path / "n.txt"),
        str(tmp_path / "e.txt"),
        str(tmp_path / "i.txt"),
    )
    assert (
        main(["generate", "dworst", "--n", "8", "--nodes-out", n,
              "--edges-out", e, "--insert-out", ins]) == 0
    )
    d = str(tmp_path / "g")
    assert main(["ingest", d, "--nodes", n, "--edges", e]) == 0
    assert main(["build", d, "-k", "3"]) == 0
    assert main(["update", d, "add-edges", ins, "--theta", "1.0"]) == 0
    assert main(["validate", d]) == 0


def test_env_fallback_and_flag_priority(tmp_path, monkeypatch, capsys):
    nodes, edges = _social_files(tmp_path)
    d = str(tmp_path / "g")
    monkeypatch.setenv("EMBISIM_TABLE_BUFFER", "1M")
    monkeypatch.setenv("EMBISIM_K", "1")
    assert main(["ingest", d, "--nodes", nodes, "--edges", edges]) == 0
    assert main(["build", d]) == 0  # k comes from the environment
    out = capsys.readouterr().out
    assert "build: k=1" in out
    # explicit flag beats the environment
    assert main(["build", d, "-k", "2", "--overwrite"]) == 0
    assert "build: k=2" in capsys.readouterr().out


def test_bad_env_size_is_input_error(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("EMBISIM_TABLE_BUFFER", "lots")
    rc = main(["stats", str(tmp_path / "g")])
    assert rc == 2
    assert "bad size" in capsys.readouterr().err


def test_console_script_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "embisim.cli", "--help"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "ingest" in proc.stdout
    assert "generate" in proc.stdout


def test_stats_on_unbuilt_graph(tmp_path, capsys):
    nodes, edges = _social_files(tmp_path)
    d = str(tmp_path / "g")
    main(["ingest", d, "--nodes", nodes, "--edges", edges])
    capsys.readouterr()
    assert main(["stats", d]) == 0
    assert "not built" in capsys.readouterr().out


def test_validate_unbuilt_graph_is_state_error(tmp_path, capsys):
    nodes, edges = _social_files(tmp_path)
    d = str(tmp_path / "g")
    main(["ingest", d, "--nodes", nodes, "--edges", edges])
    assert main(["validate", d]) == 2
