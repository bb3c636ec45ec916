"""Command-line interface.

Exit codes: 0 success, 1 validation mismatch, 2 bad input or state,
3 I/O failure.  Buffer flags accept K/M/G suffixes and fall back to
EMBISIM_* environment variables (flag beats environment beats
default).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .build import STATS_FIELDS, build_bisim, write_stats_csv
from .config import RunConfig
from .graphdir import GraphDirectory, ingest
from .maintain import (
    UPDATE_STATS_FIELDS,
    add_edges,
    add_nodes,
    change_k,
    delete_edges,
    delete_nodes,
)
from .model import InputError, IntegrityError, StateError
from .store import (
    BACKEND_EXTERNAL,
    BACKEND_MEMORY,
    SCOPE_GLOBAL,
    SCOPE_PER_ITERATION,
)
from .tables import IoCounter


def _size(text: str) -> int:
    t = str(text).strip()
    mult = 1
    if t and t[-1] in "kKmMgG":
        mult = {"k": 2**10, "m": 2**20, "g": 2**30}[t[-1].lower()]
        t = t[:-1]
    try:
        v = int(t)
    except ValueError:
        raise InputError(f"bad size: {text!r} (use digits with optional K/M/G)")
    if v <= 0:
        raise InputError(f"size must be positive: {text!r}")
    return v * mult


def _env(name: str, default: str) -> str:
    return os.environ.get("EMBISIM_" + name, default)


def _bool_env(name: str, default: bool) -> bool:
    raw = os.environ.get("EMBISIM_" + name)
    if raw is None:
        return default
    return raw.strip().lower() not in ("0", "false", "no", "off", "")


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument(
        "--table-buffer",
        type=_size,
        default=_size(_env("TABLE_BUFFER", "128M")),
        help="memory budget for table scans and sorts (default 128M)",
    )
    p.add_argument(
        "--store-buffer",
        type=_size,
        default=_size(_env("STORE_BUFFER", "128M")),
        help="memory budget for the signature store (default 128M)",
    )
    p.add_argument(
        "--page-size",
        type=_size,
        default=_size(_env("PAGE_SIZE", "4096")),
        help="I/O page size used for budgeting (default 4096)",
    )
    p.add_argument(
        "--scratch-dir",
        default=os.environ.get("EMBISIM_SCRATCH_DIR"),
        help="directory for spill files (default: system temp)",
    )
    p.add_argument(
        "--stats-csv",
        default=os.environ.get("EMBISIM_STATS_CSV"),
        help="write per-iteration (build) or per-level (update) stats here",
    )
    return p


def _config(args: argparse.Namespace, **overrides) -> RunConfig:
    kw = dict(
        table_buffer=args.table_buffer,
        store_buffer=args.store_buffer,
        page_size=args.page_size,
        scratch_dir=args.scratch_dir,
        stats_path=args.stats_csv,
    )
    kw.update(overrides)
    return RunConfig(**kw)


# -- subcommand bodies ---------------------------------------------------------


def _cmd_ingest(args: argparse.Namespace) -> int:
    gdir, report = ingest(
        args.nodes,
        args.edges,
        args.dir,
        _config(args).table_budget(),
        IoCounter(),
    )
    dropped = (
        f", {report.duplicate_edges_removed} duplicate edges dropped"
        if report.duplicate_edges_removed
        else ""
    )
    labels = gdir.read_meta()["label_count"]
    print(
        f"ingest: {report.node_count} nodes, {report.edge_count} edges, "
        f"{labels} labels{dropped}"
    )
    return 0


def _cmd_build(args: argparse.Namespace) -> int:
    config = _config(
        args,
        scope=args.scope,
        backend=args.backend,
        early_stop=args.early_stop,
    )
    gdir = GraphDirectory(args.dir)
    result = build_bisim(gdir, args.k, config, overwrite=args.overwrite)
    counts = " ".join(str(c) for c in result.partition_counts)
    print(
        f"build: k={result.k} effective={result.k_effective} "
        f"partitions per level: {counts}"
    )
    for row in result.stats:
        print(
            f"iteration {row.iteration}: partitions={row.partition_count} "
            f"max_pairs={row.max_signature_pairs} "
            f"table_io={row.table_read + row.table_write} "
            f"store_io={row.store_read + row.store_write}"
        )
    if config.stats_path:
        write_stats_csv(config.stats_path, result.stats)
        print(f"stats written to {config.stats_path}")
    return 0


def _read_node_file(path: str) -> list[tuple[int, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) == 1:
                parts.append("_")
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected nId<TAB>nLabel")
            out.append((_node_id(parts[0], path, lineno), parts[1]))
    return out


def _read_edge_file(path: str) -> list[tuple[int, str, int]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) == 2:
                parts = [parts[0], "_", parts[1]]
            if len(parts) != 3:
                raise InputError(f"{path}:{lineno}: expected sId<TAB>eLabel<TAB>tId")
            out.append(
                (
                    _node_id(parts[0], path, lineno),
                    parts[1],
                    _node_id(parts[2], path, lineno),
                )
            )
    return out


def _read_id_file(path: str) -> list[int]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            out.append(_node_id(line, path, lineno))
    return out


def _node_id(text: str, path: str, lineno: int) -> int:
    try:
        v = int(text)
    except ValueError:
        raise InputError(f"{path}:{lineno}: not a node id: {text!r}")
    if not 0 <= v < 2**64:
        raise InputError(f"{path}:{lineno}: node id out of range: {v}")
    return v


def _cmd_update(args: argparse.Namespace) -> int:
    config = _config(args, theta=args.theta, early_stop=args.early_stop)
    gdir = GraphDirectory(args.dir)
    action = args.action
    if action == "add-nodes":
        result = add_nodes(gdir, _read_node_file(args.arg), config)
    elif action == "add-edges":
        result = add_edges(gdir, _read_edge_file(args.arg), config)
    elif action == "del-edges":
        result = delete_edges(gdir, _read_edge_file(args.arg), config)
    elif action == "del-nodes":
        result = delete_nodes(gdir, _read_id_file(args.arg), config)
    elif action == "set-k":
        try:
            new_k = int(args.arg)
        except ValueError:
            raise InputError(f"set-k needs an integer, got {args.arg!r}")
        result = change_k(gdir, new_k, config)
    else:  # pragma: no cover - argparse restricts choices
        raise InputError(f"unknown update action {action!r}")

    print(f"update {action}: {'rebuilt' if result.rebuilt else 'applied'}")
    for row in result.levels:
        print(
            f"level {row.level}: checked={row.checked_nodes} "
            f"changed={row.changed_nodes} partitions={row.changed_partitions} "
            f"({row.action})"
        )
    for row in result.rebuild_stats:
        print(
            f"iteration {row.iteration}: partitions={row.partition_count} "
            f"table_io={row.table_read + row.table_write}"
        )
    if config.stats_path:
        import csv
        import dataclasses

        with open(config.stats_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=UPDATE_STATS_FIELDS)
            writer.writeheader()
            for row in result.levels:
                writer.writerow(dataclasses.asdict(row))
        print(f"stats written to {config.stats_path}")
    return 0


def _load_small_graph(gdir: GraphDirectory):
    """The committed graph as label strings, for the reference oracles."""
    from .oracle import MAX_ORACLE_NODES, SmallGraph

    meta = gdir.require_built()
    if meta["node_count"] > MAX_ORACLE_NODES:
        raise InputError(
            f"validate uses in-memory reference oracles and is capped at "
            f"{MAX_ORACLE_NODES} nodes; this graph has {meta['node_count']}"
        )
    labels = gdir.labels()
    counters = IoCounter()
    budget = RunConfig().table_budget()
    nodes = []
    for chunk in gdir.nodes_table().chunks(budget.table_bytes, counters):
        for r in chunk:
            nodes.append((int(r["nid"]), labels.label_of(int(r["nlabel"]))))
    edges = []
    for chunk in gdir.edges_st_table().chunks(budget.table_bytes, counters):
        for r in chunk:
            edges.append(
                (int(r["sid"]), labels.label_of(int(r["elabel"])), int(r["tid"]))
            )
    return SmallGraph(nodes, edges), meta


def _witness(a: dict, b: dict) -> tuple[int, int]:
    """A node pair grouped together by one partition and apart by the
    other (exists whenever the relations differ)."""
    for p, q in ((a, b), (b, a)):
        groups: dict[int, list[int]] = {}
        for nid in sorted(p):
            groups.setdefault(p[nid], []).append(nid)
        for members in groups.values():
            for m in members[1:]:
                if q[m] != q[members[0]]:
                    return members[0], m
    raise AssertionError("partitions are equal")


def _cmd_validate(args: argparse.Namespace) -> int:
    from .oracle import partition_count, refine_k_bisim, relation_equal

    gdir = GraphDirectory(args.dir)
    graph, meta = _load_small_graph(gdir)
    k = meta["k"]
    history = gdir.history_table(meta)
    budget = RunConfig().table_budget()
    counters = IoCounter()
    stored: list[dict[int, int]] = [dict() for _ in range(k + 1)]
    for chunk in history.chunks(budget.table_bytes, counters):
        for r in chunk:
            nid = int(r["nid"])
            stored[0][nid] = int(r["pid0"])
            for j in range(1, k + 1):
                stored[j][nid] = int(r[f"pid{j}"])
    levels = [args.level] if args.level is not None else list(range(k + 1))
    failed = False
    for j in levels:
        if not 0 <= j <= k:
            raise InputError(f"level {j} out of range (graph has k={k})")
        want = refine_k_bisim(graph, j)
        if relation_equal(want, stored[j]):
            print(f"validate: level {j} ok ({partition_count(stored[j])} blocks)")
        else:
            x, y = _witness(want, stored[j])
            print(
                f"validate: level {j} MISMATCH: nodes {x} and {y} are "
                f"{'equivalent' if want[x] == want[y] else 'separated'} in the "
                f"reference but {'separated' if want[x] == want[y] else 'equivalent'} "
                f"in the stored partition"
            )
            failed = True
    if failed:
        return 1
    print(f"validate: {len(levels)} level(s) match")
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    gdir = GraphDirectory(args.dir)
    meta = gdir.read_meta()
    print(f"graph: {gdir.root}")
    print(f"nodes: {meta['node_count']}  edges: {meta['edge_count']}")
    print(f"labels: {meta['label_count']}")
    if not meta.get("built"):
        print("partition: not built")
        return 0
    print(
        f"partition: k={meta['k']} stored={meta['k_stored']} "
        f"effective={GraphDirectory.view_k_effective(meta)} "
        f"scope={meta['scope']} backend={meta['backend']}"
    )
    counts = meta.get("partition_counts")
    if counts is None:
        counts = _recount(gdir, meta)
    for j in range(meta["k"] + 1):
        print(f"level {j}: {counts[j]} partitions")
    last = meta.get("last_op") or {}
    if last:
        io = last.get("io") or {}
        total = sum(io.values()) if io else 0
        print(f"last op: {last.get('kind')} ({total} bytes of I/O)")
    return 0


def _recount(gdir: GraphDirectory, meta: dict) -> list[int]:
    """Partition counts went stale (updates do not track global distinct
    counts); recount from the history table and cache in the meta file."""
    budget = RunConfig().table_budget()
    counters = IoCounter()
    k = meta["k"]
    seen: list[set] = [set() for _ in range(k + 1)]
    for chunk in gdir.history_table(meta).chunks(budget.table_bytes, counters):
        seen[0].update(np.unique(chunk["pid0"]).tolist())
        for j in range(1, k + 1):
            seen[j].update(np.unique(chunk[f"pid{j}"]).tolist())
    counts = [len(s) for s in seen]
    with gdir.lock():
        fresh = gdir.read_meta()
        if fresh.get("partition_counts") is None:
            fresh["partition_counts"] = counts + [counts[-1]] * (
                fresh["k_stored"] - k
            )
            staging = gdir.staging()
            staging.commit(fresh)
    return counts


def _cmd_generate(args: argparse.Namespace) -> int:
    from . import generate as gen

    if args.family == "dbest":
        graph = gen.dbest(args.arity, args.height)
    elif args.family == "dworst":
        graph = gen.dworst(args.n)
    else:
        graph = gen.random_graph(
            args.n,
            args.edges_count,
            args.seed,
            n_node_labels=args.node_labels,
            n_edge_labels=args.edge_labels,
        )
    gen.write_graph(graph, args.nodes_out, args.edges_out)
    print(
        f"generate {args.family}: {len(graph.nodes)} nodes, "
        f"{len(graph.edges)} edges"
    )
    if args.insert_out:
        if graph.insertion is None:
            raise InputError(f"{args.family} has no held-out insertion edge here")
        s, lab, t = graph.insertion
        with open(args.insert_out, "w", encoding="utf-8") as fh:
            fh.write(f"{s}\t{lab}\t{t}\n")
        print(f"held-out insertion edge written to {args.insert_out}")
    return 0


# -- parser -------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="embisim",
        description="External-memory k-bisimulation partitioner",
    )
    sub = top.add_subparsers(dest="command", required=True)
    common = _common_flags()

    p = sub.add_parser("ingest", parents=[common], help="load a graph from text files")
    p.add_argument("dir", help="graph directory to create")
    p.add_argument("--nodes", required=True, help="nId<TAB>nLabel lines")
    p.add_argument("--edges", help="sId<TAB>eLabel<TAB>tId lines")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("build", parents=[common], help="construct the partition")
    p.add_argument("dir")
    p.add_argument("-k", type=int, default=int(_env("K", "5")), help="depth (default 5)")
    p.add_argument("--overwrite", action="store_true", help="replace an existing partition")
    p.add_argument(
        "--scope",
        choices=[SCOPE_GLOBAL, SCOPE_PER_ITERATION],
        default=_env("SCOPE", SCOPE_GLOBAL),
    )
    p.add_argument(
        "--backend",
        choices=[BACKEND_EXTERNAL, BACKEND_MEMORY],
        default=_env("BACKEND", BACKEND_EXTERNAL),
    )
    p.add_argument(
        "--no-early-stop",
        dest="early_stop",
        action="store_false",
        default=_bool_env("EARLY_STOP", True),
        help="keep iterating even after the refinement stabilizes",
    )
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("update", parents=[common], help="apply a change batch")
    p.add_argument("dir")
    p.add_argument(
        "action",
        choices=["add-nodes", "add-edges", "del-edges", "del-nodes", "set-k"],
    )
    p.add_argument("arg", help="input file (or the new k for set-k)")
    p.add_argument(
        "--theta",
        type=float,
        default=float(_env("THETA", "0.5")),
        help="rebuild when a level's pending share of nodes exceeds this",
    )
    p.add_argument(
        "--no-early-stop",
        dest="early_stop",
        action="store_false",
        default=_bool_env("EARLY_STOP", True),
    )
    p.set_defaults(func=_cmd_update)

    p = sub.add_parser(
        "validate", help="check stored ids against in-memory reference oracles"
    )
    p.add_argument("dir")
    p.add_argument("--level", type=int, help="check one level instead of all")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("stats", help="print sizes and partition counts")
    p.add_argument("dir")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("generate", help="write synthetic benchmark graphs")
    gsub = p.add_subparsers(dest="family", required=True)
    g = gsub.add_parser("dbest", help="full tree; its held-out edge changes nothing")
    g.add_argument("--arity", type=int, default=2)
    g.add_argument("--height", type=int, required=True)
    g = gsub.add_parser("dworst", help="complete digraph; its held-out edge changes everything")
    g.add_argument("--n", type=int, required=True)
    g = gsub.add_parser("random", help="uniform random digraph")
    g.add_argument("--n", type=int, required=True, help="node count")
    g.add_argument("--edges-count", type=int, required=True)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--node-labels", type=int, default=4)
    g.add_argument("--edge-labels", type=int, default=3)
    for g in gsub.choices.values():
        g.add_argument("--nodes-out", required=True)
        g.add_argument("--edges-out", required=True)
        g.add_argument("--insert-out", help="write the held-out insertion edge here")
    p.set_defaults(func=_cmd_generate)

    return top


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (InputError, StateError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
