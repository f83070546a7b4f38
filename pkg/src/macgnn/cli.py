"""Command-line entry point: ``macgnn <command> [flags]``.

Commands exchange directories of plain files so every stage can be rerun
in isolation. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import DataError, DuplicateEdgeError, NumericError
from .features import GraphContext
from .grouping import Grouping, group_by_category, group_side, metadata_path, read_categories
from .macro_graph import EdgeDeltaStore, MacroSubgraph, accumulate_delta, apply_store, build_all_subgraphs, build_registry, merge
from .micro_graph import ITEM, USER, InteractionLog, MicroGraph, build_micro_graph, load_interactions, read_remap, write_remap
from .storage import atomic_dir, atomic_file, load_arrays, save_arrays
from .trainer import TrainConfig, evaluate, fit, parse_config, prepare, run_sweep, score

log = logging.getLogger("macgnn")

GRAPH_FILE = "graph.npz"
STATE_FILE = "state.npz"
ID_MAP = "id_map.csv"
SUBGRAPH_DIR = "subgraphs"
METRIC_FIELDS = ["epoch", "split", "auc", "gauc", "logloss"]


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- file helpers

def read_log(path: str) -> InteractionLog:
    try:
        with open(path, "rb") as fh:
            return load_interactions(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def log_arrays(log_: InteractionLog) -> dict:
    return {"log/users": log_.users, "log/items": log_.items, "log/labels": log_.labels, "log/timestamps": log_.timestamps}


def write_graph_dir(out: str, log_: InteractionLog, extra_arrays: dict | None = None, extra_meta: dict | None = None, name: str = GRAPH_FILE):
    graph = build_micro_graph(log_)
    arrays = log_arrays(log_)
    arrays.update({f"graph/{k}": v for k, v in graph.arrays().items()})
    arrays.update(extra_arrays or {})
    save_arrays(os.path.join(out, name), arrays, dict(extra_meta or {}, n=log_.n, m=log_.m))
    with open(os.path.join(out, ID_MAP), "w", newline="") as fh:
        write_remap(log_, fh)
    return graph


def read_graph_dir(path: str, name: str = GRAPH_FILE) -> tuple[InteractionLog, MicroGraph, dict, dict]:
    arrays, meta = load_arrays(os.path.join(path, name))
    try:
        with open(os.path.join(path, ID_MAP), newline="") as fh:
            user_ids, item_ids = read_remap(fh)
    except OSError as exc:
        raise DataError(f"cannot read id map in {path}: {exc}") from None
    try:
        log_ = InteractionLog(
            arrays["log/users"], arrays["log/items"], arrays["log/labels"], arrays["log/timestamps"],
            int(meta["n"]), int(meta["m"]), user_ids, item_ids,
        )
        graph = MicroGraph.from_arrays({k[len("graph/"):]: v for k, v in arrays.items() if k.startswith("graph/")})
    except KeyError as exc:
        raise DataError(f"{path}: missing member {exc}") from None
    if (graph.n, graph.m) != (len(user_ids), len(item_ids)):
        raise DataError(f"{path}: graph shape does not match the id map")
    return log_, graph, arrays, meta


def subgraph_path(root: str, side: str, idx: int) -> str:
    return os.path.join(root, SUBGRAPH_DIR, f"{side}_{idx}.json")


def write_subgraphs(out: str, subgraphs: dict) -> None:
    os.makedirs(os.path.join(out, SUBGRAPH_DIR), exist_ok=True)
    for side, items in subgraphs.items():
        for sg in items:
            with open(subgraph_path(out, side, sg.target[1]), "w", newline="") as fh:
                fh.write(sg.to_json())


def read_subgraph(root: str, side: str, idx: int) -> MacroSubgraph:
    path = subgraph_path(root, side, idx)
    try:
        with open(path) as fh:
            sg = MacroSubgraph.from_json(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if tuple(sg.target) != (side, idx):
        raise DataError(f"{path} holds the subgraph of {sg.target}")
    return sg


def fmt(value) -> str:
    return "" if value is None else repr(float(value)) if isinstance(value, float) else str(value)


def raw_index(ids: list[str]) -> dict[str, int]:
    return {r: k for k, r in enumerate(ids)}


def load_categories_for(cfg: TrainConfig, data_dir: str, log_: InteractionLog):
    if not cfg.item_categories:
        return None
    path = cfg.item_categories
    if not os.path.isabs(path):
        path = os.path.join(data_dir, path)
    if not os.path.exists(path):
        raise DataError(f"category file {path} not found")
    return read_categories(path, raw_index(log_.item_ids))


def load_config(path: str, sets: list[str], seed: int | None, threads: int) -> TrainConfig:
    overrides = {}
    for item in sets or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    if seed is not None:
        overrides["seed"] = str(seed)
    overrides["threads"] = str(threads)
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    try:
        return parse_config(lines, overrides)
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_build_graph(args) -> None:
    log_ = read_log(args.interactions)
    with atomic_dir(args.out) as tmp:
        graph = write_graph_dir(tmp, log_)
    print(f"{len(log_)} records, {log_.n} users, {log_.m} items, {graph.edge_count} edges -> {args.out}")


def cmd_group(args) -> None:
    if (args.k is None) == (args.by_category is None):
        raise UsageError("group: give exactly one of --k or --by-category")
    log_, graph, _, _ = read_graph_dir(args.graph)
    if args.by_category is not None:
        ids = log_.item_ids if args.side == ITEM else log_.user_ids
        grouping = group_by_category(graph, read_categories(args.by_category, raw_index(ids)), args.side)
    else:
        if args.k < 1:
            raise UsageError("group: --k must be at least 1")
        try:
            grouping = group_side(graph, args.side, args.k, seed=args.seed, n_init=args.n_init, max_iter=args.max_iter)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    with tempfile.TemporaryDirectory(prefix=".tmp-", dir=parent) as tmp:
        staged = os.path.join(tmp, os.path.basename(args.out))
        grouping.save(staged, side=args.side)
        os.replace(metadata_path(staged), metadata_path(args.out))
        os.replace(staged, args.out)
    print(f"{args.side}: K={grouping.K} objective={grouping.objective:.6f} iterations={grouping.iterations} -> {args.out}")


def _load_groupings(args, log_: InteractionLog) -> tuple[Grouping, Grouping]:
    ug, ig = Grouping.load(args.user_grouping), Grouping.load(args.item_grouping)
    if len(ug.assignments) != log_.n or len(ig.assignments) != log_.m:
        raise DataError("grouping sizes do not match the graph's node counts")
    return ug, ig


def grouping_state(ug: Grouping, ig: Grouping) -> tuple[dict, dict]:
    arrays = {"grouping/user": np.asarray(ug.assignments, dtype=np.int64), "grouping/item": np.asarray(ig.assignments, dtype=np.int64)}
    return arrays, {"K_user": ug.K, "K_item": ig.K}


def cmd_build_macro(args) -> None:
    log_, graph, _, _ = read_graph_dir(args.graph)
    ug, ig = _load_groupings(args, log_)
    registry = build_registry(ug, ig)
    subgraphs = {side: build_all_subgraphs(graph, registry, side) for side in (USER, ITEM)}
    arrays, meta = grouping_state(ug, ig)
    with atomic_dir(args.out) as tmp:
        write_graph_dir(tmp, log_, arrays, meta, name=STATE_FILE)
        write_subgraphs(tmp, subgraphs)
    print(f"{log_.n} user and {log_.m} item subgraphs over {registry.macro_count} macro nodes -> {args.out}")


def cmd_merge_deltas(args) -> None:
    stock_log, stock_graph, arrays, meta = read_graph_dir(args.stock, STATE_FILE)
    try:
        ug = Grouping(arrays["grouping/user"], int(meta["K_user"]), float("nan"))
        ig = Grouping(arrays["grouping/item"], int(meta["K_item"]), float("nan"))
    except KeyError as exc:
        raise DataError(f"{args.stock}: missing grouping state {exc}") from None
    registry = build_registry(ug, ig)
    delta_log = read_log(args.delta)
    uidx, iidx = raw_index(stock_log.user_ids), raw_index(stock_log.item_ids)
    try:
        users = np.array([uidx[r] for r in (delta_log.user_ids[u] for u in delta_log.users.tolist())], dtype=np.int64)
        items = np.array([iidx[r] for r in (delta_log.item_ids[i] for i in delta_log.items.tolist())], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"delta references id {exc} unknown to the stock snapshot") from None
    delta = InteractionLog(users, items, delta_log.labels, delta_log.timestamps, stock_log.n, stock_log.m, stock_log.user_ids, stock_log.item_ids)

    store = EdgeDeltaStore()
    skipped = 0
    for r in np.lexsort((np.arange(len(delta)), delta.timestamps)).tolist():
        rec = delta[r]
        if rec.label != 1:
            continue
        try:
            accumulate_delta(store, rec, stock_graph, registry)
        except DuplicateEdgeError:
            skipped += 1
    if skipped:
        log.info("skipped %d positive records whose edge already exists", skipped)

    merged_log = InteractionLog(
        np.concatenate([stock_log.users, delta.users]), np.concatenate([stock_log.items, delta.items]),
        np.concatenate([stock_log.labels, delta.labels]), np.concatenate([stock_log.timestamps, delta.timestamps]),
        stock_log.n, stock_log.m, stock_log.user_ids, stock_log.item_ids,
    )
    merged = {side: [] for side in (USER, ITEM)}
    for side, size in ((USER, stock_log.n), (ITEM, stock_log.m)):
        for v in range(size):
            merged[side].append(merge(read_subgraph(args.stock, side, v), store))
    if apply_store(stock_graph, store) != build_micro_graph(merged_log):
        raise DataError("merged micro graph disagrees with the merged log")
    g_arrays, g_meta = grouping_state(ug, ig)
    with atomic_dir(args.out) as tmp:
        write_graph_dir(tmp, merged_log, g_arrays, g_meta, name=STATE_FILE)
        write_subgraphs(tmp, merged)
    print(f"merged {len(store)} new edges into {len(store.targets())} targets -> {args.out}")


def _data_paths(data_dir: str) -> str:
    path = os.path.join(data_dir, "interactions.csv")
    if not os.path.exists(path):
        raise DataError(f"{data_dir} has no interactions.csv")
    return path


def write_metrics(path: str, curve: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in curve:
            w.writerow([fmt(row[k]) for k in METRIC_FIELDS])


def cmd_train(args) -> None:
    cfg = load_config(args.config, args.set, args.seed, args.threads)
    log_ = read_log(_data_paths(args.data))
    categories = load_categories_for(cfg, args.data, log_)
    try:
        data = prepare(log_, cfg, categories)
    except DataError:
        raise
    except ValueError as exc:  # e.g. more macro nodes than grouped nodes
        raise DataError(str(exc)) from None
    result = fit(cfg, data)
    reports = {"test": evaluate(result.params, result.config, data.test_set).summary()}
    if data.val_set is not None:
        reports["val"] = evaluate(result.params, result.config, data.val_set).summary()
    summary = {
        "best_epoch": result.best_epoch,
        "train_loss": result.train_losses,
        "reports": reports,
        "config": cfg.to_dict(),
        "records": {"fit": len(data.fit), "val": 0 if data.val is None else len(data.val), "test": len(data.test)},
        "test_cutoff": data.test_cutoff,
    }
    ckpt = Checkpoint(result.params, result.config, cfg, data.train_window, data.user_grouping, data.item_grouping, result.best_epoch)
    with atomic_dir(args.out) as tmp:
        save_checkpoint(os.path.join(tmp, "checkpoint.npz"), ckpt)
        write_metrics(os.path.join(tmp, "metrics.csv"), result.curve)
        data.user_grouping.save(os.path.join(tmp, "user_grouping.csv"), side=USER)
        data.item_grouping.save(os.path.join(tmp, "item_grouping.csv"), side=ITEM)
        with open(os.path.join(tmp, "summary.json"), "w") as fh:
            json.dump(summary, fh, sort_keys=True, indent=1)
            fh.write("\n")
    t = reports["test"]
    print(f"best epoch {result.best_epoch}: test auc={fmt(t['auc'])} gauc={fmt(t['gauc'])} logloss={t['logloss']:.6f} -> {args.out}")


def cmd_evaluate(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    log_ = read_log(_data_paths(args.data))
    if log_.user_ids != ckpt.history.user_ids or log_.item_ids != ckpt.history.item_ids:
        raise DataError("data does not index users and items the way the checkpoint does")
    data = prepare(log_, ckpt.train_config, groupings=(ckpt.user_grouping, ckpt.item_grouping))
    if not np.array_equal(data.train_window.timestamps, ckpt.history.timestamps):
        raise DataError("data's training window differs from the checkpoint's")
    report = evaluate(ckpt.params, ckpt.model_config, data.test_set).summary()
    print(json.dumps(report, sort_keys=True))


def read_pairs(path: str, user_index: dict, item_index: dict) -> tuple[list, list, np.ndarray, np.ndarray]:
    raw_users, raw_items = [], []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header[:2]] != ["user_id", "item_id"]:
                raise DataError(f"{path} line 1: expected header user_id,item_id")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) < 2:
                    raise DataError(f"{path} line {lineno}: expected at least 2 fields")
                u, i = row[0].strip(), row[1].strip()
                if u not in user_index:
                    raise DataError(f"{path} line {lineno}: unknown user {u!r}")
                if i not in item_index:
                    raise DataError(f"{path} line {lineno}: unknown item {i!r}")
                raw_users.append(u)
                raw_items.append(i)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    users = np.array([user_index[u] for u in raw_users], dtype=np.int64)
    items = np.array([item_index[i] for i in raw_items], dtype=np.int64)
    return raw_users, raw_items, users, items


def cmd_score(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    history = ckpt.history
    raw_u, raw_i, users, items = read_pairs(args.pairs, raw_index(history.user_ids), raw_index(history.item_ids))
    registry = build_registry(ckpt.user_grouping, ckpt.item_grouping)
    ctx = GraphContext(history, registry, ckpt.train_config.recent_len)
    after = int(history.timestamps.max()) + 1 if len(history) else 0
    examples = ctx.examples(users, items, None, np.full(len(users), after, dtype=np.int64))
    p = score(ckpt.params, ckpt.model_config, examples)

    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "score"])
        for u, i, s in zip(raw_u, raw_i, p.tolist()):
            w.writerow([u, i, repr(s)])

    if args.out:
        with atomic_file(args.out) as fh:
            emit(fh)
    else:
        emit(sys.stdout)


def cmd_sweep(args) -> None:
    cfg = load_config(args.config, args.set, args.seed, args.threads)
    log_ = read_log(_data_paths(args.data))
    categories = load_categories_for(cfg, args.data, log_)
    values = None
    if args.values:
        try:
            values = [float(v) if args.grid == "tau" else int(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"--values: cannot parse {args.values!r}") from None
    rows = run_sweep(cfg, log_, args.grid, values, categories)
    fields_ = ["value", "auc", "gauc", "logloss", "error"]
    with atomic_file(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([args.grid] + fields_[1:])
        for row in rows:
            w.writerow([fmt(row[k]) for k in fields_])
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} sweep points ({failed} failed) -> {args.out}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice (grouping init, parameter init, shuffling)")
    common.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads; 1 gives deterministic results (default 1)")
    common.add_argument("--verbose", action="store_true", help="log progress to stderr")

    parser = Parser(prog="macgnn", description="Macro recommendation graphs and the MacGNN CTR model.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("build-graph", parents=[common], help="parse an interaction log into a micro graph directory")
    p.add_argument("--interactions", required=True, help="CSV with header user_id,item_id,label,timestamp")
    p.add_argument("--out", required=True, help="output directory (graph.npz, id_map.csv)")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("group", parents=[common], help="group one side's nodes into macro nodes")
    p.add_argument("--graph", required=True, help="directory written by build-graph")
    p.add_argument("--side", required=True, choices=(USER, ITEM))
    p.add_argument("--k", type=int, help="number of macro nodes (k-means on behavior embeddings)")
    p.add_argument("--by-category", metavar="PATH", help="CSV node_id,category; one macro node per category")
    p.add_argument("--n-init", type=int, default=10, help="k-means restarts; the lowest objective wins (default 10)")
    p.add_argument("--max-iter", type=int, default=100, help="k-means iteration cap (default 100)")
    p.add_argument("--out", required=True, help="output CSV node_id,macro_index (metadata JSON written alongside)")
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("build-macro", parents=[common], help="materialize every node's macro subgraph")
    p.add_argument("--graph", required=True, help="directory written by build-graph")
    p.add_argument("--user-grouping", required=True, help="user grouping CSV")
    p.add_argument("--item-grouping", required=True, help="item grouping CSV")
    p.add_argument("--out", required=True, help="output directory (state.npz, id_map.csv, subgraphs/)")
    p.set_defaults(func=cmd_build_macro)

    p = sub.add_parser("merge-deltas", parents=[common], help="add new interactions to a stock macro snapshot")
    p.add_argument("--stock", required=True, help="directory written by build-macro or merge-deltas")
    p.add_argument("--delta", required=True, help="interaction CSV of new records (raw ids known to the stock snapshot)")
    p.add_argument("--out", required=True, help="output directory, same layout as the stock snapshot")
    p.set_defaults(func=cmd_merge_deltas)

    p = sub.add_parser("train", parents=[common], help="split, group, train and evaluate")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--data", required=True, help="directory with interactions.csv (and the item category file if configured)")
    p.add_argument("--out", required=True, help="output directory (checkpoint.npz, metrics.csv, summary.json, groupings)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; repeatable")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score the held-out test split with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="the data directory the checkpoint was trained on")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("score", parents=[common], help="score user,item pairs against the checkpoint's stock graph")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help="CSV with header user_id,item_id (raw ids)")
    p.add_argument("--out", help="output CSV user,item,score (default stdout)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", parents=[common], help="one training run per temperature or macro user count")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True, choices=("tau", "k"))
    p.add_argument("--values", help="comma-separated grid values (default: the standard grid)")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; repeatable")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 1
    if args.seed is None and args.command == "group":
        args.seed = 0
    try:
        with threadpool_limits(args.threads):
            args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
