import csv
import filecmp
import json
import os

import numpy as np
import pytest

from macgnn.cli import main
from macgnn.grouping import Grouping
from macgnn.macro_graph import MacroSubgraph, build_all_subgraphs, build_registry
from macgnn.storage import load_arrays
from conftest import random_log

CONFIG = """\
# small toy run
off_grid = true
batch_size = 32
epochs = 2
dim = 4
attn_dim = 4
hidden = 8
k_user = 3
k_item = 3
group_n_init = 2
"""


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "label", "timestamp"])
        w.writerows(rows)


def toy_rows(seed=0, n=30, m=25):
    log = random_log(np.random.default_rng(seed), n, m, 0.3, tmax=400)
    order = np.lexsort((np.arange(len(log)), log.timestamps))
    return [(f"u{log.users[r]}", f"i{log.items[r]}", int(log.labels[r]), int(log.timestamps[r])) for r in order]


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(tree_equal(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


@pytest.fixture
def toy(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    write_log(data / "interactions.csv", toy_rows())
    (tmp_path / "cfg.txt").write_text(CONFIG)
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def test_help_for_every_command(capsys):
    assert run("--help") == 0
    for cmd in ("build-graph", "group", "build-macro", "merge-deltas", "train", "evaluate", "score", "sweep"):
        assert run(cmd, "--help") == 0
        out = capsys.readouterr().out
        assert "--seed" in out and "--threads" in out


def test_usage_errors(toy):
    assert run("build-graph", "--interactions", toy / "data/interactions.csv", "--out", toy / "g", "--bogus") == 1
    assert run("frobnicate") == 1
    assert run("build-graph", "--out", toy / "g") == 1
    assert not (toy / "g").exists()


def test_build_graph_three_lines(tmp_path):
    write_log(tmp_path / "log.csv", [("a", "x", 1, 10), ("b", "x", 0, 11), ("a", "y", 1, 12)])
    assert run("build-graph", "--interactions", tmp_path / "log.csv", "--out", tmp_path / "g1") == 0
    assert sorted(os.listdir(tmp_path / "g1")) == ["graph.npz", "id_map.csv"]
    assert run("build-graph", "--interactions", tmp_path / "log.csv", "--out", tmp_path / "g2") == 0
    assert tree_equal(tmp_path / "g1", tmp_path / "g2")
    arrays, meta = load_arrays(str(tmp_path / "g1/graph.npz"))
    assert (meta["n"], meta["m"]) == (2, 2) and arrays["log/labels"].tolist() == [1, 0, 1]


def test_build_graph_bad_input(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("a,x,1,10\n")
    assert run("build-graph", "--interactions", tmp_path / "bad.csv", "--out", tmp_path / "g") == 2
    assert "line 1" in capsys.readouterr().err
    (tmp_path / "bad2.csv").write_text("user_id,item_id,label,timestamp\na,x,1,10\nb,y,7,3\n")
    assert run("build-graph", "--interactions", tmp_path / "bad2.csv", "--out", tmp_path / "g") == 2
    assert "line 3" in capsys.readouterr().err
    assert not (tmp_path / "g").exists()
    assert run("build-graph", "--interactions", tmp_path / "missing.csv", "--out", tmp_path / "g") == 2
    assert [p for p in os.listdir(tmp_path) if p.startswith(".tmp")] == []


def build_stages(root, log_path, tag, seed=0):
    g, ug, ig, mac = (root / f"{tag}-{x}" for x in ("graph", "ug.csv", "ig.csv", "macro"))
    assert run("build-graph", "--interactions", log_path, "--out", g) == 0
    assert run("group", "--graph", g, "--side", "user", "--k", 3, "--seed", seed, "--out", ug) == 0
    assert run("group", "--graph", g, "--side", "item", "--k", 3, "--seed", seed + 1, "--out", ig) == 0
    assert run("build-macro", "--graph", g, "--user-grouping", ug, "--item-grouping", ig, "--out", mac) == 0
    return g, ug, ig, mac


def test_group_command(toy):
    g, ug, ig, _ = build_stages(toy, toy / "data/interactions.csv", "a")
    grouping = Grouping.load(str(ug))
    assert grouping.K == 3 and grouping.assignments.min() >= 0 and grouping.assignments.max() <= 3
    meta = json.loads((toy / "a-ug.json").read_text())
    assert meta["K"] == 3 and meta["seed"] == 0 and meta["side"] == "user"
    assert run("group", "--graph", g, "--side", "user", "--k", 3, "--seed", 0, "--out", toy / "again.csv") == 0
    assert (toy / "again.csv").read_bytes() == ug.read_bytes()
    assert run("group", "--graph", g, "--side", "user", "--out", toy / "x.csv") == 1
    assert run("group", "--graph", g, "--side", "user", "--k", 999, "--out", toy / "x.csv") == 2
    assert not (toy / "x.csv").exists()


def test_group_by_category(toy):
    g = toy / "g"
    assert run("build-graph", "--interactions", toy / "data/interactions.csv", "--out", g) == 0
    with open(toy / "cats.csv", "w") as fh:
        fh.write("item_id,category\n")
        for k in range(25):
            fh.write(f"i{k},{'abc'[k % 3]}\n")
    assert run("group", "--graph", g, "--side", "item", "--by-category", toy / "cats.csv", "--out", toy / "ig.csv") == 0
    grouping = Grouping.load(str(toy / "ig.csv"))
    assert grouping.K == 3 and grouping.mode == "category"


def test_build_macro_matches_api(toy):
    g, ug, ig, mac = build_stages(toy, toy / "data/interactions.csv", "a")
    from macgnn.cli import read_graph_dir

    log_, graph, _, _ = read_graph_dir(str(g))
    reg = build_registry(Grouping.load(str(ug)), Grouping.load(str(ig)))
    files = os.listdir(mac / "subgraphs")
    assert len(files) == log_.n + log_.m
    for side in ("user", "item"):
        for sg in build_all_subgraphs(graph, reg, side):
            text = (mac / "subgraphs" / f"{side}_{sg.target[1]}.json").read_text()
            assert text == sg.to_json()
            assert MacroSubgraph.from_json(text) == sg


def test_isolated_node_gets_empty_subgraph(tmp_path):
    write_log(tmp_path / "log.csv", [("a", "x", 1, 1), ("b", "y", 0, 2)])
    g = tmp_path / "g"
    assert run("build-graph", "--interactions", tmp_path / "log.csv", "--out", g) == 0
    assert run("group", "--graph", g, "--side", "user", "--k", 1, "--out", tmp_path / "ug.csv") == 0
    assert run("group", "--graph", g, "--side", "item", "--k", 1, "--out", tmp_path / "ig.csv") == 0
    assert run("build-macro", "--graph", g, "--user-grouping", tmp_path / "ug.csv", "--item-grouping", tmp_path / "ig.csv", "--out", tmp_path / "m") == 0
    sg = json.loads((tmp_path / "m/subgraphs/user_1.json").read_text())
    assert sg == {"target": ["user", 1], "hop1": {}, "hop2": []}


def test_merge_deltas(toy):
    rows = toy_rows(1)
    cut = int(len(rows) * 0.6)
    # keep every id present in the stock part so the dense indices agree
    seen_u = {r[0] for r in rows[:cut]}
    seen_i = {r[1] for r in rows[:cut]}
    tail = [r for r in rows[cut:] if r[0] in seen_u and r[1] in seen_i]
    write_log(toy / "stock.csv", rows[:cut])
    write_log(toy / "delta.csv", tail)
    write_log(toy / "full.csv", rows[:cut] + tail)
    write_log(toy / "empty.csv", [])

    _, ug, ig, stock = build_stages(toy, toy / "stock.csv", "s")
    g_full = toy / "full-graph"
    assert run("build-graph", "--interactions", toy / "full.csv", "--out", g_full) == 0
    assert run("build-macro", "--graph", g_full, "--user-grouping", ug, "--item-grouping", ig, "--out", toy / "full-macro") == 0

    assert run("merge-deltas", "--stock", stock, "--delta", toy / "delta.csv", "--out", toy / "merged") == 0
    assert tree_equal(toy / "merged", toy / "full-macro")

    assert run("merge-deltas", "--stock", stock, "--delta", toy / "empty.csv", "--out", toy / "same") == 0
    assert tree_equal(toy / "same", stock)

    # replaying the same delta again only meets existing edges
    assert run("merge-deltas", "--stock", toy / "merged", "--delta", toy / "delta.csv", "--out", toy / "twice") == 0
    assert filecmp.dircmp(toy / "twice/subgraphs", toy / "merged/subgraphs").diff_files == []

    (toy / "bad.csv").write_text("user_id,item_id,label,timestamp\nu1,i1,1,9\nu1,i2,oops,9\n")
    assert run("merge-deltas", "--stock", stock, "--delta", toy / "bad.csv", "--out", toy / "broken") == 2
    write_log(toy / "unknown.csv", [("nobody", "i1", 1, 999)])
    assert run("merge-deltas", "--stock", stock, "--delta", toy / "unknown.csv", "--out", toy / "broken") == 2
    assert not (toy / "broken").exists()


def test_train_evaluate_score(toy, capsys):
    out = toy / "run"
    assert run("train", "--config", toy / "cfg.txt", "--data", toy / "data", "--out", out, "--seed", 3) == 0
    assert sorted(os.listdir(out)) == [
        "checkpoint.npz", "item_grouping.csv", "item_grouping.json", "metrics.csv",
        "summary.json", "user_grouping.csv", "user_grouping.json",
    ]
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,auc,gauc,logloss" and len(lines) == 1 + 2 * 3
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["seed"] == 3 and 1 <= summary["best_epoch"] <= 2
    capsys.readouterr()

    assert run("evaluate", "--checkpoint", out / "checkpoint.npz", "--data", toy / "data") == 0
    report = json.loads(capsys.readouterr().out)
    assert report == summary["reports"]["test"]

    with open(toy / "pairs.csv", "w") as fh:
        fh.write("user_id,item_id\nu0,i1\nu5,i3\nu2,i2\n")
    assert run("score", "--checkpoint", out / "checkpoint.npz", "--pairs", toy / "pairs.csv", "--out", toy / "scores.csv") == 0
    rows = list(csv.reader(open(toy / "scores.csv")))
    assert rows[0] == ["user", "item", "score"] and [r[:2] for r in rows[1:]] == [["u0", "i1"], ["u5", "i3"], ["u2", "i2"]]
    assert all(0.0 < float(r[2]) < 1.0 for r in rows[1:])

    with open(toy / "pairs_bad.csv", "w") as fh:
        fh.write("user_id,item_id\nghost,i1\n")
    assert run("score", "--checkpoint", out / "checkpoint.npz", "--pairs", toy / "pairs_bad.csv", "--out", toy / "s2.csv") == 2
    assert not (toy / "s2.csv").exists()


def test_train_reruns_are_byte_identical(toy):
    assert run("train", "--config", toy / "cfg.txt", "--data", toy / "data", "--out", toy / "r1") == 0
    assert run("train", "--config", toy / "cfg.txt", "--data", toy / "data", "--out", toy / "r2") == 0
    assert tree_equal(toy / "r1", toy / "r2")


def test_train_config_errors(toy):
    (toy / "bad.txt").write_text("lr = 0.5\n")
    assert run("train", "--config", toy / "bad.txt", "--data", toy / "data", "--out", toy / "r") == 1
    assert run("train", "--config", toy / "cfg.txt", "--data", toy / "data", "--out", toy / "r", "--set", "nonsense=1") == 1
    assert run("train", "--config", toy / "cfg.txt", "--data", toy / "nowhere", "--out", toy / "r") == 2
    assert not (toy / "r").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_failure(toy, capsys):
    code = run("train", "--config", toy / "cfg.txt", "--data", toy / "data", "--out", toy / "r", "--set", "lr=1e300", "--set", "epochs=3")
    assert code == 3
    assert "non-finite loss" in capsys.readouterr().err
    assert not (toy / "r").exists()


def test_sweep_command(toy):
    assert run("sweep", "--config", toy / "cfg.txt", "--data", toy / "data", "--grid", "tau", "--values", "0.5,1.5", "--set", "epochs=1", "--out", toy / "tau.csv") == 0
    rows = list(csv.DictReader(open(toy / "tau.csv")))
    assert [r["tau"] for r in rows] == ["0.5", "1.5"] and all(r["error"] == "" for r in rows)
    assert run("sweep", "--config", toy / "cfg.txt", "--data", toy / "data", "--grid", "lr", "--out", toy / "x.csv") == 1


def test_checkpoint_rejects_shape_mismatch(toy):
    from macgnn.checkpoint import load_checkpoint, save_checkpoint
    from macgnn.errors import DataError

    out = toy / "run"
    assert run("train", "--config", toy / "cfg.txt", "--data", toy / "data", "--out", out) == 0
    ckpt = load_checkpoint(str(out / "checkpoint.npz"))
    ckpt.params["W1"] = ckpt.params["W1"][:, :3]
    save_checkpoint(str(toy / "broken.npz"), ckpt)
    with pytest.raises(DataError, match="W1"):
        load_checkpoint(str(toy / "broken.npz"))
    assert run("evaluate", "--checkpoint", toy / "broken.npz", "--data", toy / "data") == 2
