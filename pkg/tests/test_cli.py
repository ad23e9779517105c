import csv
import json

import numpy as np
import pytest
import yaml

from gccpnav import cli
from gccpnav.config import load
from gccpnav.gccp import UNSAFE, compute_mask, debug_records
from gccpnav.predictor import Predictor
from gccpnav.trainer import Trainer

TINY = {"dim": 4, "heads": 2, "conv_channels": [2, 2, 2]}
TINY_CFG = {
    "max_steps": 40, "eval_flows": 2, "traffic": {"spawn_rate": 0.3},
    "schedule": {"episodes": 4, "planner_freeze": 2, "mask_start": 3, "predictor_batch": 4, "probe_size": 4,
                 "checkpoint_every": 2},
    "policy_net": TINY, "predictor_net": TINY,
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_CFG))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY_CFG))
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root / "run"


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def test_train_twice_gives_identical_metrics(cfg_file, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(cfg_file), "--episodes", "3", "--seed", "7",
                         "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_config_snapshot_reproduces_the_run(trained, tmp_path):
    snap = trained / "config.yaml"
    assert load(snap).policy_net.dim == 4
    assert cli.main(["train", "--config", str(snap), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()


def test_gccp_disabled_never_logs_a_mask(cfg_file, tmp_path):
    out = tmp_path / "off"
    assert cli.main(["train", "--config", str(cfg_file), "--gccp", "disabled", "--out", str(out)]) == 0
    rows = read_csv(out / "metrics.csv")
    assert all(r["mask_unsafe"] == "0" and r["mask_fallbacks"] == "0" for r in rows)
    assert cli.main(["trace", "--checkpoint", str(out / "checkpoints" / "final.ckpt"), "--out", str(out),
                     "--scenario", "go_straight", "--seed", "1"]) == 0
    assert all(v == 0.0 for r in read_jsonl(out / "trace.jsonl") if r["kind"] == "choice" for v in r["mask"])


def test_goal_conditioning_off_feeds_zero_embeddings(cfg_file, tmp_path, monkeypatch):
    seen = []
    orig = Predictor.goal_embedding

    def spy(self, goals, batch):
        out = orig(self, goals, batch)
        seen.append(out.data.copy())
        return out

    monkeypatch.setattr(Predictor, "goal_embedding", spy)
    assert cli.main(["train", "--config", str(cfg_file), "--goal-conditioning", "off",
                     "--out", str(tmp_path / "nog")]) == 0
    assert seen and all(not e.any() for e in seen)


def test_eval_summary_recomputes_from_records_and_is_deterministic(trained, tmp_path):
    ckpt = str(trained / "checkpoints" / "final.ckpt")
    for name in ("e1", "e2"):
        assert cli.main(["eval", "--checkpoint", ckpt, "--out", str(tmp_path / name)]) == 0
    for f in ("eval_summary.csv", "eval_episodes.csv"):
        assert (tmp_path / "e1" / f).read_bytes() == (tmp_path / "e2" / f).read_bytes()
    recs = read_csv(tmp_path / "e1" / "eval_episodes.csv")
    summary = {r["scenario"]: r for r in read_csv(tmp_path / "e1" / "eval_summary.csv")}
    assert len(recs) == 3 * 2
    for name in ("turn_left", "go_straight", "turn_right"):
        sel = [r for r in recs if r["scenario"] == name]
        assert float(summary[name]["success_pct"]) == round(100 * sum(int(r["success"]) for r in sel) / 2, 2)
        assert float(summary[name]["collision_pct"]) == round(100 * sum(int(r["collision"]) for r in sel) / 2, 2)
    n_coll = sum(int(r["collision"]) for r in recs)
    assert float(summary["overall"]["collision_pct"]) == round(100 * n_coll / 6, 2)


def test_empty_traffic_eval_has_no_collisions(trained, tmp_path):
    ckpt = str(trained / "checkpoints" / "final.ckpt")
    assert cli.main(["eval", "--checkpoint", ckpt, "--set", "traffic.spawn_rate=0.0",
                     "--out", str(tmp_path / "empty")]) == 0
    summary = read_csv(tmp_path / "empty" / "eval_summary.csv")
    assert all(float(r["collision_pct"]) == 0.0 for r in summary)


def test_trace_layout_and_mask_consistency(trained, tmp_path):
    ckpt = trained / "checkpoints" / "final.ckpt"
    args = ["trace", "--checkpoint", str(ckpt), "--scenario", "turn_left", "--seed", "5", "--set",
            "traffic.spawn_rate=0.6"]
    assert cli.main(args + ["--out", str(tmp_path / "t1")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "t2")]) == 0
    assert (tmp_path / "t1" / "trace.jsonl").read_bytes() == (tmp_path / "t2" / "trace.jsonl").read_bytes()
    assert (tmp_path / "t1" / "tracks.jsonl").read_bytes() == (tmp_path / "t2" / "tracks.jsonl").read_bytes()
    recs = read_jsonl(tmp_path / "t1" / "trace.jsonl")
    windows = sorted({r["window"] for r in recs})
    for w in windows:
        mine = [r for r in recs if r["window"] == w]
        assert len(mine) == 13
        subs = [r for r in mine if r["kind"] == "subgoal"]
        choice = next(r for r in mine if r["kind"] == "choice")
        assert [r["subgoal_index"] for r in subs] == list(range(12))
        assert [r["mask"] for r in subs] == choice["mask"]
        if any(v == 0.0 for v in choice["mask"]):
            assert choice["mask"][choice["choice"]] == 0.0
        assert len(choice["poses"]) == len(choice["actions"]) + 1


def test_trace_predictions_match_direct_gccp_output(trained, tmp_path):
    ckpt = trained / "checkpoints" / "final.ckpt"
    out = tmp_path / "t"
    assert cli.main(["trace", "--checkpoint", str(ckpt), "--scenario", "go_straight", "--seed", "2",
                     "--out", str(out)]) == 0
    dumped = [r for r in read_jsonl(out / "trace.jsonl") if r["kind"] == "subgoal"]
    tr = Trainer(load(trained / "config.yaml"))
    tr.load(ckpt)
    direct = []

    def grab(rec, world):
        mask = compute_mask(rec.state, rec.subgoals, tr.predictor, tr.cfg.gccp)
        direct.extend(debug_records(mask, rec.subgoals))

    sc = next(s for s in tr.scenarios if s.id == "go_straight")
    tr.run_episode(sc, 2, 0, learn=False, greedy=True, mask_active=True, on_window=grab)
    assert len(direct) == len(dumped)
    for a, b in zip(dumped, direct):
        assert a["ego_pred"] == b["ego_pred"]
        assert a["surrounding_pred"] == b["surrounding_pred"]
        assert a["mask"] == b["mask"]


def test_plot_renders_figures(trained, tmp_path):
    ckpt = trained / "checkpoints" / "final.ckpt"
    assert cli.main(["trace", "--checkpoint", str(ckpt), "--seed", "1", "--out", str(tmp_path)]) == 0
    assert cli.main(["plot", str(tmp_path)]) == 0
    assert (tmp_path / "trace.png").stat().st_size > 0
    assert cli.main(["plot", str(trained), "--out", str(tmp_path / "fig"), "--window", "2"]) == 0
    assert (tmp_path / "fig" / "training.png").stat().st_size > 0
    rows = read_csv(tmp_path / "fig" / "curves.csv")
    assert len(rows) == 4


@pytest.mark.parametrize("argv, needle", [
    (["eval", "--checkpoint", "missing.ckpt"], "checkpoint not found"),
    (["trace", "--checkpoint", "missing.ckpt"], "checkpoint not found"),
    (["eval"], "--checkpoint is required"),
    (["train", "--set", "schedule.bogus=1"], "unknown config keys: schedule.bogus"),
    (["train", "--set", "planner=1", "--set", "zeta=2"], "unknown config keys: planner, zeta"),
    (["train", "--config", "nowhere.yaml"], "config file not found"),
])
def test_errors_exit_nonzero_with_one_line(argv, needle, tmp_path, capsys):
    assert cli.main(argv + ["--out", str(tmp_path / "o")]) != 0
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("error: ")
    assert needle in err


def test_plot_with_nothing_to_plot_fails(tmp_path, capsys):
    assert cli.main(["plot", str(tmp_path)]) != 0
    assert "nothing to plot" in capsys.readouterr().err
