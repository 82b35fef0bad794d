import json
import shutil

import numpy as np
import pytest

from geoflow import checkpoint, exports
from geoflow.cli import main

TINY = {"world": {"d": 32, "n_patch": 4}, "model": {"L_d": 1, "L_s": 1, "n_heads": 2},
        "train": {"steps_stage1": 3, "steps_stage2": 2, "n_episodes": 3, "episode_frames": 8,
                  "partial_steps": 3},
        "rollout": {"horizon": 3, "steps": 3}}


def run(*argv):
    return main([str(a) for a in argv])


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert run("gen", "--config", cfg, "--episodes", 2, "--frames", 8, "--out", root / "data") == 0
    assert run("train", "--config", cfg, "--dataset", root / "data", "--out", root / "s1.bin") == 0
    return root, cfg


def test_gen_layout_and_determinism(work, tmp_path):
    root, cfg = work
    assert run("gen", "--config", cfg, "--episodes", 1, "--frames", 8, "--out", tmp_path / "a") == 0
    assert run("gen", "--config", cfg, "--episodes", 1, "--frames", 8, "--out", tmp_path / "b") == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seeds"] == [0] and len(man["episodes"]) == 1
    assert [p.name for p in (tmp_path / "a").iterdir() if p.is_dir()] == ["episode_0000"]
    assert files(tmp_path / "a") == files(tmp_path / "b")
    ep = tmp_path / "a" / "episode_0000"
    for name in ("states.bin", "depth.csv", "points.xyz", "poses.csv", "manifest.json"):
        assert (ep / name).is_file()
    assert b"config_hash" in (ep / "depth.csv").read_bytes()
    assert b"# frame 0" in (ep / "points.xyz").read_bytes()


def test_gen_rejects_single_frame(work, tmp_path, capsys):
    root, cfg = work
    assert run("gen", "--config", cfg, "--frames", 1, "--out", tmp_path / "x") == 2
    assert "frames" in capsys.readouterr().err


def test_train_deterministic_and_logs(work, tmp_path):
    root, cfg = work
    assert run("train", "--config", cfg, "--dataset", root / "data", "--out", tmp_path / "again.bin") == 0
    assert (tmp_path / "again.bin").read_bytes() == (root / "s1.bin").read_bytes()
    head, cols, rows = exports.read_csv(root / "train_log.csv")
    assert cols[:5] == ["step", "stage", "lambda", "tau_mean", "loss"] and len(rows) == 3
    assert "config_hash" in head


def test_train_zero_steps_and_stage2_precondition(work, tmp_path, capsys):
    root, cfg = work
    assert run("train", "--config", cfg, "--steps", 0, "--out", tmp_path / "init.bin") == 0
    ck = checkpoint.load(tmp_path / "init.bin")
    assert ck.config["step"] == 0
    assert exports.read_csv(tmp_path / "train_log.csv")[2] == []
    assert run("train", "--config", cfg, "--stage", 2, "--out", tmp_path / "s2.bin") == 2
    assert "--resume" in capsys.readouterr().err


def test_train_stage2_and_periodic_checkpoints(work, tmp_path):
    root, cfg = work
    assert run("train", "--config", cfg, "--stage", 2, "--resume", root / "s1.bin", "--dataset",
               root / "data", "--ckpt-every", 1, "--out", tmp_path / "s2.bin") == 0
    assert (tmp_path / "s2.step000002.bin").is_file()
    rows = exports.read_csv(tmp_path / "train_log.csv")[2]
    assert [float(r[2]) for r in rows] == [0.0, 1.0]


def test_global_seed_changes_training(work, tmp_path):
    root, cfg = work
    assert run("--seed", 5, "train", "--config", cfg, "--out", tmp_path / "a.bin") == 0
    assert run("--seed", 5, "train", "--config", cfg, "--out", tmp_path / "b.bin") == 0
    assert run("--seed", 6, "train", "--config", cfg, "--out", tmp_path / "c.bin") == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.bin").read_bytes() != (tmp_path / "c.bin").read_bytes()


def test_rollout_outputs_deterministic(work, tmp_path):
    root, _ = work
    args = ("rollout", "--ckpt", root / "s1.bin", "--dataset", root / "data", "--start", 1)
    assert run(*args, "--out", tmp_path / "r1") == 0
    assert run(*args, "--out", tmp_path / "r2") == 0
    assert files(tmp_path / "r1") == files(tmp_path / "r2")
    info = json.loads((tmp_path / "r1" / "rollout.json").read_text())
    assert info["windows"] == [[1, 2], [2, 3], [3, 4]] and info["predicted_frames"] == [3, 4, 5]
    assert len(exports.read_states(tmp_path / "r1" / "predicted_latents.bin")) == 3


def test_rollout_horizon_zero_decodes_context(work, tmp_path):
    root, _ = work
    assert run("rollout", "--ckpt", root / "s1.bin", "--dataset", root / "data", "--horizon", 0,
               "--out", tmp_path / "r0") == 0
    geo = exports.read_geometry(tmp_path / "r0")
    assert list(geo.frames) == [0, 1]


def test_rollout_dimension_mismatch(work, tmp_path, capsys):
    root, _ = work
    other = dict(TINY, world={"d": 24, "n_patch": 4})
    cfg = tmp_path / "other.json"
    cfg.write_text(json.dumps(other))
    assert run("gen", "--config", cfg, "--frames", 6, "--out", tmp_path / "d24") == 0
    assert run("rollout", "--ckpt", root / "s1.bin", "--dataset", tmp_path / "d24", "--out",
               tmp_path / "r") == 2
    err = capsys.readouterr().err
    assert "model.d_model" in err and "world.d" in err


def test_rollout_bad_context(work, tmp_path):
    root, _ = work
    assert run("rollout", "--ckpt", root / "s1.bin", "--dataset", root / "data", "--context", 3,
               "--out", tmp_path / "r") == 2
    assert run("rollout", "--ckpt", root / "missing.bin", "--dataset", root / "data",
               "--out", tmp_path / "r") == 4


def test_eval_identical_dirs(work, tmp_path):
    root, _ = work
    ep = root / "data" / "episode_0000"
    assert run("eval", "--pred", ep, "--gt", ep, "--out", tmp_path / "m.json") == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert "header" in m and "unsquared" in m["header"]["chamfer"]
    met = m["metrics"]
    assert met["depth"]["all"] == {"absrel": 0.0, "delta1": 1.0}
    assert max(met["points"]["all"].values()) <= 1e-9
    assert max(met["traj"]["all"].values()) <= 1e-9


def test_eval_scaled_depth_corpus(work, tmp_path):
    root, _ = work
    gt_dir = root / "data" / "episode_0000"
    geo = exports.read_geometry(gt_dir)
    pred = exports.GeometryExport(geo.frames, 1.2 * geo.depths, geo.points, geo.rotations, geo.translations)
    exports.write_geometry(tmp_path / "pred", {"config_hash": "x"}, pred)
    shutil.copy(gt_dir / "states.bin", tmp_path / "pred" / "states.bin")
    shutil.copy(gt_dir / "manifest.json", tmp_path / "pred" / "manifest.json")
    assert run("eval", "--pred", tmp_path / "pred", "--gt", gt_dir, "--suite", "depth") == 0
    m = json.loads((tmp_path / "pred" / "metrics.json").read_text())["metrics"]["depth"]["all"]
    assert m["absrel"] == pytest.approx(0.2, abs=1e-9) and m["delta1"] == 1.0


def test_eval_traj_needs_two_poses(work, tmp_path):
    root, cfg = work
    assert run("rollout", "--ckpt", root / "s1.bin", "--dataset", root / "data", "--horizon", 0,
               "--out", tmp_path / "r0") == 0
    geo = exports.read_geometry(tmp_path / "r0")
    one = exports.GeometryExport(geo.frames[:1], geo.depths[:1], geo.points[:1], geo.rotations[:1],
                                 geo.translations[:1])
    exports.write_geometry(tmp_path / "one", {}, one)
    shutil.copy(tmp_path / "r0" / "states.bin", tmp_path / "one" / "states.bin")
    shutil.copy(tmp_path / "r0" / "manifest.json", tmp_path / "one" / "manifest.json")
    assert run("eval", "--pred", tmp_path / "one", "--gt", root / "data" / "episode_0000",
               "--suite", "traj") == 2


def test_snr_zero_iters_and_matched_batches(work, tmp_path):
    root, cfg = work
    assert run("snr", "--config", cfg, "--dims", "16", "--iters", 0, "--out", tmp_path / "s") == 0
    head, cols, rows = exports.read_csv(tmp_path / "s" / "snr_curve.csv")
    assert cols == ["iteration", "parameterization", "dim", "snr_db"]
    assert sorted((r[0], r[1]) for r in rows) == [("0", "v"), ("0", "z")]
    assert run("snr", "--config", cfg, "--dims", "16", "--iters", 2, "--log-every", 1,
               "--out", tmp_path / "t") == 0
    h = json.loads((tmp_path / "t" / "batch_hashes.json").read_text())["hashes"]
    assert h["z/16"] == h["v/16"]


def test_gradcheck_probes_zero_and_corrupt_checkpoint(work, tmp_path, capsys):
    root, cfg = work
    assert run("gradcheck", "--config", cfg, "--probes", 0) == 0
    assert "empty report" in capsys.readouterr().out
    data = bytearray((root / "s1.bin").read_bytes())
    data[100] ^= 0x55
    (tmp_path / "bad.bin").write_bytes(bytes(data))
    assert run("gradcheck", "--config", cfg, "--ckpt", tmp_path / "bad.bin") != 0
    assert "CRC" in capsys.readouterr().err


def test_gradcheck_tiny_config_passes(work, tmp_path):
    root, cfg = work
    assert run("gradcheck", "--config", cfg, "--probes", 40, "--out", tmp_path / "g.json") == 0
    rep = json.loads((tmp_path / "g.json").read_text())["report"]
    assert rep["max_rel_error"] <= 1e-4 and rep["probes"] == 40


def test_missing_config_is_io_error(tmp_path):
    assert run("gen", "--config", tmp_path / "nope.json", "--out", tmp_path / "x") == 4


def test_invalid_config_is_validation_error(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"model": {"depth": 2}}))
    assert run("gen", "--config", cfg, "--out", tmp_path / "x") == 2


def test_gen_points_file_parses(work):
    root, _ = work
    geo = exports.read_geometry(root / "data" / "episode_0001")
    assert geo.points.shape == (8, 4, 3) and np.all(geo.depths > 0)
