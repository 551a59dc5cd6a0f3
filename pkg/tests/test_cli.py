import json

import numpy as np
import pytest

from cfvo import cli
from cfvo.config import ConfigError, config_hash, load_config, merge_config


FAST_CONFIG = {
    "seed": 5,
    "synth": {"width": 96, "height": 32, "fx": 64.0, "fy": 64.0,
              "cx": 47.5, "cy": 15.5, "frames": 7,
              "pretrained_scale": 12.0, "pretrained_noise": 0.04},
    "train": {"stage1_lr": 0.005, "stage2_lr": 0.001, "stage1_epochs": 8,
              "min_stage1_epochs": 3, "total_epochs": 12,
              "sequences_per_epoch": 10},
}


@pytest.fixture()
def fast_cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(FAST_CONFIG))
    return path


def run(args):
    return cli.main([str(a) for a in args])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in ("synth", "calibrate", "train", "eval", "render", "gradcheck"):
        assert name in out


def test_config_merge_and_strictness():
    merged = merge_config({"train": {"stage1_lr": 0.01}})
    assert merged["train"]["stage1_lr"] == 0.01
    assert merged["train"]["stage2_lr"] == 1e-5  # default retained
    with pytest.raises(ConfigError):
        merge_config({"train": {"warp_speed": 9}})
    with pytest.raises(ConfigError):
        merge_config({"bogus_section": {}})
    with pytest.raises(ConfigError):
        merge_config({"seed": "zero"})


def test_config_hash_stable_across_key_order():
    a = merge_config({"train": {"stage1_lr": 0.01, "total_epochs": 9}})
    b = merge_config({"train": {"total_epochs": 9, "stage1_lr": 0.01}})
    assert config_hash(a) == config_hash(b)
    c = merge_config({"train": {"stage1_lr": 0.02}})
    assert config_hash(a) != config_hash(c)


def test_invalid_config_file_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"no_such_key": 1}')
    code = run(["synth", "--config", bad, "--out", tmp_path / "ds"])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"]["kind"] == "config"


def test_missing_data_dir_exits_3(tmp_path, capsys):
    code = run(["calibrate", "--data", tmp_path / "nope"])
    assert code == 3
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"]["kind"] == "data"


def test_divergence_maps_to_exit_4(tmp_path, fast_cfg, monkeypatch, capsys):
    from cfvo.trainer import DivergenceError

    assert run(["synth", "--config", fast_cfg, "--out", tmp_path / "ds"]) == 0

    def explode(*a, **k):
        raise DivergenceError("loss exploded", [1.0, 100.0])

    monkeypatch.setattr(cli, "run_stage1", explode)
    code = run(["train", "--config", fast_cfg, "--data", tmp_path / "ds",
                "--stage", "1", "--out", tmp_path / "out"])
    assert code == 4
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"]["kind"] == "divergence"


def test_synth_then_calibrate_recovers_pretrained_scale(tmp_path, fast_cfg):
    ds = tmp_path / "ds"
    assert run(["synth", "--config", fast_cfg, "--out", ds]) == 0
    out = tmp_path / "eps.json"
    assert run(["calibrate", "--config", fast_cfg, "--data", ds,
                "--out", out]) == 0
    doc = json.loads(out.read_text())
    eps = [f["epsilon"] for f in doc["frames"]]
    assert np.abs(np.array(eps) / 12.0 - 1.0).max() < 0.05
    assert doc["aggregate"]["mu"] == pytest.approx(np.mean(eps))
    assert all(f["n_valid"] >= 50 for f in doc["frames"])
    assert "config_hash" in doc and "seed" in doc


def test_full_cli_pipeline_and_reproducibility(tmp_path, fast_cfg):
    # synth -> train 1 -> train 2 -> eval, then everything again:
    # every artifact must be byte-identical across the two runs
    results = []
    for tag in ("a", "b"):
        root = tmp_path / tag
        ds, out, ev = root / "ds", root / "out", root / "ev"
        assert run(["synth", "--config", fast_cfg, "--out", ds]) == 0
        assert run(["train", "--config", fast_cfg, "--data", ds,
                    "--stage", "1", "--out", out]) == 0
        assert run(["train", "--config", fast_cfg, "--data", ds,
                    "--stage", "2", "--out", out]) == 0
        assert run(["eval", "--config", fast_cfg,
                    "--gt", ds / "poses.txt",
                    "--est", out / "poses_stage2.txt",
                    "--depth-dir", out / "depth_stage2",
                    "--depth-gt-dir", ds / "depth_gt",
                    "--out", ev]) == 0
        results.append(tree_bytes(root))
    assert results[0].keys() == results[1].keys()
    for name in results[0]:
        assert results[0][name] == results[1][name], f"{name} differs"


def test_train_single_mode_requires_mode_flag(tmp_path, fast_cfg, capsys):
    ds = tmp_path / "ds"
    assert run(["synth", "--config", fast_cfg, "--out", ds]) == 0
    code = run(["train", "--config", fast_cfg, "--data", ds,
                "--stage", "single", "--out", tmp_path / "out"])
    assert code == 2


def test_train_single_no_supervision(tmp_path, fast_cfg):
    ds = tmp_path / "ds"
    out = tmp_path / "out"
    assert run(["synth", "--config", fast_cfg, "--out", ds]) == 0
    assert run(["train", "--config", fast_cfg, "--data", ds, "--stage",
                "single", "--mode", "no_supervision", "--out", out]) == 0
    doc = json.loads((out / "single_no_supervision.json").read_text())
    assert doc["stage"] == 2
    assert (out / "poses_single_no_supervision.txt").exists()


def test_eval_report_structure(tmp_path, fast_cfg):
    ds = tmp_path / "ds"
    out = tmp_path / "out"
    ev = tmp_path / "ev"
    assert run(["synth", "--config", fast_cfg, "--out", ds]) == 0
    assert run(["train", "--config", fast_cfg, "--data", ds,
                "--stage", "1", "--out", out]) == 0
    assert run(["eval", "--config", fast_cfg, "--gt", ds / "poses.txt",
                "--est", out / "poses_stage1.txt", "--out", ev]) == 0
    doc = json.loads((ev / "report.json").read_text())
    assert set(doc) == {"pose", "depth", "scale", "config"}
    assert set(doc["pose"]) == {"t_rel_percent", "r_rel_deg_per_100m",
                                "ate_rmse_m"}
    assert doc["pose"]["ate_rmse_m"] >= 0.0
    assert (ev / "trajectory.csv").exists()
    assert (ev / "trajectory.svg").exists()


def test_render_outputs(tmp_path, fast_cfg):
    ds = tmp_path / "ds"
    out = tmp_path / "out"
    rd = tmp_path / "render"
    assert run(["synth", "--config", fast_cfg, "--out", ds]) == 0
    assert run(["train", "--config", fast_cfg, "--data", ds,
                "--stage", "1", "--out", out]) == 0
    assert run(["render", "--config", fast_cfg, "--data", ds,
                "--checkpoint", out / "stage1.json", "--frame", "1",
                "--out", rd]) == 0
    for stem in ("depth_000001.pgm", "warp_000001.pgm", "mask_000001.pgm",
                 "residual_000001.pgm", "render_000001.json"):
        assert (rd / stem).exists()
    meta = json.loads((rd / "render_000001.json").read_text())
    assert meta["valid_fraction"] > 0.5


def test_render_frame_out_of_range(tmp_path, fast_cfg):
    ds = tmp_path / "ds"
    assert run(["synth", "--config", fast_cfg, "--out", ds]) == 0
    code = run(["render", "--config", fast_cfg, "--data", ds,
                "--frame", "99", "--out", tmp_path / "r"])
    assert code == 2


def test_gradcheck_cli_reproducible(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run(["gradcheck", "--seed", "3", "--size", "16", "--out", a]) == 0
    assert run(["gradcheck", "--seed", "3", "--size", "16", "--out", b]) == 0
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert doc["pass"] is True
    assert set(doc["reports"]) == {"photometric", "gc", "smoothness",
                                   "forward", "backward", "refine"}


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {"stage1_lr": 0.42}}))
    cfg = load_config(path)
    assert cfg["train"]["stage1_lr"] == 0.42
    bad = tmp_path / "bad.json"
    bad.write_text("not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_stage1_resume_cli(tmp_path, fast_cfg):
    ds = tmp_path / "ds"
    assert run(["synth", "--config", fast_cfg, "--out", ds]) == 0

    # straight run on one config
    out_a = tmp_path / "a"
    assert run(["train", "--config", fast_cfg, "--data", ds,
                "--stage", "1", "--out", out_a]) == 0

    # interrupted run: half the epochs, then resume with the full budget
    half_cfg = dict(FAST_CONFIG)
    half_cfg["train"] = dict(FAST_CONFIG["train"],
                             stage1_epochs=4, min_stage1_epochs=4)
    half_path = tmp_path / "half.json"
    half_path.write_text(json.dumps(half_cfg))
    out_b = tmp_path / "b"
    assert run(["train", "--config", half_path, "--data", ds,
                "--stage", "1", "--out", out_b]) == 0
    # mark as incomplete so the resume continues it under the full budget
    doc = json.loads((out_b / "stage1.json").read_text())
    doc["logs"]["completed"] = False
    (out_b / "stage1.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
    assert run(["train", "--config", fast_cfg, "--data", ds, "--stage", "1",
                "--resume", out_b / "stage1.json", "--out", out_b]) == 0

    a = json.loads((out_a / "stage1.json").read_text())
    b = json.loads((out_b / "stage1.json").read_text())
    assert a["twists"] == b["twists"]
    assert a["logs"]["epoch_losses"] == b["logs"]["epoch_losses"]


def test_synth_flag_overrides(tmp_path, fast_cfg):
    ds = tmp_path / "ds"
    assert run(["synth", "--config", fast_cfg, "--frames", "5",
                "--seed", "7", "--out", ds]) == 0
    assert len(list((ds / "image_2").glob("*.pgm"))) == 5
    meta = json.loads((ds / "meta.json").read_text())
    assert meta["seed"] == 7
    assert meta["scene_spec"]["frames"] == 5


def test_no_supervision_eval_reports_off_scale(tmp_path, fast_cfg):
    # with no calibration, nothing pins the metric scale: the evaluated
    # depth scale ratio must sit far from 1
    ds = tmp_path / "ds"
    out = tmp_path / "out"
    ev = tmp_path / "ev"
    assert run(["synth", "--config", fast_cfg, "--out", ds]) == 0
    assert run(["train", "--config", fast_cfg, "--data", ds, "--stage",
                "single", "--mode", "no_supervision", "--out", out]) == 0
    assert run(["eval", "--config", fast_cfg, "--gt", ds / "poses.txt",
                "--est", out / "poses_single_no_supervision.txt",
                "--depth-dir", out / "depth_single_no_supervision",
                "--depth-gt-dir", ds / "depth_gt", "--out", ev]) == 0
    doc = json.loads((ev / "report.json").read_text())
    assert abs(doc["scale"]["mu"] - 1.0) > 0.2
