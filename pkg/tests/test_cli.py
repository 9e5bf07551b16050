import subprocess
import sys

import numpy as np
import pytest

from neif import io
from neif.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--resolution", "24", "--lights", "6", "--seed", "2", "--out", str(root / "scene")]) == 0
    assert main(["train", "--scene", str(root / "scene"), "--epochs", "3", "--warmup", "2",
                 "--out", str(root / "run")]) == 0
    return root


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == 0
    assert "synth" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train"], ["synth", "--lights", "many", "--out", "x"],
                                  ["train", "--scene", "s", "--out", "o", "--ablate", "no-such-thing"]])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_missing_scene_exit_3(tmp_path, capsys):
    assert main(["train", "--scene", str(tmp_path / "absent"), "--epochs", "1", "--out", str(tmp_path / "r")]) == 3
    assert "absent" in capsys.readouterr().err


def test_synth_writes_loadable_scene(workspace):
    scene = io.load_scene(workspace / "scene")
    assert scene.images.shape == (6, 24, 24)
    assert scene.gt_normals is not None and scene.meta["seed"] == 2


def test_train_writes_model_bundle(workspace):
    run = workspace / "run"
    for name in (io.MODEL_FILE, io.PARAMS_FILE, io.HISTORY_FILE, "normals.pfm", "depth.pfm"):
        assert (run / name).exists(), name
    rows = io.read_rows(run / io.HISTORY_FILE)
    assert [r["phase"] for r in rows] == ["warmup", "warmup", "main"]
    assert rows[0]["config_hash"] == io.load_model(run).config_hash != ""


def test_eval_writes_metrics_and_figure(workspace, capsys):
    out = workspace / "eval"
    assert main(["eval", "--run", str(workspace / "run"), "--scene", str(workspace / "scene"), "--out", str(out)]) == 0
    rows = {r["metric"]: float(r["value"]) for r in io.read_rows(out / io.METRICS_FILE)}
    assert set(rows) >= {"normal_mae_deg", "light_mae_deg", "intensity_error"}
    assert 0 <= rows["normal_mae_deg"] <= 180
    assert (out / "normal_error.png").stat().st_size > 1000
    assert "normal_mae_deg" in capsys.readouterr().out


def test_eval_needs_ground_truth(workspace, tmp_path):
    bare = io.load_scene(workspace / "scene").without_ground_truth()
    io.save_scene(bare, tmp_path / "bare")
    assert main(["eval", "--run", str(workspace / "run"), "--scene", str(tmp_path / "bare"), "--out", str(tmp_path)]) == 3


def test_baseline(workspace, tmp_path):
    assert main(["baseline", "--scene", str(workspace / "scene"), "--out", str(tmp_path)]) == 0
    assert io.read_pfm(tmp_path / "baseline_normals.pfm").shape == (24, 24, 3)
    assert io.read_rows(tmp_path / "baseline_metrics.csv")[0]["metric"] == "normal_mae_deg"


def test_render(workspace, tmp_path):
    assert main(["render", "--run", str(workspace / "run"), "--scene", str(workspace / "scene"), "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("render_*.pfm"))) == 6
    assert (tmp_path / "renders.png").exists() and (tmp_path / "render_metrics.csv").exists()


def test_inspect(workspace, tmp_path):
    assert main(["inspect", "--run", str(workspace / "run"), "--scene", str(workspace / "scene"),
                 "--out", str(tmp_path), "--points", "3", "--resolution", "16"]) == 0
    for name in ("intrinsics.png", "brdf_spheres.png", "brdf_points.csv", "correlation.csv", "correlation.png",
                 "history.png", "albedo.pfm", "kd.pfm"):
        assert (tmp_path / name).exists(), name
    rows = io.read_rows(tmp_path / "correlation.csv")
    channels = io.load_model(workspace / "run").fields.config.light_channels[-1]
    assert rows[-1]["feature"] == "max" and len(rows) == channels + 1
    assert len(io.read_rows(tmp_path / "brdf_points.csv")) == 3


def test_gbr_command(capsys, tmp_path):
    assert main(["gbr", "--resolution", "32", "--lights", "8", "--random-c", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    diff = float(out.splitlines()[0].split(",")[1])
    assert diff < 1e-6
    assert (tmp_path / "pseudo_normals.pfm").exists()


def test_singular_gbr_is_a_data_error():
    assert main(["gbr", "--lam", "0", "--resolution", "16", "--lights", "4"]) == 3


def test_sparse_and_ablation_flags(workspace, tmp_path):
    assert main(["train", "--scene", str(workspace / "scene"), "--epochs", "2", "--warmup", "1", "--sparse",
                 "--ablate", "no-gp", "--ablate", "no-shadow-to-light", "--out", str(tmp_path)]) == 0
    model = io.load_model(tmp_path)
    assert model.config.sparse_mode and model.config.skip_gp and model.config.cut_shadow_to_light
    assert model.fields.config.n_freqs == 6
    row = io.read_rows(tmp_path / io.HISTORY_FILE)[0]
    assert row["az"] == "" and row["gp"] == ""


def test_azimuth_file_option(workspace, tmp_path):
    np.savetxt(tmp_path / "az.txt", np.linspace(0, 6, 6))
    assert main(["train", "--scene", str(workspace / "scene"), "--epochs", "1", "--warmup", "1",
                 "--azimuth", str(tmp_path / "az.txt"), "--out", str(tmp_path / "r")]) == 0
    np.savetxt(tmp_path / "bad.txt", [0.0, 1.0])
    assert main(["train", "--scene", str(workspace / "scene"), "--epochs", "1", "--warmup", "1",
                 "--azimuth", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "r2")]) == 3


def test_module_entry_point(tmp_path):
    env_run = subprocess.run([sys.executable, "-m", "neif", "gbr", "--resolution", "16", "--lights", "4"],
                             capture_output=True, text=True, env={"NEIF_DETERMINISTIC": "1", "PATH": ""})
    assert env_run.returncode == 0, env_run.stderr
    assert env_run.stdout.startswith("max_abs_image_difference")
