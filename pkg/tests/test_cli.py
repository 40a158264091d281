"""Command-line interface: subcommand behavior, exit codes, determinism."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from shapecomplete.cli import main
from shapecomplete import fileio
from shapecomplete.volumetric import PointCloud


def tree_digest(root):
    """Order-independent digest of every file in a directory tree."""
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    code = main(["gen-data", "--out", str(out), "--seed", "7", "--profile-g", "8",
                 "--count", "3", "--scans", "1", "--n-patches", "4"])
    assert code == 0
    return out


class TestGenData:
    def test_deterministic_byte_identical(self, tmp_path, tiny_dataset):
        out2 = tmp_path / "ds2"
        code = main(["gen-data", "--out", str(out2), "--seed", "7",
                     "--profile-g", "8", "--count", "3", "--scans", "1",
                     "--n-patches", "4"])
        assert code == 0
        assert tree_digest(tiny_dataset) == tree_digest(out2)

    def test_threads_do_not_change_outputs(self, tmp_path, tiny_dataset):
        out2 = tmp_path / "ds_mt"
        code = main(["gen-data", "--out", str(out2), "--seed", "7",
                     "--profile-g", "8", "--count", "3", "--scans", "1",
                     "--n-patches", "4", "--threads", "4"])
        assert code == 0
        assert tree_digest(tiny_dataset) == tree_digest(out2)

    def test_seed_changes_outputs(self, tmp_path, tiny_dataset):
        out2 = tmp_path / "ds_seed"
        main(["gen-data", "--out", str(out2), "--seed", "8", "--profile-g", "8",
              "--count", "3", "--scans", "1", "--n-patches", "4"])
        assert tree_digest(tiny_dataset) != tree_digest(out2)

    def test_nonempty_output_dir_rejected(self, tmp_path, capsys):
        out = tmp_path / "busy"
        out.mkdir()
        (out / "junk").write_text("x")
        code = main(["gen-data", "--out", str(out), "--count", "2"])
        assert code == 3
        err = capsys.readouterr().err
        assert err.startswith("error: 3:")


class TestEval:
    def test_identity_pair_reports_perfect_row(self, tmp_path, rng, capsys):
        pts = rng.uniform(size=(200, 3))
        a = tmp_path / "a.ply"
        fileio.save_cloud_ply(a, PointCloud(points=pts))
        code = main(["eval", "--true", str(a), "--completed", str(a)])
        assert code == 0
        out = capsys.readouterr().out.strip()
        assert out == "100.00%/0.000000"

    def test_report_csv_written(self, tmp_path, rng):
        pts = rng.uniform(size=(100, 3))
        a = tmp_path / "a.ply"
        fileio.save_cloud_ply(a, PointCloud(points=pts))
        report = tmp_path / "report.csv"
        code = main(["eval", "--true", str(a), "--completed", str(a),
                     "--out", str(report)])
        assert code == 0
        assert "completeness" in report.read_text()

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        code = main(["eval", "--true", str(tmp_path / "nope.ply"),
                     "--completed", str(tmp_path / "nope.ply")])
        assert code == 3
        assert capsys.readouterr().err.startswith("error: 3:")


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_dataset):
    out = tmp_path_factory.mktemp("run") / "ckpts"
    config = tmp_path_factory.mktemp("cfg") / "train.json"
    config.write_text(json.dumps({
        "epochs": 2, "lr": 0.002, "lambda3": 0.0,
        "global_net": {"channels_2d": [4, 8], "blstm_hidden": 4,
                       "channels_3d": [4, 8, 8], "fusion_channels": 16},
        "local_net": {"encoder": [4, 8, 16], "fc": [64, 64],
                      "decoder": [16, 8], "guidance_channels": 4},
    }))
    code = main(["train", "--data", str(tiny_dataset), "--out", str(out),
                 "--config", str(config), "--seed", "3"])
    assert code == 0
    return out


class TestTrainCompleteRender:
    def test_train_outputs(self, trained):
        assert (trained / "global_phase1.ckpt").exists()
        assert (trained / "joint.ckpt").exists()
        log_text = (trained / "training_log.csv").read_text()
        assert "phase" in log_text and "loss" in log_text

    def test_train_deterministic(self, tmp_path, tiny_dataset, trained):
        out2 = tmp_path / "ckpts2"
        config = tmp_path / "train.json"
        config.write_text(json.dumps({
            "epochs": 2, "lr": 0.002, "lambda3": 0.0,
            "global_net": {"channels_2d": [4, 8], "blstm_hidden": 4,
                           "channels_3d": [4, 8, 8], "fusion_channels": 16},
            "local_net": {"encoder": [4, 8, 16], "fc": [64, 64],
                          "decoder": [16, 8], "guidance_channels": 4},
        }))
        code = main(["train", "--data", str(tiny_dataset), "--out", str(out2),
                     "--config", str(config), "--seed", "3"])
        assert code == 0
        for name in ("global_phase1.ckpt", "joint.ckpt"):
            assert (trained / name).read_bytes() == (out2 / name).read_bytes()

    def test_complete_command(self, tmp_path, tiny_dataset, trained, capsys):
        sample_cloud = next((tiny_dataset / "samples").glob("*/cloud.ply"))
        out = tmp_path / "completed"
        code = main(["complete", "--ckpt", str(trained / "joint.ckpt"),
                     "--input", str(sample_cloud), "--out", str(out),
                     "--data", str(tiny_dataset), "--seed", "5"])
        assert code == 0
        assert (out / "completed.ply").exists()
        assert (out / "completed.obj").exists()
        assert (out / "iterations.csv").exists()

    def test_complete_deterministic(self, tmp_path, tiny_dataset, trained):
        sample_cloud = next((tiny_dataset / "samples").glob("*/cloud.ply"))
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"completed_{tag}"
            code = main(["complete", "--ckpt", str(trained / "joint.ckpt"),
                         "--input", str(sample_cloud), "--out", str(out),
                         "--data", str(tiny_dataset), "--seed", "5"])
            assert code == 0
            outs.append(out)
        assert tree_digest(outs[0]) == tree_digest(outs[1])

    def test_complete_on_boundary_free_input_is_noop(self, tmp_path,
                                                     tiny_dataset, trained,
                                                     capsys):
        """A hole-free input with no missing-region boundary takes the
        fixpoint path: unchanged output, "already complete" status."""
        # Fibonacci sphere: regular spacing, so no angular gap ever nears
        # the boundary threshold
        n = 30000
        i = np.arange(n)
        phi = np.pi * (3.0 - np.sqrt(5.0)) * i
        z = 1.0 - 2.0 * (i + 0.5) / n
        r = np.sqrt(1.0 - z * z)
        v = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
        cloud = tmp_path / "sphere.ply"
        fileio.save_cloud_ply(cloud, PointCloud(points=0.3 * v))
        out = tmp_path / "noop"
        code = main(["complete", "--ckpt", str(trained / "joint.ckpt"),
                     "--input", str(cloud), "--out", str(out),
                     "--data", str(tiny_dataset), "--seed", "5"])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "already complete" in stdout
        assert len(fileio.load_cloud_ply(out / "completed.ply")) == n

    def test_complete_without_scale_is_config_error(self, tmp_path, tiny_dataset,
                                                    trained, capsys):
        sample_cloud = next((tiny_dataset / "samples").glob("*/cloud.ply"))
        code = main(["complete", "--ckpt", str(trained / "joint.ckpt"),
                     "--input", str(sample_cloud), "--out", str(tmp_path / "x")])
        assert code == 2
        assert capsys.readouterr().err.startswith("error: 2:")

    def test_render_command(self, tmp_path, tiny_dataset, trained):
        out = tmp_path / "previews"
        code = main(["render", "--data", str(tiny_dataset), "--index", "0",
                     "--out", str(out), "--ckpt", str(trained / "joint.ckpt")])
        assert code == 0
        assert (out / "face_0.ppm").exists()
        assert (out / "input.ply").exists()
        assert (out / "labels_iso.obj").exists()
        assert (out / "structure_iso.obj").exists()


class TestBaseline:
    def test_baseline_command(self, tmp_path, rng, capsys):
        pts = rng.uniform(size=(500, 3))
        src = tmp_path / "true.ply"
        fileio.save_cloud_ply(src, PointCloud(points=pts))
        out = tmp_path / "base.ply"
        code = main(["baseline", "--true", str(src), "--out", str(out), "--g", "8"])
        assert code == 0
        base = fileio.load_cloud_ply(out)
        assert 0 < len(base) <= 512


class TestConfigHandling:
    def test_invalid_json_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        code = main(["gen-data", "--out", str(tmp_path / "d"), "--config", str(bad)])
        assert code == 2
        assert capsys.readouterr().err.startswith("error: 2:")

    def test_partial_outputs_removed_on_failure(self, tmp_path):
        # training against a missing dataset fails before writing anything
        out = tmp_path / "ckpts"
        code = main(["train", "--data", str(tmp_path / "missing"), "--out", str(out)])
        assert code == 3
        assert not any(out.glob("*.ckpt")) if out.exists() else True
