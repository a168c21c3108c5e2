import json
import re
from pathlib import Path

import numpy as np
import pytest

from mitodet import cli
from mitodet.boxgeom import CLASS_NAMES
from mitodet.engine import read_log_csv

TINY_CONFIG = {
    "unet_depth": 2, "unet_base_channels": 4, "detector_channels": 8,
    "domain_head_channels": 8, "extractor_channels": [4, 8, 8],
    "anchor_scales": [1.0], "anchor_ratios": [1.0],
    "batch_size": 4, "learning_rate": 1e-3, "max_steps": 6, "seed": 1,
    "split_train": 0.7, "split_val": 0.0, "split_test": 0.3,
}


def write_config(tmp_path, **overrides) -> Path:
    doc = dict(TINY_CONFIG)
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth + train once; reused by evaluate/infer/plot tests."""
    root = tmp_path_factory.mktemp("cli_ws")
    data_dir = root / "data"
    run_dir = root / "run"
    rc = cli.main(["synth", "--out", str(data_dir), "--seed", "7",
                   "--domains", "3", "--images", "8", "--size", "32"])
    assert rc == 0
    cfg = write_config(root)
    rc = cli.main(["train", "--config", str(cfg), "--data",
                   str(data_dir / "manifest.json"), "--out", str(run_dir)])
    assert rc == 0
    return {"root": root, "data": data_dir, "run": run_dir, "config": cfg}


class TestHelp:
    @pytest.mark.parametrize("cmd,flags", [
        ("synth", ["--out", "--seed", "--domains", "--images", "--size"]),
        ("train", ["--config", "--data", "--out", "--resume"]),
        ("evaluate", ["--ckpt", "--data", "--split", "--out", "--pr", "--oracle"]),
        ("infer", ["--ckpt", "--image", "--out", "--json", "--homogenized"]),
        ("plot-pr", ["--out"]),
    ])
    def test_help_lists_flags_with_defaults(self, cmd, flags, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main([cmd, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in flags:
            assert flag in text
        assert "default" in text


class TestSynth:
    def test_counts_and_checksum_determinism(self, tmp_path, capsys):
        outs = []
        for sub in ("a", "b"):
            rc = cli.main(["synth", "--out", str(tmp_path / sub), "--seed", "42",
                           "--domains", "3", "--images", "5", "--size", "32"])
            assert rc == 0
            outs.append(capsys.readouterr().out)
        images = list((tmp_path / "a" / "images").glob("*.png"))
        assert len(images) == 15
        assert (tmp_path / "a" / "manifest.json").exists()
        sums = [re.search(r"checksum: (\w+)", o).group(1) for o in outs]
        assert sums[0] == sums[1]

    def test_single_domain_warns(self, tmp_path, capsys):
        rc = cli.main(["synth", "--out", str(tmp_path / "one"), "--seed", "1",
                       "--domains", "1", "--images", "2", "--size", "32"])
        assert rc == 0
        assert "degenerate" in capsys.readouterr().err

    def test_unwritable_out_exits_2(self, capsys):
        rc = cli.main(["synth", "--out", "/proc/nope", "--seed", "1",
                       "--domains", "2", "--images", "1", "--size", "32"])
        assert rc == 2
        assert "error" in capsys.readouterr().err

    def test_env_var_out(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("MITODET_OUT", str(tmp_path / "env_out"))
        rc = cli.main(["synth", "--seed", "1", "--domains", "2",
                       "--images", "2", "--size", "32"])
        assert rc == 0
        assert (tmp_path / "env_out" / "manifest.json").exists()


class TestTrain:
    def test_missing_manifest_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        rc = cli.main(["train", "--config", str(cfg),
                       "--data", str(tmp_path / "missing.json"),
                       "--out", str(tmp_path / "run")])
        assert rc == 2
        assert "missing.json" in capsys.readouterr().err

    def test_defaults_embed_reference_settings(self):
        from mitodet.config import RunConfig
        cfg = RunConfig()
        assert cfg.batch_size == 12
        assert cfg.learning_rate == 1e-4
        assert cfg.lambda1 == 10.0 and cfg.lambda2 == 25.0

    def test_log_and_checkpoint_written(self, workspace):
        run = workspace["run"]
        assert (run / "checkpoint_final.bin").exists()
        header, rows = read_log_csv(run / "train_log.csv")
        assert len(rows) == TINY_CONFIG["max_steps"]
        assert any("lambda1=10.0" in h and "lambda2=25.0" in h for h in header)

    def test_resume_continues_step_counter(self, workspace, tmp_path):
        cfg = write_config(tmp_path, max_steps=9)
        rc = cli.main(["train", "--config", str(cfg),
                       "--data", str(workspace["data"] / "manifest.json"),
                       "--out", str(tmp_path / "resumed"),
                       "--resume", str(workspace["run"] / "checkpoint_final.bin")])
        assert rc == 0
        _, rows = read_log_csv(tmp_path / "resumed" / "train_log.csv")
        assert [r["step"] for r in rows] == [6, 7, 8]

    def test_unknown_config_key_exits_2(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"max_steps": 1, "mystery_knob": 3}))
        rc = cli.main(["train", "--config", str(cfg),
                       "--data", str(workspace["data"] / "manifest.json"),
                       "--out", str(tmp_path / "run")])
        assert rc == 2
        assert "mystery_knob" in capsys.readouterr().err

    def test_divergence_exits_3(self, workspace, tmp_path, capsys):
        cfg = write_config(tmp_path, lambda1=1e9, max_steps=2)
        rc = cli.main(["train", "--config", str(cfg),
                       "--data", str(workspace["data"] / "manifest.json"),
                       "--out", str(tmp_path / "div")])
        assert rc == 3
        assert "step 0" in capsys.readouterr().err


class TestEvaluate:
    def test_oracle_fixture_scores_one(self, workspace, tmp_path):
        metrics = tmp_path / "metrics.csv"
        pr = tmp_path / "pr.csv"
        rc = cli.main(["evaluate", "--ckpt", str(workspace["run"] / "checkpoint_final.bin"),
                       "--data", str(workspace["data"] / "manifest.json"),
                       "--split", "test", "--out", str(metrics), "--pr", str(pr),
                       "--oracle"])
        assert rc == 0
        lines = metrics.read_text().splitlines()
        assert lines[0] == "class,ap,tp,fp,fn"
        body = {ln.split(",")[0]: ln.split(",") for ln in lines[1:]}
        assert float(body["hard_negative"][1]) == 1.0
        assert float(body["mitotic_figure"][1]) == 1.0
        assert float(body["mAP"][1]) == 1.0
        assert pr.read_text().splitlines()[0] == "class,score_threshold,precision,recall"

    def test_map_row_is_mean(self, workspace, tmp_path):
        metrics = tmp_path / "metrics.csv"
        rc = cli.main(["evaluate", "--ckpt", str(workspace["run"] / "checkpoint_final.bin"),
                       "--data", str(workspace["data"] / "manifest.json"),
                       "--split", "test", "--out", str(metrics)])
        assert rc == 0
        rows = [ln.split(",") for ln in metrics.read_text().splitlines()[1:]]
        by_class = {r[0]: float(r[1]) for r in rows}
        want = (by_class["hard_negative"] + by_class["mitotic_figure"]) / 2
        assert abs(by_class["mAP"] - want) < 1e-12

    def test_empty_split_exits_2(self, workspace, tmp_path, capsys):
        # fractions put nothing in val
        rc = cli.main(["evaluate", "--ckpt", str(workspace["run"] / "checkpoint_final.bin"),
                       "--data", str(workspace["data"] / "manifest.json"),
                       "--split", "val", "--out", str(tmp_path / "m.csv")])
        assert rc == 2
        assert "empty" in capsys.readouterr().err

    def test_bad_checkpoint_exits_2(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"not a checkpoint at all")
        rc = cli.main(["evaluate", "--ckpt", str(bad),
                       "--data", str(workspace["data"] / "manifest.json"),
                       "--out", str(tmp_path / "m.csv")])
        assert rc == 2


class TestInfer:
    def test_json_schema_and_bounds(self, workspace, tmp_path):
        image = sorted((workspace["data"] / "images").glob("*.png"))[0]
        out_json = tmp_path / "dets.json"
        rc = cli.main(["infer", "--ckpt", str(workspace["run"] / "checkpoint_final.bin"),
                       "--image", str(image), "--out", str(tmp_path / "overlay.png"),
                       "--json", str(out_json),
                       "--homogenized", str(tmp_path / "hom.png")])
        assert rc == 0
        doc = json.loads(out_json.read_text())
        assert set(doc) == {"image", "detections"}
        for d in doc["detections"]:
            assert set(d) == {"x_min", "y_min", "x_max", "y_max", "class", "score"}
            assert d["class"] in CLASS_NAMES
            assert 0.0 <= d["score"] <= 1.0
            assert 0 <= d["x_min"] < d["x_max"] <= 32
            assert 0 <= d["y_min"] < d["y_max"] <= 32
        assert (tmp_path / "overlay.png").exists()
        assert (tmp_path / "hom.png").exists()

    def test_overlay_byte_stable(self, workspace, tmp_path):
        image = sorted((workspace["data"] / "images").glob("*.png"))[0]
        blobs = []
        for name in ("o1.png", "o2.png"):
            rc = cli.main(["infer", "--ckpt",
                           str(workspace["run"] / "checkpoint_final.bin"),
                           "--image", str(image), "--out", str(tmp_path / name)])
            assert rc == 0
            blobs.append((tmp_path / name).read_bytes())
        assert blobs[0] == blobs[1]

    def test_unreadable_image_exits_2(self, workspace, tmp_path, capsys):
        rc = cli.main(["infer", "--ckpt", str(workspace["run"] / "checkpoint_final.bin"),
                       "--image", str(tmp_path / "ghost.png"),
                       "--out", str(tmp_path / "o.png")])
        assert rc == 2


class TestPlotPR:
    def test_two_class_plot(self, tmp_path):
        pr = tmp_path / "pr.csv"
        pr.write_text("class,score_threshold,precision,recall\n"
                      "hard_negative,0.9,1.0,0.5\n"
                      "hard_negative,0.5,0.8,0.9\n"
                      "mitotic_figure,0.7,0.9,0.4\n")
        out = tmp_path / "pr.svg"
        rc = cli.main(["plot-pr", str(pr), "--out", str(out)])
        assert rc == 0
        svg = out.read_text()
        assert "hard_negative" in svg and "mitotic_figure" in svg

    def test_single_point_curve(self, tmp_path):
        pr = tmp_path / "pr.csv"
        pr.write_text("class,score_threshold,precision,recall\n"
                      "mitotic_figure,0.7,1.0,1.0\n")
        rc = cli.main(["plot-pr", str(pr), "--out", str(tmp_path / "pr.svg")])
        assert rc == 0

    def test_empty_class_warns(self, tmp_path, capsys):
        pr = tmp_path / "pr.csv"
        pr.write_text("class,score_threshold,precision,recall\n"
                      "mitotic_figure,0.7,1.0,1.0\n")
        rc = cli.main(["plot-pr", str(pr), "--out", str(tmp_path / "pr.svg")])
        assert rc == 0
        assert "hard_negative" in capsys.readouterr().err

    def test_malformed_csv_exits_2(self, tmp_path, capsys):
        pr = tmp_path / "pr.csv"
        pr.write_text("class,score,precision\nboom\n")
        rc = cli.main(["plot-pr", str(pr), "--out", str(tmp_path / "pr.svg")])
        assert rc == 2
