import json
import xml.etree.ElementTree as ET

import pytest

from tbloc.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestParsing:
    def test_help_exits_zero(self, capsys):
        code, out, _ = run(capsys, "--help")
        assert code == 0
        assert "gen-data" in out and "predict" in out

    def test_subcommand_help(self, capsys):
        code, out, _ = run(capsys, "train", "--help")
        assert code == 0
        assert "--baseline-focal-loss" in out

    def test_no_command_is_usage_error(self, capsys):
        code, _, err = run(capsys)
        assert code == 2

    def test_unknown_flag_is_usage_error(self, capsys):
        code, _, _ = run(capsys, "gen-data", "--bogus", "1")
        assert code == 2

    def test_missing_required_flag(self, capsys):
        code, _, err = run(capsys, "gen-data")
        assert code == 2
        assert "--out is required" in err

    def test_bad_backbone_widths(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--manifest", "x", "--out",
                           str(tmp_path), "--backbone-widths", "1,2")
        assert code == 2
        assert "five values" in err


class TestConfigFile:
    def test_config_supplies_defaults(self, capsys, tmp_path):
        config = tmp_path / "gen.json"
        config.write_text(json.dumps({"out": str(tmp_path / "data"),
                                      "n_tb": 1, "n_healthy": 1,
                                      "image_size": 128}))
        code, _, err = run(capsys, "gen-data", "--config", str(config))
        assert code == 0
        assert "wrote 2 records" in err

    def test_explicit_flag_beats_config(self, capsys, tmp_path):
        config = tmp_path / "gen.json"
        config.write_text(json.dumps({"out": str(tmp_path / "data"),
                                      "n_tb": 1, "n_healthy": 1,
                                      "image_size": 128}))
        code, _, err = run(capsys, "gen-data", "--config", str(config),
                           "--n-tb", "2")
        assert code == 0
        assert "wrote 3 records" in err

    def test_unknown_key_rejected(self, capsys, tmp_path):
        config = tmp_path / "gen.json"
        config.write_text(json.dumps({"out": str(tmp_path / "data"),
                                      "epochs": 3}))
        code, _, err = run(capsys, "gen-data", "--config", str(config))
        assert code == 2
        assert "unknown config key 'epochs'" in err

    def test_lenient_config_warns_instead(self, capsys, tmp_path):
        config = tmp_path / "gen.json"
        config.write_text(json.dumps({"out": str(tmp_path / "data"),
                                      "n_tb": 1, "n_healthy": 1,
                                      "image_size": 128, "epochs": 3}))
        code, _, err = run(capsys, "gen-data", "--config", str(config),
                           "--lenient-config")
        assert code == 0
        assert "ignoring unknown config key 'epochs'" in err

    def test_config_must_be_object(self, capsys, tmp_path):
        config = tmp_path / "gen.json"
        config.write_text("[1, 2]")
        code, _, err = run(capsys, "gen-data", "--config", str(config))
        assert code == 2
        assert "JSON object" in err

    def test_missing_config_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "gen-data", "--config",
                           str(tmp_path / "nope.json"))
        assert code == 2
        assert "cannot read config" in err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + short train, shared by the integration tests below."""
    root = tmp_path_factory.mktemp("cli-pipeline")
    data = root / "data"
    run_dir = root / "run"
    assert main(["gen-data", "--out", str(data), "--seed", "11",
                 "--image-size", "128", "--n-tb", "2", "--n-healthy", "2"]) == 0
    assert main(["train", "--manifest", str(data / "manifest.jsonl"),
                 "--out", str(run_dir), "--image-size", "128",
                 "--backbone-widths", "2,2,2,2,2", "--fpn-channels", "2",
                 "--head-depth", "1", "--epochs", "1", "--lr", "1e-3"]) == 0
    return {"data": data, "run": run_dir}


class TestGenData:
    def test_writes_manifest_and_images(self, pipeline):
        data = pipeline["data"]
        lines = (data / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 4
        for line in lines:
            row = json.loads(line)
            assert (data / row["image"]).exists()

    def test_same_seed_reproduces_bytes(self, capsys, tmp_path, pipeline):
        again = tmp_path / "again"
        code, _, _ = run(capsys, "gen-data", "--out", str(again), "--seed",
                         "11", "--image-size", "128", "--n-tb", "2",
                         "--n-healthy", "2")
        assert code == 0
        src = pipeline["data"]
        assert (again / "manifest.jsonl").read_bytes() == \
            (src / "manifest.jsonl").read_bytes()
        first = json.loads((again / "manifest.jsonl").read_text()
                           .splitlines()[0])["image"]
        assert (again / first).read_bytes() == (src / first).read_bytes()


class TestPreprocessCommand:
    def test_writes_sidecar_files(self, capsys, tmp_path, pipeline):
        out = tmp_path / "proc"
        code, _, err = run(capsys, "preprocess", "--manifest",
                           str(pipeline["data"] / "manifest.jsonl"),
                           "--out", str(out), "--image-size", "64")
        assert code == 0
        rows = [json.loads(l) for l in
                (out / "processed.jsonl").read_text().splitlines()]
        assert len(rows) == 4
        for row in rows:
            assert (out / f"{row['id']}.pgm").exists()
            assert set(row) == {"id", "label", "boxes", "scale"}


class TestTrainCommand:
    def test_training_artifacts(self, pipeline):
        run_dir = pipeline["run"]
        assert (run_dir / "best.ckpt").exists()
        assert (run_dir / "best.ckpt.bin").exists()
        assert (run_dir / "training_log.csv").exists()
        assert (run_dir / "checkpoints" / "epoch_001.ckpt").exists()

    def test_missing_manifest_is_runtime_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--manifest",
                           str(tmp_path / "none.jsonl"), "--out",
                           str(tmp_path / "out"))
        assert code == 1


class TestEvalCommand:
    def test_writes_report_and_summary(self, capsys, tmp_path, pipeline):
        out = tmp_path / "eval"
        code, stdout, _ = run(capsys, "eval", "--manifest",
                              str(pipeline["data"] / "manifest.jsonl"),
                              "--checkpoint",
                              str(pipeline["run"] / "best.ckpt"),
                              "--out", str(out))
        assert code == 0
        assert (out / "report.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) == {"ap", "image_count", "gt_count"}
        assert json.loads(stdout) == summary

    def test_missing_checkpoint_is_runtime_error(self, capsys, tmp_path,
                                                 pipeline):
        code, _, err = run(capsys, "eval", "--manifest",
                           str(pipeline["data"] / "manifest.jsonl"),
                           "--checkpoint", str(tmp_path / "none.ckpt"),
                           "--out", str(tmp_path / "eval"))
        assert code == 1
        assert "error:" in err


class TestPredictCommand:
    def test_jsonl_schema(self, capsys, pipeline):
        code, stdout, _ = run(capsys, "predict", "--manifest",
                              str(pipeline["data"] / "manifest.jsonl"),
                              "--checkpoint",
                              str(pipeline["run"] / "best.ckpt"))
        assert code == 0
        rows = [json.loads(l) for l in stdout.splitlines()]
        assert len(rows) == 4
        for row in rows:
            assert set(row) == {"id", "boxes", "study_verdict"}
            assert row["study_verdict"] in ("healthy", "tb")
            for box in row["boxes"]:
                assert len(box) == 5

    def test_force_healthy_empties_boxes(self, capsys, tmp_path, pipeline):
        out = tmp_path / "pred.jsonl"
        code, _, _ = run(capsys, "predict", "--manifest",
                         str(pipeline["data"] / "manifest.jsonl"),
                         "--checkpoint", str(pipeline["run"] / "best.ckpt"),
                         "--score-thresh", "0.004",
                         "--force-verdict", "healthy", "--out", str(out))
        assert code == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert all(row["boxes"] == [] for row in rows)
        assert all(row["study_verdict"] == "healthy" for row in rows)

    def test_force_tb_keeps_boxes(self, capsys, tmp_path, pipeline):
        out = tmp_path / "pred.jsonl"
        code, _, _ = run(capsys, "predict", "--manifest",
                         str(pipeline["data"] / "manifest.jsonl"),
                         "--checkpoint", str(pipeline["run"] / "best.ckpt"),
                         "--score-thresh", "0.004",
                         "--force-verdict", "tb", "--out", str(out))
        assert code == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert any(row["boxes"] for row in rows)


class TestCurvesCommand:
    def test_curves_from_report(self, capsys, tmp_path, pipeline):
        eval_out = tmp_path / "eval"
        run(capsys, "eval", "--manifest",
            str(pipeline["data"] / "manifest.jsonl"),
            "--checkpoint", str(pipeline["run"] / "best.ckpt"),
            "--score-thresh", "0.004", "--out", str(eval_out))
        curves_out = tmp_path / "curves"
        code, _, err = run(capsys, "curves", "--report",
                           str(eval_out / "report.csv"),
                           "--out", str(curves_out))
        assert code == 0
        for name in ("pr.svg", "froc.svg"):
            root = ET.fromstring((curves_out / name).read_text())
            assert root.tag.endswith("svg")

    def test_missing_report_is_usage_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "curves", "--report",
                           str(tmp_path / "none.csv"),
                           "--out", str(tmp_path / "curves"))
        assert code == 2
        assert "cannot parse report" in err
