import json

import pytest

from co2net import cli

SMALL = ["--set", "model.hidden=8", "--set", "train.max_steps=4", "--set", "train.lr=0.001"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    spec = d / "spec.json"
    spec.write_text(json.dumps({"num_videos": 10, "num_test_videos": 4, "D": 16, "C": 3, "signal_channels": 6,
                                "redundant_channels": 6, "T_range": [30, 40], "seed": 5}))
    assert cli.main(["synth", "--spec", str(spec), "--out", str(d / "data")]) == 0
    return d / "data"


def test_synth_summary_and_determinism(workdir, tmp_path, capsys):
    spec = {"num_videos": 10, "num_test_videos": 4, "D": 16, "C": 3, "signal_channels": 6,
            "redundant_channels": 6, "T_range": [30, 40], "seed": 5}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    capsys.readouterr()
    cli.main(["synth", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "a")])
    first = capsys.readouterr().out
    cli.main(["synth", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "b")])
    second = capsys.readouterr().out
    assert "train: 10 videos, 3 classes" in first
    hash_line = [line for line in first.splitlines() if line.startswith("manifest hash")]
    assert hash_line and hash_line[0] in second


def test_synth_infeasible(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"D": 4, "signal_channels": 4, "redundant_channels": 4}))
    assert cli.main(["synth", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_train_eval_localize(workdir, capsys):
    cfg = str(workdir / "config.json")
    assert cli.main(["train", "--config", cfg, *SMALL]) == 0
    reports = workdir / "reports"
    lines = (reports / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [1, 2, 3, 4]
    assert (reports / "loss_curve.png").stat().st_size > 0

    assert cli.main(["eval", "--config", cfg, *SMALL]) == 0
    report = json.loads((reports / "report.json").read_text())
    assert set(report) == {"per_class_ap", "map_at", "avg_map", "metadata"}
    assert report["metadata"]["config_hash"]
    first = (reports / "report.json").read_bytes()
    assert cli.main(["eval", "--config", cfg, *SMALL]) == 0
    assert (reports / "report.json").read_bytes() == first
    assert (reports / "map_vs_iou.png").exists()
    assert "config_hash" in (reports / "report.csv").read_text()
    proposals = json.loads((reports / "proposals.json").read_text())
    assert proposals["config_hash"] == report["metadata"]["config_hash"]

    assert cli.main(["localize", "--config", cfg, *SMALL, "--video", "test_0000"]) == 0
    dump = json.loads((reports / "localize_test_0000.json").read_text())
    assert len(dump["tracks"]["a_fused"]) == len(dump["tracks"]["a_rgb"])
    assert (reports / "localize_test_0000.png").exists()


def test_eval_refuses_other_config(workdir):
    cfg = str(workdir / "config.json")
    assert cli.main(["train", "--config", cfg, *SMALL]) == 0
    assert cli.main(["eval", "--config", cfg, *SMALL, "--fusion", "concat"]) == cli.EXIT_HASH_MISMATCH
    assert cli.main(["eval", "--config", cfg, *SMALL, "--loss-off", "cas"]) == cli.EXIT_HASH_MISMATCH


def test_dimension_mismatch(workdir):
    code = cli.main(["train", "--config", str(workdir / "config.json"), *SMALL, "--set", "model.D=17"])
    assert code == cli.EXIT_CHECKPOINT


def test_bad_override_and_missing_config(workdir, tmp_path):
    assert cli.main(["train", "--config", str(workdir / "config.json"), "--set", "model.nope=1"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", str(tmp_path / "none.json")]) == cli.EXIT_CONFIG


def test_missing_checkpoint(workdir):
    code = cli.main(["eval", "--config", str(workdir / "config.json"), *SMALL, "--checkpoint", "/nonexistent.co2w"])
    assert code == cli.EXIT_CHECKPOINT


def test_gradcheck(workdir, tmp_path):
    args = ["gradcheck", "--config", str(workdir / "config.json"), "--set", "model.hidden=3",
            "--set", "train.batch_videos=4", "--set", "train.pairs_per_batch=1", "--snippets", "8",
            "--out", str(tmp_path / "g.json")]
    assert cli.main(args) == 0
    doc = json.loads((tmp_path / "g.json").read_text())
    assert doc["max_rel_error"] <= 1e-4 and doc["config_hash"]


def test_ablation_flags_reach_config(workdir):
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--config", str(workdir / "config.json"), "--fusion", "se", "--delta", "kl",
                              "--roles", "local_global", "--loss-off", "oppo", "--loss-off", "norm"])
    cfg = cli._config(args)
    assert (cfg.model.fusion_mode, cfg.model.delta_mode, cfg.model.role_mode) == ("se", "kl", "local_global")
    assert cfg.loss.delta_mode == "kl"
    assert sorted(cfg.loss.enabled) == ["cas", "mil", "ml"]


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == cli.EXIT_USAGE
