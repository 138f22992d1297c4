import json

from lensflow.decorators import EXIT_CONFIG, EXIT_IO


def test_train_tiny_config(runner, app, tiny_config_path):
    result = runner.invoke(args=["train", str(tiny_config_path)])
    assert result.exit_code == 0, result.output
    assert "Flow-T1" in result.output
    assert "Flow-L(3;2)" in result.output
    run_dir = app.config["OUTPUT_ROOT"] + "/tiny-s0"
    assert json.loads(open(run_dir + "/metrics.json").read())["experiment"] == "tiny"


def test_train_with_out_and_seed(runner, tmp_path, tiny_config_path):
    result = runner.invoke(args=["train", str(tiny_config_path), "--out", str(tmp_path / "elsewhere"), "--seed", "7"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "elsewhere" / "tiny-s7" / "metrics.json").is_file()


def test_train_missing_lens_exits_2(runner, tmp_path, tiny_config_text):
    doc = json.loads(tiny_config_text)
    del doc["lens"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc, indent=2))
    result = runner.invoke(args=["train", str(path)])
    assert result.exit_code == EXIT_CONFIG
    assert "line " in result.output


def test_train_unknown_experiment_exits_2(runner):
    result = runner.invoke(args=["train", "exp9"])
    assert result.exit_code == EXIT_CONFIG


def test_train_missing_config_file_exits_4(runner, tmp_path):
    result = runner.invoke(args=["train", str(tmp_path / "nope.json")])
    assert result.exit_code == EXIT_IO


def test_report_and_sample(runner, app, tiny_config_path):
    assert runner.invoke(args=["train", str(tiny_config_path)]).exit_code == 0
    run_dir = app.config["OUTPUT_ROOT"] + "/tiny-s0"

    result = runner.invoke(args=["report", run_dir])
    assert result.exit_code == 0, result.output
    assert "Flow-T2" in result.output
    assert "manifest ok" in result.output

    result = runner.invoke(args=["sample", run_dir, "--n", "250", "--output", run_dir + "/fresh.csv"])
    assert result.exit_code == 0, result.output
    assert len(open(run_dir + "/fresh.csv").read().splitlines()) == 251


def test_report_detects_tampering(runner, app, tiny_config_path):
    assert runner.invoke(args=["train", str(tiny_config_path)]).exit_code == 0
    run_dir = app.config["OUTPUT_ROOT"] + "/tiny-s0"
    with open(run_dir + "/samples.csv", "a") as fh:
        fh.write("1,0,0,0,0,0\n")
    result = runner.invoke(args=["report", run_dir])
    assert result.exit_code == EXIT_IO


def test_report_detects_tampered_summary(runner, app, tiny_config_path):
    assert runner.invoke(args=["train", str(tiny_config_path), "--seeds", "2"]).exit_code == 0
    run_dir = app.config["OUTPUT_ROOT"] + "/tiny-s0"
    assert runner.invoke(args=["report", run_dir]).exit_code == 0
    with open(run_dir + "/summary.json", "w") as fh:
        fh.write("{}")
    result = runner.invoke(args=["report", run_dir])
    assert result.exit_code == EXIT_IO


def test_verify_geometry(runner):
    result = runner.invoke(args=["verify", "geometry"])
    assert result.exit_code == 0, result.output
    assert "[PASS] geometry.gluing_consistency" in result.output
    assert "FAIL" not in result.output


def test_verify_rejects_unknown_suite(runner):
    result = runner.invoke(args=["verify", "topology"])
    assert result.exit_code == 2
