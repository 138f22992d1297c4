import json
import math

import pytest

from lensflow.densities import KIND_BOLTZMANN, KIND_VMF
from lensflow.errors import ConfigError
from lensflow.experiments import (
    build_target,
    builtin_experiment,
    config_to_dict,
    load_reports,
    parse_config,
    run_seeds,
    sample_run,
)
from lensflow.flow import PriorParams
from lensflow.geometry import make_lens
from lensflow.utils.csv_files import read_csv
from lensflow.utils.manifest import verify_manifest


def test_builtin_exp1():
    config = builtin_experiment("exp1")
    assert config.lens == (3, 2)
    assert config.target.kind == KIND_VMF
    assert [c.kappa for c in config.target.components] == [35.0] * 5
    assert [c.weight for c in config.target.components] == pytest.approx([1 / 4, 1 / 4, 1 / 6, 1 / 6, 1 / 6])
    assert config.target.components[1].mu == pytest.approx((0.5, math.sqrt(3) / 2, 0.0, 0.0))


def test_builtin_exp2():
    config = builtin_experiment("exp2")
    assert config.lens == (7, 3)
    assert [c.kappa for c in config.target.components] == [65.0, 55.0, 65.0, 80.0]
    assert math.fsum(c.weight for c in config.target.components) == pytest.approx(1.0)


def test_builtin_boltz():
    config = builtin_experiment("boltz")
    assert config.lens == (12, 1)
    params = config.target.boltzmann
    assert config.target.kind == KIND_BOLTZMANN
    assert (params.kappa, params.c, params.V, params.x0, params.y0) == (5.0, (1.0, 0.0, 0.0), 20.0, (1.0, 0.0, 0.0), (0.0, 1.0, 0.0))
    assert config.priors == (PriorParams(5.0, 0.25), PriorParams(5.0, 0.25))


def test_builtin_unknown_name():
    with pytest.raises(ConfigError):
        builtin_experiment("exp3")


def test_builtin_boltz_target_is_symmetric():
    config = builtin_experiment("boltz")
    target = build_target(config.target, make_lens(*config.lens))
    assert target.symmetric


def test_parse_tiny_config(tiny_config_text):
    config = parse_config(tiny_config_text)
    assert config.name == "tiny"
    assert config.lens == (3, 2)
    assert config.train[0].epochs == 3 and config.train[1].epochs == 3
    assert config.eval.mode_min_count == 2
    assert config.normalizer.n_mc == 10000


def test_parse_per_torus_blocks(tiny_config_text):
    doc = json.loads(tiny_config_text)
    doc["prior"] = {"T1": {"kappa": 4.0}, "T2": {"sigma": 0.3}}
    config = parse_config(json.dumps(doc))
    assert config.prior(1) == PriorParams(4.0, 0.25)
    assert config.prior(2) == PriorParams(5.0, 0.3)


def test_missing_lens_block_reports_line(tiny_config_text):
    doc = json.loads(tiny_config_text)
    del doc["lens"]
    with pytest.raises(ConfigError, match="lens") as info:
        parse_config(json.dumps(doc, indent=2))
    assert str(info.value).startswith("line ")


def test_unknown_key_reports_its_line(tiny_config_text):
    doc = json.loads(tiny_config_text)
    doc["train"]["epochz"] = 3
    text = json.dumps(doc, indent=2)
    expected = text[: text.index('"epochz"')].count("\n") + 1
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == expected


def test_json_syntax_error_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config('{\n  "lens": {"p": 3, "q": 2},\n  "target": ,\n}')
    assert info.value.line == 3


@pytest.mark.parametrize("lens", [{"p": 4, "q": 2}, {"p": 3}, [3, 2]])
def test_invalid_lens_block(tiny_config_text, lens):
    doc = json.loads(tiny_config_text)
    doc["lens"] = lens
    with pytest.raises(ConfigError):
        parse_config(json.dumps(doc))


def test_invalid_target(tiny_config_text):
    doc = json.loads(tiny_config_text)
    doc["target"]["components"][0]["weight"] = 0.9
    with pytest.raises(ConfigError):
        parse_config(json.dumps(doc))
    doc["target"] = {"kind": "spline"}
    with pytest.raises(ConfigError):
        parse_config(json.dumps(doc))


def test_asymmetric_target_declared_symmetric_is_rejected(tiny_config_text):
    doc = json.loads(tiny_config_text)
    doc["target"]["symmetric"] = True
    config = parse_config(json.dumps(doc))
    with pytest.raises(ConfigError):
        build_target(config.target, make_lens(*config.lens))


@pytest.mark.parametrize("name", ["exp1", "exp2", "boltz"])
def test_config_dict_roundtrip(name):
    config = builtin_experiment(name)
    assert parse_config(json.dumps(config_to_dict(config))) == config


def test_run_writes_artifacts(tmp_path, tiny_config_text):
    config = parse_config(tiny_config_text)
    run_dir, reports = run_seeds(config, tmp_path, seeds=1, parallel=False)
    assert run_dir == tmp_path / "tiny-s0"
    for name in (
        "metrics.json", "history_T1.csv", "history_T2.csv", "samples.csv", "scatter_T1.svg",
        "scatter_T2.svg", "config.json", "manifest.json",
        "checkpoint_T1/flow.pt", "checkpoint_T2/manifest.json",
    ):
        assert (run_dir / name).is_file(), name
    assert verify_manifest(run_dir) == []
    files = json.loads((run_dir / "manifest.json").read_text())["files"]
    assert "checkpoint_T1/manifest.json" in files
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert metrics["kl_decomposed"] == pytest.approx((1 - metrics["w"]) * metrics["kl_T1"]["value"] + metrics["w"] * metrics["kl_T2"]["value"])
    assert len(read_csv(run_dir / "samples.csv")) == 2000
    assert load_reports(run_dir) == reports


def test_run_is_deterministic(tmp_path, tiny_config_text):
    config = parse_config(tiny_config_text)
    a, _ = run_seeds(config, tmp_path / "a", parallel=False)
    b, _ = run_seeds(config, tmp_path / "b", parallel=True)
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    assert (a / "history_T1.csv").read_bytes() == (b / "history_T1.csv").read_bytes()


def test_multi_seed_run(tmp_path, tiny_config_text):
    config = parse_config(tiny_config_text)
    run_dir, reports = run_seeds(config, tmp_path, seeds=2, parallel=False)
    assert [r.seed for r in reports] == [0, 100]
    assert (run_dir / "seed_0" / "metrics.json").is_file()
    assert (run_dir / "seed_1" / "metrics.json").is_file()
    summary = json.loads((run_dir / "summary.json").read_text())
    assert set(summary) == {"Flow-T1", "Flow-T2", "Flow-L(p;q)"}
    assert len(load_reports(run_dir)) == 2
    root = json.loads((run_dir / "manifest.json").read_text())["files"]
    assert "summary.json" in root
    assert "seed_1/metrics.json" in root
    assert verify_manifest(run_dir) == []
    (run_dir / "summary.json").write_text("{}")
    assert verify_manifest(run_dir) == ["summary.json"]


def test_sample_run(tmp_path, tiny_config_text):
    config = parse_config(tiny_config_text)
    run_dir, _ = run_seeds(config, tmp_path, parallel=False)
    path = sample_run(run_dir, 300, seed=4)
    rows = read_csv(path)
    assert len(rows) == 300
    assert {r["chart"] for r in rows} <= {"1", "2"}
