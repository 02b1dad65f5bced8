import json
from pathlib import Path

import jsonschema
import pytest
from click.testing import CliRunner

from filterdual.errors import ConfigError
from filterdual.experiment.cli import cli
from filterdual.experiment.config import ExperimentConfig, load_schema

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def small_config(tmp_path, name="canonical.json", **changes):
    doc = json.loads((CONFIGS / name).read_text())
    doc["grid"]["n_steps"] = 200
    doc["bundle"]["N"] = 50
    doc["output_dir"] = str(tmp_path / "out")
    doc.update(changes)
    p = tmp_path / f"cfg_{name}"
    p.write_text(json.dumps(doc))
    return p


def run(*args, **kw):
    return CliRunner().invoke(cli, [str(a) for a in args], catch_exceptions=False, **kw)


def test_simulate_is_byte_identical_across_threads(tmp_path):
    cfg = small_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("simulate", "--config", cfg, "--out", a, "--threads", 1).exit_code == 0
    assert run("simulate", "--config", cfg, "--out", b, "--threads", 3).exit_code == 0
    files = sorted(p.name for p in (a / "bundle").iterdir())
    assert files
    for name in files:
        assert (a / "bundle" / name).read_bytes() == (b / "bundle" / name).read_bytes()


def test_empty_bundle_exits_with_config_error(tmp_path):
    cfg = small_config(tmp_path, bundle={"N": 0, "master_seed": 1})
    res = run("simulate", "--config", cfg)
    assert res.exit_code == 2
    assert "empty bundle" in res.output


def test_missing_bundle_is_named(tmp_path):
    cfg = small_config(tmp_path)
    res = run("dual", "--config", cfg, "--action", "gap")
    assert res.exit_code == 2
    assert "missing prerequisite" in res.output and "simulate" in res.output


def test_kalman_on_finite_model_is_a_typed_error(tmp_path):
    cfg = small_config(tmp_path)
    run("simulate", "--config", cfg)
    res = run("filter", "--config", cfg, "--kind", "kalman")
    assert res.exit_code == 2


def test_dual_gap_report_keys(tmp_path):
    cfg = small_config(tmp_path, policy={"kind": "zero"})
    run("simulate", "--config", cfg)
    res = run("dual", "--config", cfg, "--action", "gap")
    assert res.exit_code == 0, res.output
    doc = json.loads((tmp_path / "out" / "dual" / "gap" / "report.json").read_text())
    assert {"J", "half_mse", "gap", "se", "pass"} <= doc.keys()
    jsonschema.validate(doc, load_schema("gap_report"))


def test_filter_and_lq_outputs(tmp_path):
    cfg = small_config(tmp_path)
    run("simulate", "--config", cfg)
    assert run("filter", "--config", cfg, "--kind", "wonham").exit_code == 0
    summary = json.loads((tmp_path / "out" / "filter" / "wonham" / "summary.json").read_text())
    jsonschema.validate(summary, load_schema("filter_summary"))
    assert run("lq", "--config", cfg).exit_code == 0
    lq = json.loads((tmp_path / "out" / "lq" / "report.json").read_text())
    assert lq["value"] == pytest.approx(0.1181133164, abs=1e-6)


def test_policy_iteration_report(tmp_path):
    cfg = small_config(tmp_path, iterations=1)
    run("simulate", "--config", cfg)
    assert run("dual", "--config", cfg, "--action", "policy-iter").exit_code == 0
    doc = json.loads((tmp_path / "out" / "dual" / "policy-iter" / "report.json").read_text())
    assert len(doc["costs"]) == 2


def test_unstable_grid_filter_exits_with_numerical_failure(tmp_path):
    cfg = small_config(tmp_path, "ou_grid.json")
    doc = json.loads(cfg.read_text())
    doc["bundle"]["N"] = 2
    doc["grid"]["n_steps"] = 1000
    doc["filter"]["grid_n"] = 401
    cfg.write_text(json.dumps(doc))
    assert run("simulate", "--config", cfg).exit_code == 0
    res = run("filter", "--config", cfg, "--kind", "grid-kushner")
    assert res.exit_code == 3
    assert "numerical failure" in res.output


def test_config_round_trip(tmp_path):
    for name in ("canonical.json", "oscillator_lg.json", "ou_grid.json"):
        cfg = ExperimentConfig.load(CONFIGS / name)
        again = ExperimentConfig.from_dict(json.loads(cfg.dumps()), cfg.base_dir)
        assert again.to_dict() == cfg.to_dict()


def test_config_rejects_bad_documents(tmp_path):
    doc = json.loads((CONFIGS / "canonical.json").read_text())
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**doc, "tolerances": {"c1_gap_sigmas": -1.0}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**doc, "tolerances": {"no_such_key": 1.0}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**doc, "model_file": "m.json"})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("simulate", "--config", bad).exit_code == 2


def test_tampered_tolerance_fails_acceptance(tmp_path):
    cfg = small_config(tmp_path, tolerances={"c2_rel_error": 0.0})
    res = run("acceptance", "--config", cfg, "--profile", "quick", "--threads", 2)
    assert res.exit_code == 4
    assert "criterion  2 [FAIL]" in res.output
    report = json.loads((tmp_path / "out" / "acceptance" / "report_quick.json").read_text())
    jsonschema.validate(report, load_schema("acceptance_report"))
    assert not report["all_passed"]
