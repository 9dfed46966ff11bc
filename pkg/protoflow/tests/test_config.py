"""
Tests for run configuration loading and validation.
"""

import pytest

from protoflow.config import MatchConfig, RunConfig, SynthesisConfig, load_run_config


def test_defaults():
    config = load_run_config()
    assert config == RunConfig()
    assert config.out == "protoflow_out"
    assert config.gateway.backend == "rule"
    assert config.synthesis == SynthesisConfig()
    assert config.synthesis.max_iterations == 50


def test_file_values_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 4\ngateway:\n  budget: 10\nmatch:\n  floor: 0.5\n", encoding="utf-8")

    config = load_run_config(str(path), {"gateway.backend": "fallback", "out": None})
    assert config.seed == 4
    assert config.synthesis.seed == 4
    assert config.gateway.budget == 10
    assert config.gateway.backend == "fallback"
    assert config.match.floor == 0.5
    assert config.out == "protoflow_out"

    overridden = load_run_config(str(path), {"seed": 9})
    assert overridden.synthesis.seed == 9


def test_file_can_pin_synthesis_seed(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 4\nsynthesis:\n  seed: 12\n", encoding="utf-8")
    assert load_run_config(str(path)).synthesis.seed == 12


def test_invalid_config(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_run_config(str(tmp_path / "missing.yaml"))
    with pytest.raises(ValueError):
        load_run_config(None, {"gateway.backend": "oracle"})
    with pytest.raises(ValueError):
        load_run_config(None, {"gateway.cassette_mode": "rewind"})


def test_match_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        MatchConfig(w_exact=0.9, w_sem=0.3)
    assert MatchConfig(w_exact=0.5, w_sem=0.5).floor == 0.35
