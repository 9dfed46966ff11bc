"""
Tests for key-value evaluation of programs.
"""

import json
import shutil

import pytest

from protoflow.config import EvalConfig
from protoflow.dsl import parse_listing, program_to_dict
from protoflow.evaluation import (
    DEFAULT_KEY_WEIGHTS,
    bleu,
    exact,
    kv_similarity,
    load_records,
    pair_scores,
    rouge_l,
    score_directories,
    to_canonical,
)
from protoflow.tests.conftest import example_path, read_example

GOLD_RECORD = {"action": "add", "reagent": "oil", "container": "pan", "temperature": "300F"}


def test_canonical_records(cooking_spec):
    program = parse_listing(read_example("pasta_bolognese_gold.txt"), cooking_spec)
    records = to_canonical(program)
    assert len(records) == len(program)
    assert records[0] == {
        "action": "add",
        "slot": "oil",
        "target": "large saucepan",
        "container": "plate_1",
        "output": "mixture_1",
    }
    assert list(records[0])[0] == "action"
    assert records[1]["temperature"] == "300F"


def test_token_metrics():
    assert rouge_l("the cat sat".split(), "the cat".split()) == pytest.approx(0.8)
    assert rouge_l([], []) == 1.0
    assert rouge_l(["a"], []) == 0.0
    assert bleu(["300f"], ["300f"]) == pytest.approx(1.0)
    assert bleu(["300f"], ["90f"]) == 0.0
    assert exact(["a", "b"], ["a", "b"]) == 1.0
    assert exact(["a", "b"], ["b", "a"]) == 0.0


def test_identical_records_score_one():
    assert kv_similarity([GOLD_RECORD], [GOLD_RECORD]) == pytest.approx(1.0)
    assert kv_similarity([], []) == 1.0


def test_wrong_temperature_costs_its_weight():
    cold = dict(GOLD_RECORD, temperature="90F")
    # action 3, reagent 2, container 1, temperature 2
    assert kv_similarity([cold], [GOLD_RECORD]) == pytest.approx(6 / 8)
    assert kv_similarity([cold], [GOLD_RECORD]) < kv_similarity([GOLD_RECORD], [GOLD_RECORD])


def test_configured_weights_default_to_the_scorer_weights():
    cold = dict(GOLD_RECORD, temperature="90F")
    configured = EvalConfig().key_weights
    assert configured == DEFAULT_KEY_WEIGHTS
    assert configured is not DEFAULT_KEY_WEIGHTS
    assert kv_similarity([cold], [GOLD_RECORD], weights=configured) == kv_similarity([cold], [GOLD_RECORD])
    assert EvalConfig(key_weights={"action": 1.0}).key_weights == {"action": 1.0}


def test_missing_key_scores_zero_for_that_key():
    partial = {key: value for key, value in GOLD_RECORD.items() if key != "container"}
    assert kv_similarity([partial], [GOLD_RECORD]) == pytest.approx(7 / 8)
    assert kv_similarity([partial], [GOLD_RECORD], weights={}) == pytest.approx(0.75)


def test_unaligned_tail_scores_zero():
    assert pair_scores([GOLD_RECORD], [GOLD_RECORD, GOLD_RECORD]) == [pytest.approx(1.0), 0.0]
    assert kv_similarity([GOLD_RECORD], [GOLD_RECORD, GOLD_RECORD]) == pytest.approx(0.5)


def test_unknown_metric():
    with pytest.raises(ValueError):
        kv_similarity([GOLD_RECORD], [GOLD_RECORD], metric="meteor")


def test_load_records_shapes(tmp_path, cooking_spec):
    with pytest.raises(FileNotFoundError):
        load_records(str(tmp_path / "missing.json"))

    program = parse_listing(read_example("pasta_bolognese_gold.txt"), cooking_spec)
    artifact = tmp_path / "pasta.completed.json"
    artifact.write_text(json.dumps(program_to_dict(program)), encoding="utf-8")
    assert load_records(str(artifact)) == to_canonical(program)

    listing = load_records(example_path("pasta_bolognese_gold.txt"))
    assert [r["action"] for r in listing] == [r["action"] for r in to_canonical(program)]

    bad = tmp_path / "bad.json"
    bad.write_text('{"steps": []}', encoding="utf-8")
    with pytest.raises(ValueError):
        load_records(str(bad))


def test_score_directories(tmp_path):
    pred_dir = tmp_path / "predictions"
    gold_dir = tmp_path / "references"
    pred_dir.mkdir()
    gold_dir.mkdir()
    shutil.copy(example_path("pasta_bolognese_gold.txt"), pred_dir / "pasta.txt")
    shutil.copy(example_path("pasta_bolognese_gold.txt"), gold_dir / "pasta.txt")
    (pred_dir / "soup.json").write_text(json.dumps([GOLD_RECORD]), encoding="utf-8")
    (gold_dir / "soup.json").write_text(json.dumps([GOLD_RECORD, GOLD_RECORD]), encoding="utf-8")
    (pred_dir / "orphan.json").write_text("[]", encoding="utf-8")

    df = score_directories(str(pred_dir), str(gold_dir))
    assert list(df["protocol"]) == ["pasta", "soup"]
    scores = dict(zip(df["protocol"], df["score"]))
    assert scores["pasta"] == pytest.approx(1.0)
    assert scores["soup"] == pytest.approx(0.5)
    assert df.attrs["aggregate_per_protocol"] == pytest.approx(0.75)
    pasta_pairs = int(df.loc[df["protocol"] == "pasta", "pairs"].iloc[0])
    expected_per_step = (pasta_pairs + 1) / (pasta_pairs + 2)
    assert df.attrs["aggregate_per_step"] == pytest.approx(expected_per_step)


def test_score_directories_needs_both(tmp_path):
    with pytest.raises(FileNotFoundError):
        score_directories(str(tmp_path / "nope"), str(tmp_path))
