"""
End-to-end tests: every stage on the bundled protocols, and the CLI runner.
"""

import json
import json as jsonlib
import os

import pytest
import requests

from protoflow.config import RunConfig
from protoflow.dsl import render_listing
from protoflow.execution import load_resources
from protoflow.extractor import Cassette, ExtractorGateway, RuleBackend, ServiceClient
from protoflow.pipeline import (
    EXIT_ERROR,
    EXIT_OK,
    EXIT_VIOLATIONS,
    review_report,
    summarize,
    translate,
    translate_many,
    write_artifacts,
)
from protoflow.scripts.run_pipeline import main
from protoflow.tests.conftest import example_path, read_example


@pytest.fixture(scope="module")
def pasta_result():
    from protoflow.dsl import load_dsl_spec

    spec = load_dsl_spec(example_path("cooking_spec.yaml"))
    return translate(read_example("pasta_bolognese.txt"), spec, stem="pasta_bolognese")


def test_recipe_end_to_end(pasta_result):
    assert pasta_result.validation.ok
    assert [i.operation for i in pasta_result.completed.instructions] == [
        "add", "heat", "saute", "add", "heat", "add", "heat", "fry", "boil", "add", "add", "simmer",
    ]
    # "Yield: 2 plates" names no reagent; the side components are never combined with the sauce
    assert not pasta_result.flow.accept
    assert "bacon" in pasta_result.flow.dangling
    assert len(pasta_result.flow.consumed_by_output) == 1
    assert pasta_result.duality.passed
    assert pasta_result.violations == []
    assert pasta_result.exit_code == EXIT_OK


def test_recipe_is_deterministic(pasta_result, cooking_spec):
    again = translate(read_example("pasta_bolognese.txt"), cooking_spec, stem="pasta_bolognese")
    assert render_listing(again.completed) == render_listing(pasta_result.completed)
    assert again.divergence == pasta_result.divergence


def test_overflow_exits_with_violations(chemistry_spec):
    resources = load_resources(example_path("capacity_resources.yaml"))
    result = translate(read_example("capacity_protocol.txt"), chemistry_spec, resources=resources)
    assert result.validation.ok
    assert [v.kind for v in result.violations] == ["C_s"]
    assert not result.satisfied
    assert result.exit_code == EXIT_VIOLATIONS


def test_validate_only_stops_after_syntax(cooking_spec):
    result = translate(read_example("pasta_bolognese.txt"), cooking_spec, validate_only=True)
    assert result.validation.ok
    assert result.completed is None
    assert result.exit_code == EXIT_OK


def test_write_artifacts(pasta_result, tmp_path):
    written = write_artifacts(pasta_result, str(tmp_path))
    names = sorted(os.path.basename(path) for path in written)
    assert names == sorted([
        "pasta_bolognese.structured.json",
        "pasta_bolognese.structured.txt",
        "pasta_bolognese.completed.json",
        "pasta_bolognese.completed.txt",
        "pasta_bolognese.records.json",
        "pasta_bolognese.pdg.json",
        "pasta_bolognese.pdg.dot",
        "pasta_bolognese.trace.json",
        "pasta_bolognese.trace.txt",
        "pasta_bolognese.review.txt",
    ])
    records = json.loads((tmp_path / "pasta_bolognese.records.json").read_text(encoding="utf-8"))
    assert records[0]["action"] == "add"
    assert (tmp_path / "pasta_bolognese.trace.txt").read_text(encoding="utf-8").endswith("satisfied: yes\n")


def test_text_only_artifacts(pasta_result, tmp_path):
    written = write_artifacts(pasta_result, str(tmp_path), formats=("text",))
    assert all(path.endswith(".txt") for path in written)


def test_review_report_names_dangling_side_components(pasta_result):
    report = review_report(pasta_result)
    assert "FLOW dangling: " in report
    assert "DUALITY" not in report


def test_translate_many_keeps_input_order(cooking_spec, gateway, tmp_path):
    missing = str(tmp_path / "missing.txt")
    outcomes = translate_many([example_path("pasta_bolognese.txt"), missing], cooking_spec, gateway,
                              RunConfig(), max_workers=2)
    assert [path for path, _, _ in outcomes] == [example_path("pasta_bolognese.txt"), missing]
    assert outcomes[0][1] is not None and outcomes[0][2] is None
    assert outcomes[1][1] is None and isinstance(outcomes[1][2], FileNotFoundError)
    assert summarize([outcomes[0][1]]) == {"protocols": 1, "completed": 1, "accepted": 0, "satisfied": 1}


def _capacity_args(tmp_path):
    return [
        "--dsl", example_path("chemistry_spec.yaml"),
        "--resources", example_path("capacity_resources.yaml"),
        "--out", str(tmp_path),
    ]


def test_cli_translate_reports_overflow(tmp_path, capsys):
    code = main(["translate", example_path("capacity_protocol.txt")] + _capacity_args(tmp_path))
    assert code == EXIT_VIOLATIONS
    out = capsys.readouterr().out
    assert "✓ Program is syntax-verified" in out
    assert "[C_s]" in out
    assert (tmp_path / "capacity_protocol.trace.json").exists()


def test_cli_simulate_with_whatif(tmp_path, capsys):
    main(["translate", example_path("capacity_protocol.txt")] + _capacity_args(tmp_path))
    capsys.readouterr()
    completed = str(tmp_path / "capacity_protocol.completed.json")
    code = main(["simulate", completed, "--whatif", "delete:1"] + _capacity_args(tmp_path))
    assert code == EXIT_VIOLATIONS
    out = capsys.readouterr().out
    assert "What if: delete:1" in out
    assert "- " in out


def test_cli_validate_only(tmp_path, capsys):
    code = main(["translate", example_path("pasta_bolognese.txt"), "--validate-only", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert "Validation complete" in capsys.readouterr().out


def test_cli_missing_protocol(tmp_path, capsys):
    code = main(["translate", str(tmp_path / "nope.txt"), "--out", str(tmp_path)])
    assert code == EXIT_ERROR
    assert "Protocol file not found" in capsys.readouterr().out


def test_cli_graph_and_flow(tmp_path, capsys):
    listing = example_path("pasta_bolognese_structured.txt")
    assert main(["flow", listing, "--out", str(tmp_path)]) == EXIT_OK
    completed = str(tmp_path / "pasta_bolognese_structured.completed.json")
    assert os.path.exists(completed)
    assert main(["graph", completed, "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "pasta_bolognese_structured.pdg.dot").exists()
    assert "Duality" in capsys.readouterr().out


def test_cli_eval(tmp_path, capsys):
    pred_dir = tmp_path / "predictions"
    gold_dir = tmp_path / "references"
    pred_dir.mkdir()
    gold_dir.mkdir()
    for directory in (pred_dir, gold_dir):
        (directory / "pasta.txt").write_text(read_example("pasta_bolognese_gold.txt"), encoding="utf-8")
    output = tmp_path / "scores.csv"
    code = main(["eval", str(pred_dir), str(gold_dir), "--metric", "exact", "-o", str(output)])
    assert code == EXIT_OK
    assert output.exists()
    assert "Aggregate (per protocol): 1.0000" in capsys.readouterr().out


def _tree(directory):
    return {path.name: path.read_bytes() for path in sorted(directory.iterdir())}


def test_cli_runs_are_byte_identical(tmp_path, capsys):
    first, second = tmp_path / "first", tmp_path / "second"
    for out in (first, second):
        args = ["--dsl", example_path("chemistry_spec.yaml"),
                "--resources", example_path("capacity_resources.yaml"), "--out", str(out), "--seed", "3"]
        assert main(["translate", example_path("capacity_protocol.txt")] + args) == EXIT_VIOLATIONS
    capsys.readouterr()
    assert "capacity_protocol.trace.json" in _tree(first)
    assert _tree(first) == _tree(second)


class _Reply:
    status_code = 200

    def __init__(self, text):
        self.text = text

    def json(self):
        return {"choices": [{"text": self.text}]}


def _fake_service(url, json=None, headers=None, timeout=None):
    """Answers entity prompts the way the rule backend would, everything else with an empty string."""
    prompt = json["prompt"]
    if prompt.startswith("Given entity label set:"):
        labels = prompt.split("\n", 1)[0][len("Given entity label set: "):].rstrip(".").split(", ")
        query = prompt.rsplit("Text: ", 1)[1].rsplit("\nAnswer:", 1)[0]
        entities = [{surface: label} for surface, label in RuleBackend().ner(query, labels)]
        return _Reply(jsonlib.dumps(entities))
    return _Reply('""')


def test_cassette_replay_reproduces_translation(cooking_spec, tmp_path, monkeypatch):
    path = str(tmp_path / "replies.json")

    def service(mode):
        client = ServiceClient(endpoint="http://llm.test/v1", key="sk-test-1234", model="m1",
                               cassette=Cassette(path, mode))
        return ExtractorGateway(backend="service", client=client)

    monkeypatch.setattr(requests, "post", _fake_service)
    recording = service("record")
    recorded = translate(read_example("pasta_bolognese.txt"), cooking_spec, recording, stem="pasta")
    recording.save()
    assert recording.client.requests_made > 0

    def offline(*args, **kwargs):
        raise AssertionError("replay must not touch the network")

    monkeypatch.setattr(requests, "post", offline)
    replayed = translate(read_example("pasta_bolognese.txt"), cooking_spec, service("replay"), stem="pasta")

    write_artifacts(recorded, str(tmp_path / "recorded"))
    write_artifacts(replayed, str(tmp_path / "replayed"))
    assert _tree(tmp_path / "recorded") == _tree(tmp_path / "replayed")
    assert render_listing(replayed.completed) == render_listing(recorded.completed)
