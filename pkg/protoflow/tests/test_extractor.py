"""
Tests for the extraction gateway: prompt rendering, reply parsing, the rule
backend, service retries, budget and cassette record/replay.
"""

import json
import os

import pytest
import requests

from protoflow.config import GatewayConfig, get_service_config, mask_key
from protoflow.errors import BudgetExceeded, ExtractionUnavailable, MalformedReply
from protoflow.extractor import (
    Cassette,
    ExtractorGateway,
    RuleBackend,
    ScriptedClient,
    ServiceClient,
    _reply_text,
    parse_choice_reply,
    parse_list_reply,
    parse_ner_reply,
    parse_value_reply,
    render_missing_reagents_prompt,
    render_missing_value_prompt,
    render_ner_prompt,
    render_output_prompt,
    request_hash,
)
from protoflow.quantities import parse_quantity
from protoflow.tests.conftest import GOLDEN_DIR

GLYCOBLUE = {"action": "add", "reagent": ["glycoblue"], "output": ""}


def _golden(name):
    with open(os.path.join(GOLDEN_DIR, name), "r", encoding="utf-8") as f:
        return f.read().rstrip("\n")


class _Response:
    def __init__(self, status_code, body):
        self.status_code = status_code
        self._body = body
        self.text = json.dumps(body)

    def json(self):
        return self._body


def _client(**kwargs):
    return ServiceClient(endpoint="http://llm.test/v1", key="sk-test-1234", model="m1", **kwargs)


def test_output_prompt_matches_golden():
    assert render_output_prompt(GLYCOBLUE, ["RNA", "mRNA"]) == _golden("output_prompt.txt")


def test_missing_reagents_prompt_matches_golden():
    record = {"action": "stir", "reagent": ["", "salt"], "output": ""}
    prompt = render_missing_reagents_prompt(record, ["mixture_1", "broth"])
    assert prompt == _golden("missing_reagents_prompt.txt")


def test_missing_value_prompt_matches_golden():
    record = {"action": "titrate", "reagent": ["acid"], "volume": [""], "output": ""}
    prompt = render_missing_value_prompt(record, "volume", ["5mL"], "volume-mL")
    assert prompt == _golden("missing_value_prompt.txt")


def test_ner_prompt_matches_golden():
    prompt = render_ner_prompt("Heat the [broth] in the [pot].", ["reagent", "container", "temperature"])
    assert prompt == _golden("ner_prompt.txt")


def test_request_hash_depends_on_model():
    assert request_hash("m1", "p") == request_hash("m1", "p")
    assert request_hash("m1", "p") != request_hash("m2", "p")


def test_parse_ner_reply():
    labels = ["reagent", "container"]
    assert parse_ner_reply('[{"water": "Reagent"}, {"flask": "container"}]', labels) == [
        ("water", "reagent"), ("flask", "container"),
    ]
    salvaged = parse_ner_reply('Sure! [{"50 rpm": "speed"}] hope that helps', labels)
    assert salvaged == [("50 rpm", "other")]
    with pytest.raises(MalformedReply):
        parse_ner_reply("no entities here", labels)
    with pytest.raises(MalformedReply):
        parse_ner_reply('["water"]', labels)


def test_parse_choice_and_list_replies():
    assert parse_choice_reply('"RNA"', ["RNA", "mRNA"]) == "RNA"
    assert parse_choice_reply("mRNA", ["RNA", "mRNA"]) == "mRNA"
    with pytest.raises(MalformedReply):
        parse_choice_reply('"DNA"', ["RNA", "mRNA"])
    assert parse_list_reply('"NaCl", "agar", "NaCl"', ["NaCl", "solution"]) == ["NaCl"]
    assert parse_list_reply("", ["NaCl"]) == []


def test_parse_value_reply():
    assert parse_value_reply('"12 mL"', "volume-mL") == parse_quantity("12 mL")
    assert parse_value_reply('""', "volume-mL") is None
    assert parse_value_reply("", None) is None
    with pytest.raises(MalformedReply):
        parse_value_reply('"3 min"', "volume-mL")
    with pytest.raises(MalformedReply):
        parse_value_reply("no idea", None)


def test_rule_ner_finds_quantities_and_reagent_tail():
    found = RuleBackend().ner("Add 10 g of sodium chloride to the flask.", ["reagent", "mass"])
    assert found == [("10 g", "mass"), ("sodium chloride", "reagent")]


def test_rule_ner_uses_lexicon():
    found = RuleBackend(["Buffer"]).ner("Wash twice with buffer.", ["reagent"])
    assert ("buffer", "reagent") in found


def test_rule_output_and_missing_reagents():
    rule = RuleBackend()
    assert rule.choose_output(GLYCOBLUE, ["RNA", "glycoblue pellet"]) == "glycoblue pellet"
    record = {"action": "stir", "reagent": ["", ""], "output": ""}
    assert rule.missing_reagents(record, ["a", "b", "c"]) == ["c", "b"]
    assert rule.missing_reagents({"action": "stir", "reagent": ["x"]}, ["a"]) == []


def test_gateway_rejects_bad_construction():
    with pytest.raises(ValueError):
        ExtractorGateway(backend="oracle")
    with pytest.raises(ValueError):
        ExtractorGateway(backend="service")


def test_gateway_argument_checks():
    gateway = ExtractorGateway()
    with pytest.raises(ValueError):
        gateway.ner_extract("Add water.", [])
    with pytest.raises(ValueError):
        gateway.query_output(GLYCOBLUE, [])
    assert gateway.query_output(GLYCOBLUE, ["RNA"]) == "RNA"
    assert gateway.query_missing_reagents(GLYCOBLUE, []) == []


def test_single_candidate_skips_the_service():
    client = ScriptedClient()
    gateway = ExtractorGateway(backend="service", client=client)
    assert gateway.query_output(GLYCOBLUE, ["RNA"]) == "RNA"
    assert client.call_count == 0


def test_service_choice_uses_the_output_prompt():
    client = ScriptedClient(replies=['"RNA"'])
    gateway = ExtractorGateway(backend="service", client=client)
    assert gateway.query_output(GLYCOBLUE, ["RNA", "mRNA"]) == "RNA"
    assert client.prompts == [render_output_prompt(GLYCOBLUE, ["RNA", "mRNA"])]


def test_malformed_reply_is_asked_again():
    client = ScriptedClient(replies=["I think it's water", '[{"water": "reagent"}]'])
    gateway = ExtractorGateway(backend="service", client=client)
    assert gateway.ner_extract("Add [water].", ["reagent"]) == [("water", "reagent")]
    assert client.call_count == 2


def test_malformed_ner_reply_raises_in_service_mode():
    client = ScriptedClient(default="nothing to see")
    gateway = ExtractorGateway(backend="service", client=client)
    with pytest.raises(MalformedReply):
        gateway.ner_extract("Add water.", ["reagent"])
    assert client.call_count == 2


def test_malformed_choice_degrades_to_rule_answer():
    client = ScriptedClient(default='"DNA"')
    gateway = ExtractorGateway(backend="service", client=client)
    assert gateway.query_output(GLYCOBLUE, ["RNA", "glycoblue pellet"]) == "glycoblue pellet"
    assert len(gateway.degraded) == 1
    assert gateway.degraded[0].startswith("output:")


def test_fallback_backend_degrades_when_unavailable():
    client = _client(budget=0)
    gateway = ExtractorGateway(backend="fallback", client=client)
    found = gateway.ner_extract("Add 35 mL water.", ["reagent", "volume"])
    assert ("35 mL", "volume") in found
    assert gateway.degraded and gateway.degraded[0].startswith("ner:")


def test_budget_is_enforced():
    with pytest.raises(BudgetExceeded):
        _client(budget=0).complete("prompt")
    gateway = ExtractorGateway(backend="service", client=_client(budget=0))
    with pytest.raises(ExtractionUnavailable):
        gateway.ner_extract("Add water.", ["reagent"])


def test_service_retries_then_gives_up(monkeypatch):
    calls = []

    def failing_post(url, json=None, headers=None, timeout=None):
        calls.append(url)
        raise requests.ConnectionError("refused")

    monkeypatch.setattr(requests, "post", failing_post)
    with pytest.raises(ExtractionUnavailable):
        _client(retries=2).complete("prompt")
    assert len(calls) == 3


def test_service_recovers_after_server_error(monkeypatch):
    responses = [_Response(503, {"error": "busy"}), _Response(200, {"text": '"RNA"'})]
    seen = {}

    def post(url, json=None, headers=None, timeout=None):
        seen["headers"] = headers
        seen["payload"] = json
        return responses.pop(0)

    monkeypatch.setattr(requests, "post", post)
    client = _client(retries=1)
    assert client.complete("prompt") == '"RNA"'
    assert seen["headers"]["Authorization"] == "Bearer sk-test-1234"
    assert seen["payload"] == {"model": "m1", "prompt": "prompt", "max_tokens": 256}
    assert client.requests_made == 1


def test_reply_text_shapes():
    assert _reply_text({"text": "a"}) == "a"
    assert _reply_text({"choices": [{"text": "b"}]}) == "b"
    assert _reply_text({"choices": [{"message": {"content": "c"}}]}) == "c"
    with pytest.raises(MalformedReply):
        _reply_text({"choices": []})


def test_cassette_record_then_replay(tmp_path, monkeypatch):
    path = str(tmp_path / "cassette.json")
    monkeypatch.setattr(
        requests, "post",
        lambda url, json=None, headers=None, timeout=None: _Response(200, {"choices": [{"text": '"mRNA"'}]}),
    )
    recording = ExtractorGateway(backend="service", client=_client(cassette=Cassette(path, "record")))
    assert recording.query_output(GLYCOBLUE, ["RNA", "mRNA"]) == "mRNA"
    recording.save()

    with open(path, "r", encoding="utf-8") as f:
        entries = json.load(f)
    assert len(entries) == 1
    assert entries[0]["request-hash"] == request_hash("m1", render_output_prompt(GLYCOBLUE, ["RNA", "mRNA"]))

    def offline(*args, **kwargs):
        raise AssertionError("replay must not touch the network")

    monkeypatch.setattr(requests, "post", offline)
    replaying = ExtractorGateway(backend="service", client=_client(cassette=Cassette(path, "replay")))
    assert replaying.query_output(GLYCOBLUE, ["RNA", "mRNA"]) == "mRNA"
    with pytest.raises(ExtractionUnavailable):
        replaying.query_output(GLYCOBLUE, ["DNA", "mRNA"])


def test_cassette_modes(tmp_path):
    with pytest.raises(ValueError):
        Cassette(str(tmp_path / "c.json"), "rewind")
    with pytest.raises(FileNotFoundError):
        Cassette(str(tmp_path / "missing.json"), "replay")


def test_replay_config_needs_no_credentials(tmp_path, monkeypatch):
    path = tmp_path / "cassette.json"
    path.write_text("[]", encoding="utf-8")
    monkeypatch.delenv("PROTOFLOW_LLM_ENDPOINT", raising=False)
    monkeypatch.delenv("PROTOFLOW_LLM_KEY", raising=False)
    config = GatewayConfig(backend="service", cassette=str(path), cassette_mode="replay")
    gateway = ExtractorGateway.from_config(config)
    assert gateway.client.cassette.mode == "replay"


def test_service_config_from_environment(monkeypatch):
    monkeypatch.delenv("PROTOFLOW_LLM_ENDPOINT", raising=False)
    monkeypatch.delenv("PROTOFLOW_LLM_KEY", raising=False)
    with pytest.raises(ValueError) as excinfo:
        get_service_config()
    assert "PROTOFLOW_LLM_ENDPOINT" in str(excinfo.value)

    monkeypatch.setenv("PROTOFLOW_LLM_ENDPOINT", "http://llm.test/v1")
    monkeypatch.setenv("PROTOFLOW_LLM_KEY", "sk-secret-9876")
    monkeypatch.delenv("PROTOFLOW_LLM_MODEL", raising=False)
    config = get_service_config()
    assert config["endpoint"] == "http://llm.test/v1"
    assert config["model"] == "gpt-3.5-turbo"
    assert mask_key(config["key"]) == "***9876"
    assert mask_key("") == "<unset>"
