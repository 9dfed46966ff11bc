"""
Tests for protocol segmentation, operation matching and entity extraction.
"""

import pytest

from protoflow.config import MatchConfig
from protoflow.errors import NoActionFound
from protoflow.preprocess import (
    ProtocolText,
    extract_actions,
    extract_entities,
    load_protocol,
    mask_markup,
    match_operation,
    parse_protocol,
    preprocess_protocol,
    segment_protocol,
    trigram_similarity,
)
from protoflow.quantities import parse_quantity
from protoflow.tests.conftest import example_path, read_example

FIRST_STEP = "Add the @oil@ to a large saucepan, heat to <300 F>, and saute the @onions@."


def test_front_matter():
    protocol = parse_protocol(read_example("pasta_bolognese.txt"))
    assert protocol.metadata["title"] == "Pasta Bolognese"
    assert protocol.metadata["yield"] == "2 plates"
    assert protocol.metadata["ingredients"] == [
        "pasta", "oil", "garlic", "onions", "beef", "bacon",
        "wine", "carrots", "tomato puree", "sweet pepper", "parmesan",
    ]


def test_steps_index_the_raw_text():
    protocol = load_protocol(example_path("pasta_bolognese.txt"))
    assert len(protocol.steps) == 7
    for step in protocol.steps:
        assert protocol.raw[step.start:step.end] == step.text
    assert protocol.steps[0].text == FIRST_STEP


def test_numbered_steps():
    protocol = parse_protocol(read_example("capacity_protocol.txt"))
    assert [s.marker for s in protocol.steps] == ["1.", "2."]
    assert protocol.steps[1].text == "Add 25 mL water to the flask."


def test_single_paragraph_splits_into_sentences():
    protocol = parse_protocol("Add the oil. Heat the pan to 300 F.")
    assert [s.text for s in protocol.steps] == ["Add the oil.", "Heat the pan to 300 F."]


@pytest.mark.parametrize("text", ["", "   \n\n  \n"])
def test_empty_protocol_has_no_steps(text):
    assert parse_protocol(text).steps == []


def test_mask_markup_keeps_offsets():
    masked = mask_markup(FIRST_STEP)
    assert len(masked) == len(FIRST_STEP)
    assert "@" not in masked and "<" not in masked


def test_match_operation_exact_and_synonym(cooking_spec):
    assert match_operation("Add", cooking_spec) == [("add", 1.0)]
    assert match_operation("pour", cooking_spec) == [("add", 0.7)]
    assert [name for name, _ in match_operation("mix", cooking_spec)] == ["stir"]
    assert match_operation("banana", cooking_spec) == []


def test_match_operation_floor(cooking_spec):
    loose = MatchConfig(w_exact=0.5, w_sem=0.5, floor=0.3)
    ranking = match_operation("boiling", cooking_spec, loose)
    assert ranking[0][0] == "boil"
    assert all(score >= 0.3 for _, score in ranking)


def test_trigram_similarity():
    assert trigram_similarity("heat", "heat") == pytest.approx(1.0)
    assert trigram_similarity("heat", "drain") == trigram_similarity("drain", "heat")
    assert trigram_similarity("", "heat") == 0.0


def test_extract_actions(cooking_spec):
    actions = extract_actions(FIRST_STEP, cooking_spec)
    assert [candidates[0][0] for _, candidates in actions] == ["add", "heat", "saute"]
    (start, end), _ = actions[2]
    assert FIRST_STEP[start:end] == "saute"


def test_negated_clause_is_not_an_action(cooking_spec):
    actions = extract_actions("Keep on medium to high heat, and don't stir.", cooking_spec)
    assert [candidates[0][0] for _, candidates in actions] == ["heat"]


def test_no_action_found(cooking_spec):
    with pytest.raises(NoActionFound):
        extract_actions("Wait patiently.", cooking_spec)


def test_extract_entities(cooking_spec, gateway):
    entities = extract_entities(FIRST_STEP, gateway, cooking_spec, offset=100)
    labeled = {(e.surface, e.label) for e in entities}
    assert {("oil", "reagent"), ("large saucepan", "container"),
            ("300 F", "temperature"), ("onions", "reagent")} <= labeled
    for entity in entities:
        assert FIRST_STEP[entity.start - 100:entity.end - 100] == entity.surface
    heat = next(e for e in entities if e.label == "temperature")
    assert heat.value == parse_quantity("300F")


def test_alias_phrase_becomes_entity(cooking_spec, gateway):
    entities = extract_entities("Keep on medium to high heat.", gateway, cooking_spec)
    alias = next(e for e in entities if e.source == "alias")
    assert alias.surface == "medium to high heat"
    assert alias.parameter == "temperature"
    assert alias.value == parse_quantity("325F")


def test_preprocess_recipe(cooking_spec, gateway):
    raw = read_example("pasta_bolognese.txt")
    sequence = preprocess_protocol(raw, cooking_spec, gateway)
    units = sequence.units()
    assert [u.verb.lower() for u in units] == [
        "add", "heat", "saute", "add", "keep", "add", "fry", "remove",
        "boil", "drain", "add", "add", "simmer",
    ]
    assert [u.verb.lower() for u in units if u.fold] == ["remove", "drain"]
    assert sequence.flags == []
    assert sequence.metadata["yield"] == "2 plates"
    for unit in units:
        assert raw[unit.start:unit.end] == unit.verb
        for entity in unit.entities:
            assert raw[entity.start:entity.end] == entity.surface


def test_recipe_signals(cooking_spec, gateway):
    sequence = preprocess_protocol(read_example("pasta_bolognese.txt"), cooking_spec, gateway)
    units = sequence.units()
    garlic = units[3]
    assert [s.kind for s in garlic.signals] == ["delay"]
    carrots = units[10]
    guard = next(s for s in carrots.signals if s.kind == "guard")
    assert guard.predicate == "beef"


def test_step_without_verb_is_flagged(cooking_spec, gateway):
    sequence = preprocess_protocol("Wait patiently.\n\nAdd the salt.", cooking_spec, gateway)
    assert len(sequence.flags) == 1
    assert sequence.flags[0].step == 0
    assert sequence.flags[0].reason.startswith("NoActionFound")
    units = sequence.units()
    assert units[0].placeholder
    assert units[1].candidates[0][0] == "add"


def test_segment_blank_line_blocks():
    raw = "Boil the water.\n\nAdd the pasta. Stir once.\n"
    protocol = segment_protocol(ProtocolText(raw=raw))
    assert [s.text for s in protocol.steps] == ["Boil the water.", "Add the pasta. Stir once."]
    for step in protocol.steps:
        assert raw[step.start:step.end] == step.text


def test_signals_record_the_actions_they_govern(cooking_spec, gateway):
    sequence = preprocess_protocol("If the sauce is thin, stir the sauce until smooth and add the flour.",
                                   cooking_spec, gateway)
    stir, add = sequence.units()
    branch = next(s for s in stir.signals if s.kind == "branch")
    loop = next(s for s in stir.signals if s.kind == "loop")
    assert branch.governs == [0, 1]
    assert loop.governs == [0]
    assert add.signals == []
