"""
Tests for the Protocol Dependence Graph and its exports.
"""

import copy
import json

import pytest

from protoflow.dsl import ControlWrapper, DslProgram, parse_listing
from protoflow.errors import InconsistentInputs
from protoflow.pdg import (
    SINK_NODE,
    SOURCE_NODE,
    build_pdg,
    check_duality,
    export_pdg,
    non_loop_acyclic,
    pdg_from_json,
)
from protoflow.reagent_flow import analyze_flow, complete_implied_steps, complete_parameters
from protoflow.tests.conftest import flow_corpus


def _pdg(program, spec, gateway, **kwargs):
    return build_pdg(program, analyze_flow(program, gateway, spec), **kwargs)


def test_minimal_chain_graphs(minimal_chain, lab_spec, gateway):
    pdg = _pdg(minimal_chain, lab_spec, gateway, spec_name="lab", seed=7)
    assert pdg.op_graph.number_of_nodes() == 2
    assert pdg.op_graph.number_of_edges() == 1
    assert pdg.flow_edges() == [(0, 1, "mixture_1")]
    assert pdg.reagent_nodes() == ["mixture_1"]
    assert pdg.reagent_graph.number_of_edges() == 2
    assert pdg.meta["spec"] == "lab"
    assert pdg.meta["seed"] == 7
    assert check_duality(pdg).passed


def test_minimal_chain_dot(minimal_chain, lab_spec, gateway):
    dot = export_pdg(_pdg(minimal_chain, lab_spec, gateway), "dot")
    assert dot.startswith("digraph pdg {")
    assert dot.count("shape=") == 3
    assert dot.count("->") == 3
    assert '"op_0" -> "op_1" [label="mixture_1"] ;' in dot


def test_empty_program_dot(lab_spec, gateway):
    pdg = _pdg(DslProgram(), lab_spec, gateway)
    assert export_pdg(pdg, "dot") == "digraph pdg {\n}\n"
    assert check_duality(pdg).passed


def test_unknown_export_format(minimal_chain, lab_spec, gateway):
    with pytest.raises(ValueError):
        export_pdg(_pdg(minimal_chain, lab_spec, gateway), "xml")


def test_json_export_reimports(minimal_chain, lab_spec, gateway):
    pdg = _pdg(minimal_chain, lab_spec, gateway)
    text = export_pdg(pdg, "json")
    data = json.loads(text)
    assert set(data) == {"op_nodes", "op_edges", "reagent_nodes", "reagent_edges", "cross_links", "meta"}
    assert data["cross_links"]["op_edges"] == [{"op_edge": [0, 1, "mixture_1"], "reagent_node": "mixture_1"}]

    restored = pdg_from_json(text)
    assert restored.op_graph.number_of_nodes() == pdg.op_graph.number_of_nodes()
    assert restored.op_graph.number_of_edges() == pdg.op_graph.number_of_edges()
    assert restored.reagent_graph.number_of_edges() == pdg.reagent_graph.number_of_edges()
    assert check_duality(restored).passed


def test_flow_for_another_program_is_rejected(minimal_chain, lab_spec, gateway):
    flow = analyze_flow(minimal_chain, gateway, lab_spec)
    shorter = DslProgram(instructions=minimal_chain.instructions[:1])
    with pytest.raises(InconsistentInputs):
        build_pdg(shorter, flow)


def test_duality_reports_tampering(minimal_chain, lab_spec, gateway):
    pdg = _pdg(minimal_chain, lab_spec, gateway)
    pdg.reagent_graph.add_node("stray")
    report = check_duality(pdg)
    assert not report.passed
    assert report.unmatched_reagent_nodes == ["stray"]
    assert "stray" in report.describe()


def test_shared_container_orders_instructions(lab_spec, gateway):
    program = parse_listing(
        'titrate(target = "acid", volume = 5mL);\n'
        'mix(target = "base", container = "flask");\n'
        'mix(target = "salt", container = "flask");\n',
        lab_spec,
    )
    pdg = _pdg(program, lab_spec, gateway)
    kinds = {(u, v): kind for u, v, kind in pdg.op_graph.edges(data="kind")}
    assert kinds == {(1, 2): "order"}


def test_loop_edge_is_the_only_cycle(lab_spec, gateway):
    program = parse_listing('mix(target = "a", emit = mixture_1);\ntitrate(target = mixture_1);', lab_spec)
    program.controls = [ControlWrapper("loop", "until", 0, 1, predicate="pink")]
    pdg = _pdg(program, lab_spec, gateway)
    assert pdg.op_graph.has_edge(1, 0)
    assert non_loop_acyclic(pdg)


def test_completed_recipe_keeps_duality(pasta_structured, cooking_spec, gateway):
    program = complete_parameters(complete_implied_steps(pasta_structured, cooking_spec), cooking_spec, gateway)
    program.metadata["yield"] = "2 plates"
    pdg = _pdg(program, cooking_spec, gateway, spec_name=cooking_spec.name)
    assert check_duality(pdg).passed
    assert non_loop_acyclic(pdg)
    assert sorted(pdg.reagent_nodes())[:1] == ["bacon"]
    assert "mixture_5" in pdg.meta["boundary"]


def _carried(pdg):
    boundary = set(pdg.meta["boundary"])
    return [(u, v, reagent) for u, v, reagent in pdg.flow_edges() if reagent not in boundary]


def _drop_carried_node(pdg):
    pdg.reagent_graph.remove_node(_carried(pdg)[0][2])


def _duplicate_flow_edge(pdg):
    u, _, reagent = _carried(pdg)[0]
    pdg.op_graph.add_edge(u, u, key=reagent, kind="flow", reagent=reagent)


def _relabel_flow_edge(pdg):
    u, v, reagent = _carried(pdg)[0]
    pdg.op_graph.remove_edge(u, v, key=reagent)
    pdg.op_graph.add_edge(u, v, key="ghost", kind="flow", reagent="ghost")


def _drop_reagent_edge(pdg):
    u, v, key = next(iter(pdg.reagent_graph.edges(keys=True)))
    pdg.reagent_graph.remove_edge(u, v, key=key)


MUTATIONS = {
    "stray reagent node": (False, lambda pdg: pdg.reagent_graph.add_node("stray")),
    "dropped op node": (False, lambda pdg: pdg.op_graph.remove_node(max(pdg.op_graph.nodes))),
    "extra op node": (False, lambda pdg: pdg.op_graph.add_node(pdg.op_graph.number_of_nodes())),
    "dropped reagent edge": (False, _drop_reagent_edge),
    "doubled reagent edge": (False, lambda pdg: pdg.reagent_graph.add_edge(SINK_NODE, SOURCE_NODE, key=0)),
    "dropped carried node": (True, _drop_carried_node),
    "duplicated flow edge": (True, _duplicate_flow_edge),
    "relabelled flow edge": (True, _relabel_flow_edge),
}


@pytest.mark.parametrize("number", range(20))
def test_duality_catches_every_mutation(number, lab_spec, gateway):
    pdg = _pdg(parse_listing(flow_corpus()[number], lab_spec), lab_spec, gateway)
    assert check_duality(pdg).passed

    applied = []
    for name, (needs_carried, mutate) in MUTATIONS.items():
        if needs_carried and not _carried(pdg):
            continue
        mutant = copy.deepcopy(pdg)
        mutate(mutant)
        assert not check_duality(mutant).passed, name
        applied.append(name)
    assert len(applied) >= 5
