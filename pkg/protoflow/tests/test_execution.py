"""
Tests for the execution model: capacity and safety constraints, partial
traces and what-if edits.
"""

import json
import time

import pytest

from protoflow.dsl import ControlWrapper, DslProgram, Instruction, Ref, parse_listing
from protoflow.errors import InvalidEdit, RuleCompileError, StuckExecution
from protoflow.execution import (
    GuardContext,
    SafetyRule,
    build_resources,
    check_partial,
    check_safety,
    compile_guard,
    dump_trace,
    is_satisfied,
    load_resources,
    make_model,
    parse_edit,
    render_trace,
    replay,
    simulate,
    trace_report,
    track_capacity,
    whatif,
)
from protoflow.pdg import build_pdg
from protoflow.quantities import Quantity
from protoflow.reagent_flow import analyze_flow
from protoflow.tests.conftest import example_path

OVERFLOW = (
    'add(target = "water", volume = 35mL, container = flask_1);\n'
    'add(target = "water", volume = 25mL, container = flask_1);\n'
)
HEATED_ENZYME = (
    'add(target = "enzyme", volume = 10mL, container = "tube");\n'
    'heat(target = "enzyme", temperature = {temperature});\n'
)


def _model(listing, spec, resources=None):
    program = parse_listing(listing, spec)
    flow = analyze_flow(program, spec=spec)
    pdg = build_pdg(program, flow, spec_name=spec.name)
    rules = resources.rules if resources else ()
    return make_model(program, pdg, rules, resources, spec=spec)


@pytest.fixture
def capacity_model(chemistry_spec):
    return _model(OVERFLOW, chemistry_spec, load_resources(example_path("capacity_resources.yaml")))


def test_overflowing_flask_is_reported(capacity_model):
    trace, violations = simulate(capacity_model)
    assert trace.order == [0, 1]
    assert [(v.kind, v.position, v.subject) for v in violations] == [("C_s", 1, "flask")]
    assert violations[0].context["volumes"] == {"flask_1": 60.0}
    assert track_capacity(trace) == {"flask_1": 60.0}
    assert not is_satisfied(capacity_model, trace, violations)


def test_shared_container_is_ordered(capacity_model):
    assert [(c.before, c.after) for c in capacity_model.c_op] == [(0, 1)]
    assert capacity_model.c_reg == []


def test_trace_reports(capacity_model):
    trace, violations = simulate(capacity_model)
    report = trace_report(capacity_model, trace, violations)
    assert report["satisfied"] is False
    assert report["capacity"] == {"flask_1": 60.0}
    text = render_trace(report)
    assert "VIOLATION [C_s] step 1 (instruction 1)" in text
    assert text.endswith("satisfied: no\n")
    assert json.loads(dump_trace(report))["violations"][0]["kind"] == "C_s"


def test_heat_sensitive_reagent_above_limit(chemistry_spec):
    resources = load_resources(example_path("safety_resources.yaml"))
    model = _model(HEATED_ENZYME.format(temperature="70C"), chemistry_spec, resources)
    trace, violations = simulate(model)
    assert [(v.kind, v.name, v.instruction) for v in violations] == [("C_t", "no-heating-enzymes", 1)]
    assert violations[0].message == "heat-sensitive reagent heated above 60C"
    assert len(check_safety(trace, model)) == 1


def test_heat_sensitive_reagent_below_limit(chemistry_spec):
    resources = load_resources(example_path("safety_resources.yaml"))
    model = _model(HEATED_ENZYME.format(temperature="40C"), chemistry_spec, resources)
    trace, violations = simulate(model)
    assert violations == []
    assert is_satisfied(model, trace, violations)


def test_guard_grammar():
    guard = compile_guard("not (temperature > 5C or duration >= 10min)", set())
    assert guard(GuardContext(tags=set(), values={"temperature": 4.0, "duration": 60.0}))
    assert not guard(GuardContext(tags=set(), values={"temperature": 4.0, "duration": 900.0}))

    tagged = compile_guard("contents has flammable and temperature > 40C", {"flammable"})
    assert tagged(GuardContext(tags={"flammable"}, values={"temperature": 50.0}))
    assert not tagged(GuardContext(tags=set(), values={"temperature": 50.0}))
    # unknown readings never trigger
    assert not tagged(GuardContext(tags={"flammable"}, values={}))


@pytest.mark.parametrize("text", [
    "contents has flammable",
    "pressure > 2",
    "temperature >",
    "(temperature > 5C",
    "temperature > hot",
    "temperature > 5C extra",
])
def test_bad_guards_do_not_compile(text):
    with pytest.raises(RuleCompileError):
        compile_guard(text, {"heat-sensitive"})


def test_model_rejects_rule_with_unknown_attribute(capacity_model):
    rule = SafetyRule("oops", "heat", "contents has explosive")
    with pytest.raises(RuleCompileError) as excinfo:
        make_model(capacity_model.program, capacity_model.pdg, [rule], capacity_model.resources)
    assert "oops" in str(excinfo.value)


def test_resource_validation():
    with pytest.raises(FileNotFoundError):
        load_resources(example_path("missing_resources.yaml"))
    with pytest.raises(ValueError):
        build_resources({"containers": {"flask": "5 g"}})
    with pytest.raises(ValueError):
        build_resources({"rules": [{"name": "r", "guard": "temperature > 5C", "severity": "fatal"}]})
    assert build_resources(None).capacities == {}


def test_bounded_loop_is_unrolled(lab_spec):
    program = parse_listing(
        'mix(target = "acid", container = "flask");\n'
        'mix(target = "base", volume = 5mL, container = "flask");\n',
        lab_spec,
    )
    program.controls = [ControlWrapper("loop", "repeat", 1, 1, count=3)]
    pdg = build_pdg(program, analyze_flow(program, spec=lab_spec))
    trace, _ = simulate(make_model(program, pdg, spec=lab_spec))
    assert trace.order == [0, 1, 1, 1]
    assert track_capacity(trace) == {"flask": 15.0}
    assert trace.assumptions == []


def test_unbounded_loop_runs_once_with_assumption(lab_spec):
    program = parse_listing('mix(target = "acid");\ntitrate(target = "base");', lab_spec)
    program.controls = [ControlWrapper("loop", "until", 1, 1, predicate="pink")]
    pdg = build_pdg(program, analyze_flow(program, spec=lab_spec))
    trace, _ = simulate(make_model(program, pdg, spec=lab_spec))
    assert trace.order == [0, 1]
    assert len(trace.assumptions) == 1
    assert "unrolled once" in trace.assumptions[0]


def test_cycle_outside_loops_is_stuck(minimal_chain, lab_spec):
    pdg = build_pdg(minimal_chain, analyze_flow(minimal_chain, spec=lab_spec))
    pdg.op_graph.add_edge(1, 0, key="order", kind="order")
    with pytest.raises(StuckExecution):
        simulate(make_model(minimal_chain, pdg))


def test_replay_rejects_unknown_instruction(capacity_model):
    with pytest.raises(ValueError):
        replay(capacity_model, [0, 5])


def test_partial_traces(capacity_model):
    trace, _ = simulate(capacity_model)
    first = check_partial(trace.prefix(1), capacity_model)
    assert first.partial
    assert first.irrecoverable == []

    full = check_partial(trace.prefix(2), capacity_model)
    assert full.partial
    assert full.irrecoverable == ["C_s"]

    reversed_run = check_partial(replay(capacity_model, [1, 0]), capacity_model)
    assert not reversed_run.partial
    assert reversed_run.broken_pairs == [(1, 0)]


def test_dead_reagent_breaks_partial_trace(minimal_chain, lab_spec):
    pdg = build_pdg(minimal_chain, analyze_flow(minimal_chain, spec=lab_spec))
    model = make_model(minimal_chain, pdg, spec=lab_spec)
    verdict = check_partial(replay(model, [1]), model)
    assert not verdict.partial
    assert verdict.broken_pairs == [(0, 1)]


def test_parse_edit_forms():
    edit = parse_edit("set:0:volume=10mL")
    assert (edit.kind, edit.index, edit.parameter) == ("set", 0, "volume")
    assert isinstance(edit.value, Quantity)
    assert parse_edit("set:1:container=flask_2").value == Ref("flask_2")
    assert parse_edit('set:1:target="salt"').value == "salt"
    assert parse_edit("delete:3").kind == "delete"
    insert = parse_edit('insert:1:stir(target = "water");')
    assert insert.instruction.operation == "stir"


@pytest.mark.parametrize("text", ["delete:x", "rotate:1", "set:1:volume", "insert:0:stir(); stir();"])
def test_bad_edits(text):
    with pytest.raises(InvalidEdit):
        parse_edit(text)


def test_whatif_delete_removes_overflow(capacity_model):
    delta = whatif(capacity_model, parse_edit("delete:1"))
    assert delta.added == []
    assert [v.kind for v in delta.removed] == ["C_s"]


def test_whatif_smaller_volume_removes_overflow(capacity_model):
    delta = whatif(capacity_model, parse_edit("set:0:volume=10mL"))
    assert [v.kind for v in delta.removed] == ["C_s"]


def test_whatif_larger_volume_changes_nothing(capacity_model):
    assert whatif(capacity_model, parse_edit("set:0:volume=40mL")).empty


def test_whatif_rejects_invalid_program(capacity_model):
    with pytest.raises(InvalidEdit):
        whatif(capacity_model, parse_edit("set:0:speed=5rpm"))
    with pytest.raises(InvalidEdit):
        whatif(capacity_model, parse_edit("delete:9"))


def test_long_chain_simulates_quickly(lab_spec):
    instructions = [Instruction("mix", bindings={"target": "stock"}, emit="mixture_1")]
    for k in range(2, 1001):
        instructions.append(Instruction("mix", bindings={"target": Ref(f"mixture_{k - 1}")}, emit=f"mixture_{k}"))
    program = DslProgram(instructions=instructions)

    started = time.perf_counter()
    flow = analyze_flow(program, spec=lab_spec)
    model = make_model(program, build_pdg(program, flow), spec=lab_spec)
    trace, violations = simulate(model)
    elapsed = time.perf_counter() - started

    assert len(flow.dependences) == 999
    assert len(trace.steps) == 1000
    assert violations == []
    assert elapsed < 10.0


INDEPENDENT = "".join(f'mix(target = "r{k}", container = "tube_{k}");\n' for k in range(4)) + \
    'mix(target = "s", container = "tube_0");\n'


def test_seed_orders_independent_instructions(lab_spec):
    model = _model(INDEPENDENT, lab_spec)
    unseeded, _ = simulate(model)
    assert unseeded.order == [0, 1, 2, 3, 4]

    orders = set()
    for seed in range(20):
        trace, _ = simulate(model, seed)
        again, _ = simulate(model, seed)
        assert trace.order == again.order
        assert sorted(trace.order) == [0, 1, 2, 3, 4]
        # same container keeps its order
        assert trace.order.index(0) < trace.order.index(4)
        orders.add(tuple(trace.order))
    assert len(orders) > 1
