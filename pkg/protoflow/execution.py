"""
Execution Model

Places a program and its PDG in spatial-temporal context: a constraint-based
execution model S = (program, C) whose constraints are operation order
(C_op), reagent flow (C_reg), container capacity (C_s) and safety rules over
reagent attributes and parameters (C_t). Simulation folds per-container
volumes, contents and ambient parameters through the instructions and checks
every constraint at every step.

Core functions:
    - load_resources() - Containers, reagent attributes and safety rules from YAML
    - compile_guard() - Parse a rule guard expression
    - make_model() - Assemble the execution model
    - simulate() / replay() - Produce a trace and its violations
    - track_capacity() - Minimal required capacity per container
    - check_safety() - Safety rule violations over a trace
    - check_partial() - Verdict for a trace prefix
    - whatif() / parse_edit() - Counterfactual edits and their violation delta

Usage:
    from protoflow.execution import load_resources, make_model, simulate

    resources = load_resources("protoflow/examples/capacity_resources.yaml")
    model = make_model(program, pdg, resources.rules, resources, spec=spec)
    trace, violations = simulate(model)
"""

import copy
import json
import logging
import os
import random
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Any, Sequence, Set, Tuple

import networkx as nx
import yaml
from pydantic import BaseModel, ValidationError

from protoflow.dsl import (
    MASK,
    NOOP,
    DslProgram,
    DslSpec,
    Instruction,
    Ref,
    fit_pattern,
    parse_listing,
    validate_program,
)
from protoflow.errors import InvalidEdit, RuleCompileError, StuckExecution
from protoflow.pdg import Pdg, build_pdg
from protoflow.quantities import Quantity, parse_quantity
from protoflow.reagent_flow import analyze_flow, container_of, input_values, normalize_name

logger = logging.getLogger(__name__)

GUARD_NAMES = ("temperature", "duration", "volume", "elapsed")
SEVERITIES = ("error", "warning")


# ---------------------------------------------------------------------------
# Declarations
# ---------------------------------------------------------------------------

class RuleEntry(BaseModel):
    name: str
    trigger: str = "*"
    guard: str
    severity: str = "error"
    message: str = ""


class ResourceFile(BaseModel):
    containers: Dict[str, str] = {}
    attributes: Dict[str, List[str]] = {}
    rules: List[RuleEntry] = []


@dataclass(frozen=True)
class SafetyRule:
    name: str
    trigger: str
    guard: str
    severity: str = "error"
    message: str = ""

    def matches(self, operation: str) -> bool:
        return self.trigger in ("*", operation)


@dataclass
class ResourceDeclarations:
    capacities: Dict[str, float] = field(default_factory=dict)
    attributes: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    rules: List[SafetyRule] = field(default_factory=list)

    def tags_of(self, reagent: str) -> Set[str]:
        return set(self.attributes.get(normalize_name(reagent.split("#")[0]), ()))

    @property
    def known_tags(self) -> Set[str]:
        return {tag for tags in self.attributes.values() for tag in tags}


def build_resources(data: Any) -> ResourceDeclarations:
    """Build declarations from a parsed mapping (see load_resources)."""
    try:
        raw = ResourceFile.model_validate(data or {})
    except ValidationError as e:
        raise ValueError(f"Invalid resources declaration: {e}")

    capacities = {}
    for name, literal in raw.containers.items():
        quantity = parse_quantity(str(literal))
        if quantity is None or quantity.dimension != "volume-mL":
            raise ValueError(f"Container '{name}' capacity is not a volume: {literal}")
        capacities[name.lower()] = quantity.worst_case()

    for rule in raw.rules:
        if rule.severity not in SEVERITIES:
            raise ValueError(f"Rule '{rule.name}' has unknown severity '{rule.severity}'")

    return ResourceDeclarations(
        capacities=capacities,
        attributes={normalize_name(name): tuple(tags) for name, tags in raw.attributes.items()},
        rules=[SafetyRule(r.name, r.trigger, r.guard, r.severity, r.message) for r in raw.rules],
    )


def load_resources(path: str) -> ResourceDeclarations:
    """
    Load resource declarations and safety rules.

    Args:
        path: YAML file with `containers`, `attributes` and `rules`

    Returns:
        ResourceDeclarations

    Raises:
        FileNotFoundError: If the file doesn't exist
        ValueError: If the file fails validation
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Resources file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return build_resources(yaml.safe_load(f))


# ---------------------------------------------------------------------------
# Guard grammar
# ---------------------------------------------------------------------------

_GUARD_TOKEN_RE = re.compile(
    r"\s*(?:(?P<paren>[()])|(?P<cmp><=|>=|==|!=|<|>)"
    r"|(?P<number>\d+(?:\.\d+)?(?:°?[A-Za-zµμ]+(?:/[A-Za-z]+)?)?)"
    r"|(?P<word>[A-Za-z_][\w-]*))"
)

_COMPARATORS: Dict[str, Callable[[float, float], bool]] = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "==": lambda a, b: abs(a - b) < 1e-9,
    "!=": lambda a, b: abs(a - b) >= 1e-9,
}

Guard = Callable[["GuardContext"], bool]


@dataclass
class GuardContext:
    tags: Set[str]
    values: Dict[str, Optional[float]]


def _tokenize_guard(text: str) -> List[Tuple[str, str]]:
    tokens = []
    position = 0
    text = text.strip()
    while position < len(text):
        match = _GUARD_TOKEN_RE.match(text, position)
        if not match or match.end() == position:
            raise RuleCompileError(f"unexpected character {text[position]!r} in guard", symbol=text)
        position = match.end()
        kind = match.lastgroup
        tokens.append((kind, match.group(kind)))
    return tokens


class _GuardParser:
    """or_expr := and_expr ('or' and_expr)*; and_expr := not_expr ('and' not_expr)*"""

    def __init__(self, text: str, known_tags: Set[str]):
        self.text = text
        self.tokens = _tokenize_guard(text)
        self.position = 0
        self.known_tags = known_tags

    def peek(self) -> Optional[Tuple[str, str]]:
        return self.tokens[self.position] if self.position < len(self.tokens) else None

    def take(self) -> Tuple[str, str]:
        token = self.peek()
        if token is None:
            raise RuleCompileError("guard ends unexpectedly", symbol=self.text)
        self.position += 1
        return token

    def expect_word(self, word: str) -> None:
        kind, value = self.take()
        if kind != "word" or value != word:
            raise RuleCompileError(f"expected '{word}', found '{value}'", symbol=self.text)

    def parse(self) -> Guard:
        guard = self.or_expr()
        if self.peek() is not None:
            raise RuleCompileError(f"trailing input at '{self.peek()[1]}'", symbol=self.text)
        return guard

    def or_expr(self) -> Guard:
        parts = [self.and_expr()]
        while self.peek() == ("word", "or"):
            self.take()
            parts.append(self.and_expr())
        return parts[0] if len(parts) == 1 else (lambda ctx: any(p(ctx) for p in parts))

    def and_expr(self) -> Guard:
        parts = [self.not_expr()]
        while self.peek() == ("word", "and"):
            self.take()
            parts.append(self.not_expr())
        return parts[0] if len(parts) == 1 else (lambda ctx: all(p(ctx) for p in parts))

    def not_expr(self) -> Guard:
        if self.peek() == ("word", "not"):
            self.take()
            inner = self.not_expr()
            return lambda ctx: not inner(ctx)
        return self.atom()

    def atom(self) -> Guard:
        kind, value = self.take()
        if (kind, value) == ("paren", "("):
            inner = self.or_expr()
            if self.take() != ("paren", ")"):
                raise RuleCompileError("unbalanced parentheses", symbol=self.text)
            return inner
        if (kind, value) == ("word", "contents"):
            self.expect_word("has")
            tag_kind, tag = self.take()
            if tag_kind != "word":
                raise RuleCompileError(f"expected an attribute tag, found '{tag}'", symbol=self.text)
            if tag not in self.known_tags:
                raise RuleCompileError(f"unknown attribute '{tag}'", symbol=self.text)
            return lambda ctx: tag in ctx.tags
        if kind == "word" and value in GUARD_NAMES:
            cmp_kind, comparator = self.take()
            if cmp_kind != "cmp":
                raise RuleCompileError(f"expected a comparison after '{value}'", symbol=self.text)
            number_kind, literal = self.take()
            quantity = parse_quantity(literal) if number_kind == "number" else None
            if quantity is None:
                raise RuleCompileError(f"expected a number, found '{literal}'", symbol=self.text)
            threshold = quantity.base()[0] if quantity.unit else quantity.value
            compare = _COMPARATORS[comparator]
            name = value

            def check(ctx: GuardContext) -> bool:
                current = ctx.values.get(name)
                return current is not None and compare(current, threshold)
            return check
        raise RuleCompileError(f"unknown name '{value}' in guard", symbol=self.text)


def compile_guard(text: str, known_tags: Set[str]) -> Guard:
    """
    Compile a guard such as `contents has heat-sensitive and temperature > 60C`.

    Raises:
        RuleCompileError: On syntax errors, unknown names or unknown attributes
    """
    return _GuardParser(text, known_tags).parse()


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class ExecutionContext:
    volumes: Dict[str, float] = field(default_factory=dict)
    contents: Dict[str, Set[str]] = field(default_factory=dict)
    temperature: Optional[float] = None
    elapsed: float = 0.0

    def tags(self, container: Optional[str], resources: ResourceDeclarations) -> Set[str]:
        found: Set[str] = set()
        for reagent in self.contents.get(container, set()):
            found |= resources.tags_of(reagent)
        return found

    def snapshot(self) -> Dict[str, Any]:
        return {
            "volumes": dict(sorted(self.volumes.items())),
            "contents": {c: sorted(r) for c, r in sorted(self.contents.items())},
            "temperature": self.temperature,
            "elapsed": self.elapsed,
        }


@dataclass
class TraceStep:
    instruction: int
    context: ExecutionContext
    container: Optional[str] = None
    declared_delta: float = 0.0
    values: Dict[str, Optional[float]] = field(default_factory=dict)


@dataclass
class ExecutionTrace:
    steps: List[TraceStep] = field(default_factory=list)
    assumptions: List[str] = field(default_factory=list)

    @property
    def order(self) -> List[int]:
        return [step.instruction for step in self.steps]

    def prefix(self, length: int) -> "ExecutionTrace":
        return ExecutionTrace(steps=self.steps[:length], assumptions=list(self.assumptions))


@dataclass
class Violation:
    kind: str  # C_op, C_reg, C_s or C_t
    name: str
    position: int
    instruction: int
    message: str
    subject: str = ""
    severity: str = "error"
    context: Dict[str, Any] = field(default_factory=dict)

    @property
    def key(self) -> Tuple[str, str, str]:
        return self.kind, self.name, self.subject

    def describe(self) -> str:
        return f"[{self.kind}] step {self.position} (instruction {self.instruction}): {self.message}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "name": self.name,
            "position": self.position,
            "instruction": self.instruction,
            "subject": self.subject,
            "severity": self.severity,
            "message": self.message,
            "context": self.context,
        }


@dataclass
class OrderConstraint:
    """`after` may only run once `before` has run (C_op), with the reagent alive (C_reg)."""

    kind: str
    before: int
    after: int
    reagent: Optional[str] = None

    @property
    def name(self) -> str:
        return f"{self.before}<{self.after}"

    def check(self, trace: ExecutionTrace, position: int, model: "ExecutionModel") -> Optional[str]:
        if trace.steps[position].instruction != self.after:
            return None
        earlier = [s.instruction for s in trace.steps[:position]]
        if self.before not in earlier:
            what = f" carrying '{self.reagent}'" if self.reagent else ""
            return f"instruction {self.after} runs before instruction {self.before}{what}"
        return None


@dataclass
class CapacityConstraint:
    container: str
    capacity: float

    kind = "C_s"

    @property
    def name(self) -> str:
        return f"capacity:{self.container}"

    def applies_to(self, container: str) -> bool:
        return container == self.container or re.sub(r"_\d+$", "", container) == self.container

    def check(self, trace: ExecutionTrace, position: int, model: "ExecutionModel") -> Optional[str]:
        step = trace.steps[position]
        if step.container is None or not self.applies_to(step.container.lower()):
            return None
        volume = step.context.volumes.get(step.container, 0.0)
        if volume > self.capacity + 1e-9:
            return f"{step.container} holds {volume:g} mL, capacity {self.capacity:g} mL"
        return None


@dataclass
class SafetyConstraint:
    rule: SafetyRule
    guard: Guard

    kind = "C_t"

    @property
    def name(self) -> str:
        return self.rule.name

    def check(self, trace: ExecutionTrace, position: int, model: "ExecutionModel") -> Optional[str]:
        step = trace.steps[position]
        instr = model.program.instructions[step.instruction]
        if not self.rule.matches(instr.operation):
            return None
        ctx = GuardContext(tags=step.context.tags(step.container, model.resources), values=step.values)
        if self.guard(ctx):
            return self.rule.message or f"rule '{self.rule.name}' triggered by {instr.operation}"
        return None


@dataclass
class ExecutionModel:
    program: DslProgram
    pdg: Pdg
    resources: ResourceDeclarations
    c_op: List[OrderConstraint] = field(default_factory=list)
    c_reg: List[OrderConstraint] = field(default_factory=list)
    c_s: List[CapacityConstraint] = field(default_factory=list)
    c_t: List[SafetyConstraint] = field(default_factory=list)
    spec: Optional[DslSpec] = None
    rules: List[SafetyRule] = field(default_factory=list)

    @property
    def constraints(self) -> List[Any]:
        return list(self.c_op) + list(self.c_reg) + list(self.c_s) + list(self.c_t)


def make_model(
    program: DslProgram,
    pdg: Pdg,
    rules: Sequence[SafetyRule] = (),
    resources: Optional[ResourceDeclarations] = None,
    spec: Optional[DslSpec] = None
) -> ExecutionModel:
    """
    Build S = (program, C).

    Args:
        program: Completed program the pdg was built from
        pdg: Protocol Dependence Graph
        rules: Safety rules (C_t)
        resources: Container capacities (C_s) and reagent attributes
        spec: DSL spec, needed by whatif() for syntax checks

    Returns:
        ExecutionModel

    Raises:
        RuleCompileError: If a rule guard references an unknown name or attribute
    """
    resources = resources or ResourceDeclarations()
    model = ExecutionModel(program=program, pdg=pdg, resources=resources, spec=spec, rules=list(rules))

    for u, v, data in pdg.op_graph.edges(data=True):
        if data.get("loop"):
            continue
        if data.get("kind") == "flow":
            model.c_reg.append(OrderConstraint("C_reg", u, v, data.get("reagent")))
        else:
            model.c_op.append(OrderConstraint("C_op", u, v))

    for name, capacity in sorted(resources.capacities.items()):
        model.c_s.append(CapacityConstraint(name, capacity))

    known = resources.known_tags
    for rule in rules:
        try:
            guard = compile_guard(rule.guard, known)
        except RuleCompileError as e:
            raise RuleCompileError(f"rule '{rule.name}': {e.message}", symbol=rule.guard, stage="execution")
        model.c_t.append(SafetyConstraint(rule, guard))

    logger.info("Execution model: %d C_op, %d C_reg, %d C_s, %d C_t",
                len(model.c_op), len(model.c_reg), len(model.c_s), len(model.c_t))
    return model


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def _quantities(instr: Instruction, dimension: str) -> List[Tuple[str, Quantity]]:
    found = []
    for slot, value in instr.bindings.items():
        items = value if isinstance(value, tuple) else (value,)
        for item in items:
            if isinstance(item, Quantity) and item.dimension == dimension:
                found.append((slot, item))
    return found


def _names(value: Any) -> List[str]:
    items = value if isinstance(value, tuple) else (value,)
    return [item.name if isinstance(item, Ref) else str(item) for item in items
            if item is not None and item != MASK and not isinstance(item, Quantity)]


class _Simulator:
    """Folds contexts through one instruction order."""

    def __init__(self, model: ExecutionModel):
        self.model = model
        self.context = ExecutionContext()
        self.located: Dict[str, str] = {}
        self.trace = ExecutionTrace()

    def container_for(self, instr: Instruction) -> Optional[str]:
        container = container_of(instr)
        if container is not None:
            return container
        for value in input_values(instr, self.model.spec):
            name = value.name if isinstance(value, Ref) else normalize_name(str(value))
            if name in self.located:
                return self.located[name]
        return None

    def run(self, index: int) -> None:
        instr = self.model.program.instructions[index]
        ctx = copy.deepcopy(self.context)
        container = self.container_for(instr)
        delta = 0.0

        if instr.operation != NOOP:
            if "destination" in instr.bindings:
                container = self._transfer(ctx, instr, container)
            else:
                for slot, quantity in _quantities(instr, "volume-mL"):
                    if container is None:
                        self.trace.assumptions.append(
                            f"instruction {index}: volume {quantity.render()} has no container, not tracked")
                        continue
                    amount = quantity.worst_case()
                    ctx.volumes[container] = ctx.volumes.get(container, 0.0) + amount
                    delta += amount
                for _, quantity in _quantities(instr, "dimensionless"):
                    self.trace.assumptions.append(
                        f"instruction {index}: unitless quantity {quantity.render()} excluded from capacity")

            if container is not None:
                contents = ctx.contents.setdefault(container, set())
                for value in input_values(instr, self.model.spec):
                    name = value.name if isinstance(value, Ref) else normalize_name(str(value))
                    contents.add(name)
                    self.located[name] = container
                if instr.emit:
                    contents.add(instr.emit)
                    self.located[instr.emit] = container

        values: Dict[str, Optional[float]] = {name: None for name in GUARD_NAMES}
        for _, quantity in _quantities(instr, "temperature-C"):
            ctx.temperature = quantity.worst_case()
        for _, quantity in _quantities(instr, "duration-s"):
            values["duration"] = quantity.worst_case()
            ctx.elapsed += quantity.worst_case()
        values["temperature"] = ctx.temperature
        values["elapsed"] = ctx.elapsed
        values["volume"] = ctx.volumes.get(container) if container is not None else None

        self.context = ctx
        self.trace.steps.append(TraceStep(index, ctx, container, delta, values))

    def _transfer(self, ctx: ExecutionContext, instr: Instruction, source: Optional[str]) -> Optional[str]:
        destinations = _names(instr.bindings["destination"])
        if source is None or not destinations:
            return source
        fraction = 1.0
        for _, quantity in _quantities(instr, "dimensionless"):
            fraction = quantity.value / 100.0 if quantity.value > 1 else quantity.value
        moved = ctx.volumes.get(source, 0.0) * fraction
        share = moved / len(destinations)
        ctx.volumes[source] = ctx.volumes.get(source, 0.0) - moved
        carried = set(ctx.contents.get(source, set()))
        for destination in destinations:
            ctx.volumes[destination] = ctx.volumes.get(destination, 0.0) + share
            ctx.contents.setdefault(destination, set()).update(carried)
        for name, where in list(self.located.items()):
            if where == source and fraction >= 1.0:
                self.located[name] = destinations[0]
        return destinations[0]


def replay(model: ExecutionModel, order: Sequence[int]) -> ExecutionTrace:
    """Fold contexts through an explicit instruction order (no constraint checks)."""
    simulator = _Simulator(model)
    n = len(model.program.instructions)
    for index in order:
        if not 0 <= index < n:
            raise ValueError(f"instruction {index} is outside the program (0..{n - 1})")
        simulator.run(index)
    return simulator.trace


def _execution_order(model: ExecutionModel, trace: ExecutionTrace, seed: Optional[int] = None) -> List[int]:
    graph = model.pdg.op_graph
    view = nx.subgraph_view(graph, filter_edge=lambda u, v, k: not graph.edges[u, v, k].get("loop", False))
    rank = {node: node for node in graph.nodes}
    if seed is not None:
        shuffled = sorted(graph.nodes)
        random.Random(seed).shuffle(shuffled)
        rank = {node: position for position, node in enumerate(shuffled)}
    try:
        order = list(nx.lexicographical_topological_sort(view, key=rank.__getitem__))
    except nx.NetworkXUnfeasible:
        raise StuckExecution("no instruction is enabled: cyclic dependence outside loops")

    for wrapper in model.program.controls:
        if wrapper.kind != "loop":
            continue
        body = [i for i in order if wrapper.start <= i <= wrapper.end]
        if wrapper.count is None:
            trace.assumptions.append(
                f"loop over instructions {wrapper.start}-{wrapper.end} ({wrapper.signal} {wrapper.predicate}) unrolled once")
            continue
        at = order.index(body[-1]) + 1
        order[at:at] = body * (wrapper.count - 1)
    return order


def evaluate(model: ExecutionModel, trace: ExecutionTrace) -> List[Violation]:
    """Check every constraint at every step of the trace."""
    violations = []
    for position, step in enumerate(trace.steps):
        for constraint in model.constraints:
            reason = constraint.check(trace, position, model)
            if reason is None:
                continue
            severity = constraint.rule.severity if isinstance(constraint, SafetyConstraint) else "error"
            violations.append(Violation(
                kind=constraint.kind,
                name=constraint.name,
                position=position,
                instruction=step.instruction,
                message=reason,
                subject=constraint.container if isinstance(constraint, CapacityConstraint) else constraint.name,
                severity=severity,
                context=step.context.snapshot(),
            ))
    return violations


def simulate(model: ExecutionModel, seed: Optional[int] = None) -> Tuple[ExecutionTrace, List[Violation]]:
    """
    Execute the program in a topological order of the op graph. Ties between
    enabled instructions go by index, or by a permutation drawn from seed when
    one is given; a fixed seed always yields the same trace.

    Bounded loops are unrolled to their count; unbounded loops run once with an
    assumption recorded on the trace. The run is fully satisfying iff every
    instruction executed and no violation was found (see is_satisfied()).

    Raises:
        StuckExecution: If the op graph has a cycle outside loop back-edges
    """
    trace = ExecutionTrace()
    order = _execution_order(model, trace, seed)
    run = replay(model, order)
    run.assumptions = trace.assumptions + run.assumptions
    violations = evaluate(model, run)
    logger.info("Simulated %d steps: %d violations", len(run.steps), len(violations))
    return run, violations


def is_satisfied(model: ExecutionModel, trace: ExecutionTrace, violations: Sequence[Violation]) -> bool:
    executed = set(trace.order)
    return len(executed) == len(model.program.instructions) and not violations


def track_capacity(trace: ExecutionTrace) -> Dict[str, float]:
    """Per container, the maximum cumulative volume reached at any step (mL)."""
    capacity: Dict[str, float] = {}
    for step in trace.steps:
        for container, volume in step.context.volumes.items():
            capacity[container] = max(capacity.get(container, 0.0), volume)
    return capacity


def check_safety(trace: ExecutionTrace, model: ExecutionModel) -> List[Violation]:
    """C_t violations only."""
    safety_only = ExecutionModel(program=model.program, pdg=model.pdg, resources=model.resources,
                                 c_t=model.c_t, spec=model.spec)
    return evaluate(safety_only, trace)


@dataclass
class PartialVerdict:
    partial: bool
    broken_pairs: List[Tuple[int, int]] = field(default_factory=list)
    irrecoverable: List[str] = field(default_factory=list)
    violations: List[Violation] = field(default_factory=list)


def check_partial(prefix: ExecutionTrace, model: ExecutionModel) -> PartialVerdict:
    """
    Decide whether a trace prefix can still extend to a satisfying run.

    A pair (o_i, o_j) executed in that order is broken when the op graph
    (without loop back-edges) orders o_j before o_i, or when o_j kills a
    reagent whose definer has not run. Capacity and safety violations already
    present in the prefix cannot be undone and are reported as irrecoverable.
    """
    graph = model.pdg.op_graph
    view = nx.subgraph_view(graph, filter_edge=lambda u, v, k: not graph.edges[u, v, k].get("loop", False))
    order = prefix.order
    broken: List[Tuple[int, int]] = []
    for i, earlier in enumerate(order):
        for later in order[i + 1:]:
            if earlier != later and nx.has_path(view, later, earlier):
                broken.append((earlier, later))
    for constraint in model.c_reg:
        if constraint.after in order:
            position = order.index(constraint.after)
            if constraint.before not in order[:position]:
                pair = (constraint.before, constraint.after)
                if pair not in broken:
                    broken.append(pair)

    violations = evaluate(model, prefix)
    irrecoverable = sorted({v.kind for v in violations if v.kind in ("C_s", "C_t")})
    return PartialVerdict(partial=not broken, broken_pairs=broken, irrecoverable=irrecoverable,
                          violations=violations)


# ---------------------------------------------------------------------------
# What-if
# ---------------------------------------------------------------------------

@dataclass
class InstructionEdit:
    kind: str  # set, insert or delete
    index: int
    parameter: Optional[str] = None
    value: Any = None
    instruction: Optional[Instruction] = None


@dataclass
class WhatIfDelta:
    added: List[Violation] = field(default_factory=list)
    removed: List[Violation] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.added and not self.removed


def _edit_value(text: str) -> Any:
    text = text.strip()
    quantity = parse_quantity(text)
    if quantity is not None:
        return quantity
    if len(text) >= 2 and text[0] == text[-1] == '"':
        return text[1:-1]
    return Ref(text) if re.fullmatch(r"[A-Za-z]\w*_\d+", text) else text


def parse_edit(text: str) -> InstructionEdit:
    """
    Parse the CLI edit form: `set:<i>:<param>=<value>`, `delete:<i>` or
    `insert:<i>:<listing>`.

    Raises:
        InvalidEdit: If the text is not a valid edit
    """
    kind, _, rest = text.partition(":")
    index_text, _, payload = rest.partition(":")
    try:
        index = int(index_text)
    except ValueError:
        raise InvalidEdit(f"edit index is not a number: {index_text!r}")
    if kind == "delete":
        return InstructionEdit("delete", index)
    if kind == "set":
        parameter, sep, value = payload.partition("=")
        if not sep or not parameter.strip():
            raise InvalidEdit(f"set edit needs <param>=<value>: {payload!r}")
        return InstructionEdit("set", index, parameter.strip(), _edit_value(value))
    if kind == "insert":
        program = parse_listing(payload)
        if len(program.instructions) != 1:
            raise InvalidEdit("insert edit needs exactly one instruction")
        return InstructionEdit("insert", index, instruction=program.instructions[0])
    raise InvalidEdit(f"unknown edit kind '{kind}' (expected set, insert or delete)")


def apply_edit(program: DslProgram, edit: InstructionEdit) -> DslProgram:
    edited = copy.deepcopy(program)
    n = len(edited.instructions)
    if edit.kind == "set":
        if not 0 <= edit.index < n:
            raise InvalidEdit(f"no instruction {edit.index}", step=edit.index)
        edited.instructions[edit.index].bindings[edit.parameter] = edit.value
    elif edit.kind == "delete":
        if not 0 <= edit.index < n:
            raise InvalidEdit(f"no instruction {edit.index}", step=edit.index)
        del edited.instructions[edit.index]
        _shift_controls(edited, edit.index, -1)
    elif edit.kind == "insert":
        if not 0 <= edit.index <= n or edit.instruction is None:
            raise InvalidEdit(f"cannot insert at {edit.index}", step=edit.index)
        edited.instructions.insert(edit.index, copy.deepcopy(edit.instruction))
        _shift_controls(edited, edit.index, 1)
    else:
        raise InvalidEdit(f"unknown edit kind '{edit.kind}'")
    return edited


def _shift_controls(program: DslProgram, at: int, offset: int) -> None:
    kept = []
    for wrapper in program.controls:
        if offset < 0:
            if wrapper.start == wrapper.end == at:
                continue
            wrapper.start -= 1 if wrapper.start > at else 0
            wrapper.end -= 1 if wrapper.end >= at else 0
        else:
            wrapper.start += 1 if wrapper.start >= at else 0
            wrapper.end += 1 if wrapper.end >= at else 0
        kept.append(wrapper)
    program.controls = kept


def whatif(model: ExecutionModel, edit: InstructionEdit) -> WhatIfDelta:
    """
    Re-simulate an edited copy of the model and diff the violations.

    Raises:
        InvalidEdit: If the edit addresses no instruction or breaks syntax
    """
    edited = apply_edit(model.program, edit)
    if model.spec is not None:
        for instr in edited.instructions:
            if instr.operation in model.spec.operations:
                refit = fit_pattern(model.spec.operations[instr.operation],
                                    [s for s in instr.bindings if instr.bound(s)])
                instr.pattern = refit or instr.pattern
        report = validate_program(edited, model.spec)
        if not report.ok:
            first = report.violations[0]
            raise InvalidEdit(f"edited program is not syntax-verified: {first.message}",
                              step=first.instruction, symbol=first.slot)

    _, baseline = simulate(model)
    flow = analyze_flow(edited, spec=model.spec)
    pdg = build_pdg(edited, flow, model.pdg.meta.get("spec", ""), model.pdg.meta.get("seed"))
    counterfactual = make_model(edited, pdg, model.rules, model.resources, model.spec)
    _, after = simulate(counterfactual)

    before_keys = {v.key for v in baseline}
    after_keys = {v.key for v in after}
    return WhatIfDelta(
        added=[v for v in after if v.key not in before_keys],
        removed=[v for v in baseline if v.key not in after_keys],
    )


def trace_report(model: ExecutionModel, trace: ExecutionTrace, violations: Sequence[Violation]) -> Dict[str, Any]:
    """Machine-readable trace report."""
    return {
        "steps": [
            {"position": i, "instruction": s.instruction,
             "operation": model.program.instructions[s.instruction].operation,
             "container": s.container, "context": s.context.snapshot()}
            for i, s in enumerate(trace.steps)
        ],
        "violations": [v.to_dict() for v in violations],
        "capacity": track_capacity(trace),
        "satisfied": is_satisfied(model, trace, violations),
        "assumptions": list(trace.assumptions),
    }


def render_trace(report: Dict[str, Any]) -> str:
    """Line-oriented trace report."""
    lines = []
    for step in report["steps"]:
        volumes = ", ".join(f"{c}={v:g}mL" for c, v in step["context"]["volumes"].items())
        lines.append(f"{step['position']:>3}  #{step['instruction']:<3} {step['operation']:<12} {volumes}")
    for violation in report["violations"]:
        lines.append(f"VIOLATION [{violation['kind']}] step {violation['position']} "
                     f"(instruction {violation['instruction']}): {violation['message']}")
    for assumption in report["assumptions"]:
        lines.append(f"ASSUMPTION {assumption}")
    lines.append(f"satisfied: {'yes' if report['satisfied'] else 'no'}")
    return "\n".join(lines) + "\n"


def dump_trace(report: Dict[str, Any]) -> str:
    return json.dumps(report, indent=2, ensure_ascii=False)
