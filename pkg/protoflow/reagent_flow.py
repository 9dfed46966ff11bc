"""
Reagent Flow

Reconstructs reagent lifecycles over a program with the reaching-definitions
schema (each instruction kills the reagents it consumes and defines its
product), run on a pushdown-style machine with random-access memory. Also
completes latent semantics: proxy values, missing key parameters, container
identities, intermediate names and implied steps.

Core functions:
    - defines() / kills() - Out(o) and consumed reagents of one instruction
    - resolve_output() - Pick one output name among candidates
    - transition() - One machine step
    - analyze_flow() - Whole-program traversal producing the flow graph
    - complete_implied_steps() - Insert guard-establishing steps nobody wrote
    - complete_parameters() - Fill proxies, key parameters and identifiers
    - locality_statistic() - Share of adjacent instruction pairs passing a reagent

Usage:
    from protoflow.reagent_flow import complete_parameters, analyze_flow

    completed = complete_parameters(complete_implied_steps(program, spec), spec, gateway)
    flow = analyze_flow(completed, gateway, spec)
    print(flow.accept, flow.dangling)
"""

import copy
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Any, Sequence, Set, Tuple

from protoflow.dsl import (
    MASK,
    NOOP,
    Call,
    DslProgram,
    DslSpec,
    Instruction,
    OperationSchema,
    Ref,
    ReviewFlag,
    fit_pattern,
)
from protoflow.errors import IllegalTransition
from protoflow.extractor import ExtractorGateway
from protoflow.quantities import Quantity

logger = logging.getLogger(__name__)

SOURCE = -1
_ARTICLES = ("the ", "a ", "an ", "some ")


@dataclass
class ReagentRecord:
    id: str
    name: str
    definer: int
    container: Optional[str] = None
    quantity: Optional[Quantity] = None
    killer: Optional[int] = None

    @property
    def at_source(self) -> bool:
        return self.definer == SOURCE


@dataclass
class PdaMachine:
    """
    Q: instruction indices; memory: ordered, random-access reagent records;
    enabled: M(q), the instructions that may run next.
    """

    program: DslProgram
    spec: Optional[DslSpec] = None
    memory: List[ReagentRecord] = field(default_factory=list)
    enabled: Set[int] = field(default_factory=set)
    state: Optional[int] = None
    records: Dict[str, ReagentRecord] = field(default_factory=dict)
    events: List[Tuple[int, int, str]] = field(default_factory=list)
    uses: Dict[int, List[str]] = field(default_factory=dict)
    defs: Dict[int, List[str]] = field(default_factory=dict)
    kill_sets: Dict[int, List[str]] = field(default_factory=dict)
    undefined: List[Tuple[int, str]] = field(default_factory=list)

    @classmethod
    def start(cls, program: DslProgram, spec: Optional[DslSpec] = None) -> "PdaMachine":
        machine = cls(program=program, spec=spec)
        if program.instructions:
            machine.enabled = {0}
        return machine

    def live(self, name: str) -> Optional[ReagentRecord]:
        key = normalize_name(name)
        for record in reversed(self.memory):
            if record.id == name or normalize_name(record.name) == key:
                return record
        return None


@dataclass
class ReagentFlowGraph:
    records: Dict[str, ReagentRecord] = field(default_factory=dict)
    dependences: List[Tuple[int, int, str]] = field(default_factory=list)
    accept: bool = True
    dangling: List[str] = field(default_factory=list)
    consumed_by_output: List[str] = field(default_factory=list)
    uses: List[List[str]] = field(default_factory=list)
    defs: List[List[str]] = field(default_factory=list)
    kills: List[List[str]] = field(default_factory=list)
    undefined: List[str] = field(default_factory=list)

    @property
    def R(self) -> Set[Tuple[int, int]]:
        """Dependence pairs <definer, killer> between instructions."""
        return {(i, j) for i, j, _ in self.dependences}

    def outs(self, index: int) -> Set[str]:
        """Out(o): defined reagents plus reagents used in place (not consumed)."""
        return set(self.defs[index]) | (set(self.uses[index]) - set(self.kills[index]))

    def describe(self) -> str:
        if self.accept:
            return "accepted"
        parts = []
        if self.dangling:
            parts.append(f"dangling: {', '.join(self.dangling)}")
        if self.undefined:
            parts.append(f"undefined: {', '.join(self.undefined)}")
        return "; ".join(parts)


def normalize_name(name: str) -> str:
    text = str(name).strip().lower()
    for article in _ARTICLES:
        if text.startswith(article):
            text = text[len(article):]
    return " ".join(text.split())


# ---------------------------------------------------------------------------
# In / Out
# ---------------------------------------------------------------------------

def _values(value) -> List[Any]:
    return list(value) if isinstance(value, tuple) else [value]


def _reagent_slots(instr: Instruction, spec: Optional[DslSpec]) -> List[str]:
    if spec is None:
        return [slot for slot in instr.bindings if slot not in ("container", "destination")]
    return [slot for slot in instr.bindings
            if slot in spec.parameters and spec.parameters[slot].kind == "reagent"]


def input_values(instr: Instruction, spec: Optional[DslSpec] = None) -> List[Any]:
    """In(o): reagent-kind slot values, without vessel phrases, masks or quantities."""
    values = []
    for slot in _reagent_slots(instr, spec):
        for value in _values(instr.bindings[slot]):
            if value == MASK or isinstance(value, (Quantity, Call)):
                continue
            if isinstance(value, str) and spec is not None and spec.is_vessel(value):
                continue
            values.append(value)
    return values


def container_of(instr: Instruction) -> Optional[str]:
    value = instr.bindings.get("container")
    if value is None or value == MASK:
        return None
    if isinstance(value, tuple):
        value = value[0]
    return value.name if isinstance(value, Ref) else str(value)


def _consumes(instr: Instruction, spec: Optional[DslSpec]) -> bool:
    if spec is None or instr.operation not in spec.operations:
        return instr.emit is not None
    op = spec.operations[instr.operation]
    return op.consumes or op.emits is not None


def defines(instr: Instruction, index: int = 0, container: Optional[str] = None) -> List[ReagentRecord]:
    """
    Out(o) as new records: the emit binding when present.

    Heating or stirring in place defines nothing; raw literals are registered
    at source by transition(), not here.
    """
    if instr.emit is None:
        return []
    return [ReagentRecord(id=instr.emit, name=instr.emit, definer=index,
                          container=container if container is not None else container_of(instr))]


def _record_json(instr: Instruction, spec: Optional[DslSpec], missing: int = 0) -> Dict[str, Any]:
    record: Dict[str, Any] = {"action": instr.operation}
    reagents = []
    for slot, value in instr.bindings.items():
        items = [str(v) if not isinstance(v, Quantity) else v.render() for v in _values(value)]
        if slot in _reagent_slots(instr, spec):
            reagents.extend("" if item == MASK else item for item in items)
        else:
            record[slot] = items
    record["reagent"] = reagents + [""] * missing
    record["output"] = ""
    return record


def kills(
    memory: Sequence[ReagentRecord],
    instr: Instruction,
    gateway: Optional[ExtractorGateway] = None,
    spec: Optional[DslSpec] = None
) -> List[str]:
    """
    Identifiers of remembered reagents the instruction consumes.

    Inputs are matched by identifier or normalized name; masked reagent slots
    go to the gateway with the memory contents as candidates. A reference
    missing from memory kills nothing (transition() records it as undefined).
    Non-consuming operations kill nothing.
    """
    if not memory or not _consumes(instr, spec):
        return []

    killed: List[str] = []
    masked = sum(1 for slot in _reagent_slots(instr, spec)
                 for value in _values(instr.bindings[slot]) if value == MASK)
    for value in input_values(instr, spec):
        name = value.name if isinstance(value, Ref) else str(value)
        record = _find(memory, name)
        if record is not None and record.id not in killed:
            killed.append(record.id)

    if masked and gateway is not None:
        candidates = [r.name for r in memory if r.id not in killed]
        if candidates:
            answer = gateway.query_missing_reagents(_record_json(instr, spec), candidates)
            for name in answer:
                record = _find(memory, name)
                if record is not None and record.id not in killed:
                    killed.append(record.id)
    return killed


def _find(memory: Sequence[ReagentRecord], name: str) -> Optional[ReagentRecord]:
    key = normalize_name(name)
    for record in reversed(list(memory)):
        if record.id == name or normalize_name(record.name) == key:
            return record
    return None


def resolve_output(
    instr: Instruction,
    candidates: Sequence[str],
    gateway: Optional[ExtractorGateway] = None,
    spec: Optional[DslSpec] = None
) -> str:
    """Select exactly one candidate as the instruction's output."""
    if not candidates:
        raise ValueError("candidates must not be empty")
    gateway = gateway or ExtractorGateway()
    return gateway.query_output(_record_json(instr, spec), list(candidates))


# ---------------------------------------------------------------------------
# Machine
# ---------------------------------------------------------------------------

def _next_ops(program: DslProgram, index: int) -> Set[int]:
    following = {index + 1} if index + 1 < len(program.instructions) else set()
    for wrapper in program.controls:
        if wrapper.kind == "branch" and wrapper.start == index + 1 and wrapper.end + 1 < len(program.instructions):
            following.add(wrapper.end + 1)
    return following


def transition(
    machine: PdaMachine,
    index: int,
    gateway: Optional[ExtractorGateway] = None
) -> PdaMachine:
    """
    Run instruction `index`: erase its kills from memory, register raw
    literals at source, append its definitions and move M(q) on.

    Raises:
        IllegalTransition: If the instruction is not enabled
    """
    if index not in machine.enabled:
        raise IllegalTransition(
            f"instruction {index} is not enabled (enabled: {sorted(machine.enabled)})", step=index
        )
    instr = machine.program.instructions[index]
    spec = machine.spec
    container = container_of(instr)
    used: List[str] = []

    if instr.operation != NOOP:
        for value in input_values(instr, spec):
            name = value.name if isinstance(value, Ref) else str(value)
            record = machine.live(name)
            if record is None and not isinstance(value, Ref):
                record = ReagentRecord(id=_fresh_id(machine, name), name=name, definer=SOURCE,
                                       container=container)
                machine.memory.append(record)
                machine.records[record.id] = record
            if record is None:
                machine.undefined.append((index, name))
                continue
            if record.container is None:
                record.container = container
            used.append(record.id)

    killed = kills(machine.memory, instr, gateway, spec)
    for rid in killed:
        record = machine.records[rid]
        if record.killer is None:
            record.killer = index
        if not record.at_source:
            machine.events.append((record.definer, index, rid))
        if rid not in used:
            used.append(rid)
    machine.memory = [r for r in machine.memory if r.id not in killed]

    if container is None and used:
        container = machine.records[used[0]].container
    defined = []
    for record in defines(instr, index, container):
        if record.id in machine.records:
            record.id = _fresh_id(machine, record.id)
        machine.memory.append(record)
        machine.records[record.id] = record
        defined.append(record.id)

    machine.uses[index] = used
    machine.defs[index] = defined
    machine.kill_sets[index] = killed
    machine.state = index
    machine.enabled = (machine.enabled - {index}) | _next_ops(machine.program, index)
    return machine


def _fresh_id(machine: PdaMachine, name: str) -> str:
    if name not in machine.records:
        return name
    k = 2
    while f"{name}#{k}" in machine.records:
        k += 1
    return f"{name}#{k}"


def _final_product(machine: PdaMachine, program: DslProgram) -> List[str]:
    last = len(program.instructions) - 1
    instr = program.instructions[last]
    product = machine.defs.get(last) or []
    if product:
        return [rid for rid in product if any(r.id == rid for r in machine.memory)]
    target = instr.bindings.get("target")
    if target is not None and target != MASK:
        name = target.name if isinstance(target, Ref) else str(_values(target)[0])
        record = machine.live(name)
        if record is not None:
            return [record.id]
    return []


def yield_names(text: str, memory: Sequence[ReagentRecord]) -> List[str]:
    """Live records whose normalized name occurs as a phrase of the yield text."""
    declared = " " + normalize_name(re.sub(r"[^\w\s]", " ", str(text))) + " "
    return [record.id for record in memory
            if f" {normalize_name(record.name)} " in declared]


def _terminal_consumption(machine: PdaMachine, program: DslProgram) -> List[str]:
    """
    The declared product: the last instruction's emit (or its live target),
    plus live reagents the metadata yield names. Nothing else is plated.
    """
    if not machine.memory or not program.instructions:
        return []
    plated = _final_product(machine, program)
    declared = program.metadata.get("yield")
    if declared:
        plated.extend(rid for rid in yield_names(declared, machine.memory) if rid not in plated)
    return plated


def analyze_flow(
    program: DslProgram,
    gateway: Optional[ExtractorGateway] = None,
    spec: Optional[DslSpec] = None
) -> ReagentFlowGraph:
    """
    Traverse the program in execution order and collect reagent lifecycles.

    Loop bodies are traversed once. At the end of a branch the memory is the
    union of the taken and skipped paths (a reagent reaches the join if it
    survives along either). After the terminal consumption rule, the machine
    accepts iff memory is empty and every referenced intermediate was defined
    on some path before its use.

    Args:
        program: Syntax-verified program
        gateway: Extraction gateway for unresolved reagents (rule backend if None)
        spec: DSL spec (operation consumption and slot kinds)

    Returns:
        ReagentFlowGraph with R, per-instruction uses/defs/kills and the verdict
    """
    gateway = gateway or ExtractorGateway()
    machine = PdaMachine.start(program, spec)
    snapshots: Dict[int, List[List[ReagentRecord]]] = {}
    n = len(program.instructions)

    for index in range(n):
        for wrapper in program.controls:
            if wrapper.kind == "branch" and wrapper.start == index:
                snapshots.setdefault(wrapper.end, []).append(list(machine.memory))
        transition(machine, index, gateway)
        for skipped in snapshots.pop(index, []):
            present = {r.id for r in machine.memory}
            machine.memory.extend(r for r in skipped if r.id not in present)

    graph = ReagentFlowGraph(
        records=machine.records,
        dependences=list(machine.events),
        uses=[machine.uses.get(i, []) for i in range(n)],
        defs=[machine.defs.get(i, []) for i in range(n)],
        kills=[machine.kill_sets.get(i, []) for i in range(n)],
    )
    plated = _terminal_consumption(machine, program)
    graph.consumed_by_output = plated
    remaining = [r for r in machine.memory if r.id not in plated]
    graph.dangling = [r.id for r in remaining]
    graph.undefined = sorted({name for _, name in machine.undefined})
    graph.accept = not remaining and not graph.undefined
    logger.info("Flow analysis: %d dependences, accept=%s, dangling=%s, undefined=%s",
                len(graph.dependences), graph.accept, graph.dangling, graph.undefined)
    return graph


def locality_statistic(graph: ReagentFlowGraph, program: DslProgram) -> float:
    """Fraction of adjacent pairs (o_i, o_i+1) with Out(o_i) ∩ In(o_i+1) non-empty."""
    n = len(program.instructions)
    if n < 2:
        return 1.0
    linked = sum(1 for i in range(n - 1) if graph.outs(i) & set(graph.uses[i + 1]))
    return linked / (n - 1)


# ---------------------------------------------------------------------------
# Completion
# ---------------------------------------------------------------------------

def complete_implied_steps(program: DslProgram, spec: DslSpec) -> DslProgram:
    """
    Insert the steps that establish a precondition nobody established.

    A precond whose spec guard names `established_by: <op>` gets an implied
    instruction of that operation, carrying the guard as its postcond, right
    after the instruction that introduced the guarded reagent.
    """
    result = copy.deepcopy(program)
    index = 0
    while index < len(result.instructions):
        instr = result.instructions[index]
        guard = instr.precond
        entry = spec.guards.get(guard.name) if guard is not None else None
        if entry is None or entry.established_by not in spec.operations:
            index += 1
            continue
        subject = guard.arg(entry.parameter)
        established = any(other.postcond == guard for other in result.instructions[:index])
        introducer = None
        for j in range(index):
            names = [normalize_name(v.name if isinstance(v, Ref) else str(v))
                     for v in input_values(result.instructions[j], spec)]
            if subject is not None and normalize_name(str(subject)) in names:
                introducer = j
                break
        if established or introducer is None:
            index += 1
            continue

        op = spec.operations[entry.established_by]
        implied = Instruction(
            operation=op.name,
            pattern=fit_pattern(op, []),
            postcond=guard,
            step=result.instructions[introducer].step,
            action=result.instructions[introducer].action,
            flags=["implied"],
        )
        position = introducer + 1
        result.instructions.insert(position, implied)
        for wrapper in result.controls:
            if wrapper.start >= position:
                wrapper.start += 1
            if wrapper.end >= position:
                wrapper.end += 1
        for flag in result.flags:
            if flag.instruction is not None and flag.instruction >= position:
                flag.instruction += 1
        logger.info("Inserted implied %s after instruction %d", op.name, introducer)
        index += 2
    return result


@dataclass
class _Context:
    containers: Dict[str, str] = field(default_factory=dict)
    heads: Dict[str, int] = field(default_factory=dict)
    live: List[str] = field(default_factory=list)
    raw: List[str] = field(default_factory=list)
    located: Dict[str, str] = field(default_factory=dict)
    last_values: Dict[Tuple[str, str], Any] = field(default_factory=dict)
    used_names: Set[str] = field(default_factory=set)
    emit_counts: Dict[str, int] = field(default_factory=dict)


def _container_id(ctx: _Context, phrase: str) -> str:
    key = normalize_name(phrase)
    if key not in ctx.containers:
        words = re.findall(r"[a-z0-9]+", key) or ["vessel"]
        head = words[-1]
        ctx.heads[head] = ctx.heads.get(head, 0) + 1
        ctx.containers[key] = f"{head}_{ctx.heads[head]}"
        ctx.used_names.add(ctx.containers[key])
    return ctx.containers[key]


def _fresh_name(ctx: _Context, prefix: str) -> str:
    k = ctx.emit_counts.get(prefix, 0)
    while True:
        k += 1
        name = f"{prefix}_{k}"
        if name not in ctx.used_names:
            ctx.emit_counts[prefix] = k
            ctx.used_names.add(name)
            return name


def _flag(program: DslProgram, instr: Instruction, index: int, parameter: str, reason: str) -> None:
    flag = ReviewFlag(reason=reason, instruction=index, step=instr.step, parameter=parameter)
    if all(f != flag for f in program.flags):
        program.flags.append(flag)
    if "review" not in instr.flags:
        instr.flags.append("review")


def _replace_aliases(spec: DslSpec, instr: Instruction) -> None:
    for slot, value in list(instr.bindings.items()):
        items = []
        for item in _values(value):
            if isinstance(item, str) and item != MASK:
                alias = spec.alias(slot, item)
                if alias is not None:
                    item = Quantity(alias.value, alias.unit, alias.dimension, alias.high, item)
            items.append(item)
        instr.bindings[slot] = tuple(items) if isinstance(value, tuple) else items[0]


def complete_parameters(
    program: DslProgram,
    spec: DslSpec,
    gateway: Optional[ExtractorGateway] = None
) -> DslProgram:
    """
    Make every value explicit.

    Known unknowns (proxy names such as "room temperature") are replaced via
    the spec alias table. Unknown unknowns (unbound key parameters) are filled
    from, in order: the operation default, the parameter's suggested range,
    the last value of the same parameter in the same container, the gateway
    (asked with the values the parameter took elsewhere), else MASK with a
    review flag. Unbound targets take the latest live intermediate, else the
    gateway's pick among raw reagents. Container phrases
    become `<head>_<n>` identifiers and emitting operations get `<emits>_<k>`
    names. Applying it twice equals applying it once.
    """
    gateway = gateway or ExtractorGateway()
    result = copy.deepcopy(program)
    ctx = _Context()
    for instr in result.instructions:
        if instr.emit:
            ctx.used_names.add(instr.emit)
        for value in instr.bindings.values():
            for item in _values(value):
                if isinstance(item, Ref):
                    ctx.used_names.add(item.name)

    for index, instr in enumerate(result.instructions):
        op = spec.operations.get(instr.operation)
        if op is None:
            continue

        _replace_aliases(spec, instr)

        for slot, value in list(instr.bindings.items()):
            schema = spec.parameters.get(slot)
            if schema is None or schema.kind != "container":
                continue
            items = [Ref(_container_id(ctx, item)) if isinstance(item, str) and item != MASK else item
                     for item in _values(value)]
            instr.bindings[slot] = tuple(items) if isinstance(value, tuple) else items[0]

        def unbound(slot: str) -> bool:
            return not instr.bound(slot) or instr.bindings.get(slot) == MASK

        if "target" in op.key and unbound("target"):
            if ctx.live:
                instr.bindings["target"] = Ref(ctx.live[-1])
            else:
                answer = gateway.query_missing_reagents(_record_json(instr, spec, 1), list(ctx.raw)) \
                    if ctx.raw else []
                if answer:
                    instr.bindings["target"] = answer[0]

        if "container" in op.key and unbound("container"):
            target = instr.bindings.get("target")
            located = None
            if target is not None and target != MASK:
                first = _values(target)[0]
                located = ctx.located.get(first.name if isinstance(first, Ref) else normalize_name(str(first)))
            if located is None:
                located = _fresh_name(ctx, spec.default_container)
            instr.bindings["container"] = Ref(located)

        if op.emits is not None and instr.emit is None:
            instr.emit = _fresh_name(ctx, op.emits)

        container = container_of(instr)
        for slot in op.key:
            if slot in ("target", "container") and not unbound(slot):
                continue
            if not unbound(slot):
                continue
            value = _fallback_value(ctx, instr, spec, op, slot, container, gateway)
            if value is None:
                instr.bindings[slot] = MASK
                _flag(result, instr, index, slot, "missing key controlling parameter")
            else:
                instr.bindings[slot] = value

        bound = [slot for slot in instr.bindings if instr.bound(slot)]
        pattern = fit_pattern(op, bound)
        if pattern is None:
            _flag(result, instr, index, None, "completed slots fit no pattern of the operation")
        else:
            instr.pattern = pattern

        _advance(ctx, instr, spec, container)
    return result


def _fallback_value(
    ctx: _Context,
    instr: Instruction,
    spec: DslSpec,
    op: OperationSchema,
    slot: str,
    container: Optional[str],
    gateway: ExtractorGateway
) -> Optional[Any]:
    if slot in op.defaults:
        return op.defaults[slot]
    schema = spec.parameters.get(slot)
    if schema is not None and schema.suggested is not None:
        return schema.suggested
    if container is not None and (container, slot) in ctx.last_values:
        return ctx.last_values[(container, slot)]
    earlier = []
    for (_, name), value in ctx.last_values.items():
        if name == slot and value.render() not in earlier:
            earlier.append(value.render())
    answer = gateway.query_missing_value(_record_json(instr, spec), slot, earlier,
                                         schema.unit if schema is not None else None)
    if answer is not None:
        logger.info("Gateway completed %s of instruction %s: %s", slot, instr.step, answer.render())
    return answer


def _advance(ctx: _Context, instr: Instruction, spec: DslSpec, container: Optional[str]) -> None:
    inputs = input_values(instr, spec)
    for value in inputs:
        key = value.name if isinstance(value, Ref) else normalize_name(str(value))
        if container is not None and key not in ctx.located:
            ctx.located[key] = container
    for value in inputs:
        if not isinstance(value, Ref) and str(value) not in ctx.raw:
            ctx.raw.append(str(value))
    if _consumes(instr, spec):
        for value in inputs:
            if isinstance(value, Ref) and value.name in ctx.live:
                ctx.live.remove(value.name)
            elif str(value) in ctx.raw:
                ctx.raw.remove(str(value))
    if instr.emit:
        if instr.emit in ctx.live:
            ctx.live.remove(instr.emit)
        ctx.live.append(instr.emit)
        if container is not None:
            ctx.located[instr.emit] = container
    if container is not None:
        for slot, value in instr.bindings.items():
            if isinstance(value, Quantity):
                ctx.last_values[(container, slot)] = value
