"""
Program Synthesis

Chooses, for every action of a protocol, the operation and slot pattern that
best explain its entities, and refines noisy entity labels along the way.
The objective is a three-term divergence between program and entity
sequence; it is minimized with restarted EM chains (sample patterns under a
size prior, then greedily relabel entities).

Core functions:
    - bind_entities() - Greedy label-to-slot binding for one pattern
    - divergence() - Score a program against an entity sequence
    - sample_program() - E-step draw of one program
    - refine_labels() - M-step label edits that strictly lower the score
    - synthesize() - Restarted EM search returning the best program
    - detect_control_flow() - Delays, completion guards, folds, loops, branches

Usage:
    from protoflow.synthesis import synthesize, detect_control_flow

    program, score = synthesize(sequence, spec, SynthesisConfig(seed=7))
    program = detect_control_flow(sequence, program)
"""

import copy
import logging
import random
import re
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

from nltk.metrics.distance import edit_distance

from protoflow.config import SynthesisConfig
from protoflow.dsl import (
    MASK,
    NOOP,
    Call,
    ControlWrapper,
    DslProgram,
    DslSpec,
    Instruction,
    OperationSchema,
    ProgramPattern,
    ReviewFlag,
    fit_pattern,
)
from protoflow.errors import LengthMismatch, UnresolvedControlSignal
from protoflow.preprocess import ActionUnit, Entity, EntitySequence
from protoflow.quantities import Quantity

logger = logging.getLogger(__name__)

QUANTITY_LABELS = ("volume", "mass", "temperature", "duration", "concentration", "speed", "count")
_TOKEN_RE = re.compile(r"[a-z0-9]+")

Choice = Tuple[str, ProgramPattern]


def _tokens(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


def entity_value(entity: Entity):
    """The literal an entity contributes when bound to a slot."""
    if entity.value is not None and entity.parameter is None and entity.label in QUANTITY_LABELS:
        return entity.value
    return entity.text


def _accepts(spec: DslSpec, slot: str, label: str) -> bool:
    schema = spec.parameters.get(slot)
    return schema is not None and label in schema.labels


def bind_entities(
    spec: DslSpec,
    pattern: ProgramPattern,
    entities: Sequence[Entity]
) -> Tuple[Dict[str, object], List[Entity]]:
    """
    Bind entities in text order to the first slot of the layout that accepts
    their label and still has arity left.

    Returns:
        (bindings, unmapped entities); unbound required slots hold MASK
    """
    collected: Dict[str, List[object]] = {name: [] for name in pattern.slot_names}
    unmapped = []
    for entity in sorted(entities, key=lambda e: (e.start, e.end)):
        for slot in pattern.slot_names:
            if _accepts(spec, slot, entity.label) and \
                    len(collected[slot]) < spec.parameters[slot].max_arity:
                collected[slot].append(entity_value(entity))
                break
        else:
            unmapped.append(entity)

    bindings: Dict[str, object] = {}
    for slot, required in pattern.slot_layout:
        values = collected[slot]
        if values:
            bindings[slot] = values[0] if len(values) == 1 else tuple(values)
        elif required:
            bindings[slot] = MASK
    return bindings, unmapped


def _flatten(value) -> List[object]:
    return list(value) if isinstance(value, tuple) else [value]


def _slot_of(instr: Instruction, entity: Entity) -> Optional[str]:
    target = entity_value(entity)
    for slot, value in instr.bindings.items():
        if value == MASK:
            continue
        if any(item == target for item in _flatten(value)):
            return slot
    return None


def instruction_divergence(
    instr: Instruction,
    unit: ActionUnit,
    cfg: SynthesisConfig,
    spec: DslSpec
) -> float:
    """Weighted span distance, structure mismatch and unmapped entity count of one instruction."""
    if instr.operation == NOOP:
        return cfg.lambda_unmapped * len(unit.entities)

    mapped = []
    unmapped = 0
    role_mismatch = 0
    for entity in unit.entities:
        slot = _slot_of(instr, entity)
        if slot is None:
            unmapped += 1
        else:
            mapped.append(entity)
        if entity.role == "object":
            if slot is None or spec.parameters[slot].kind != "reagent":
                role_mismatch += 1

    rendering = [instr.operation] + [t for e in mapped for t in _tokens(e.surface)]
    clause = _tokens(unit.clause)
    longest = max(len(rendering), len(clause))
    span = edit_distance(rendering, clause) / longest if longest else 0.0

    unbound = 0
    if instr.pattern is not None:
        unbound = sum(1 for slot in instr.pattern.slot_names
                      if not instr.bound(slot) or instr.bindings.get(slot) == MASK)

    return (cfg.lambda_span * span
            + cfg.lambda_structure * (unbound + role_mismatch)
            + cfg.lambda_unmapped * unmapped)


def divergence(
    program: DslProgram,
    entities: EntitySequence,
    cfg: SynthesisConfig,
    spec: DslSpec
) -> float:
    """
    Score a program against the entity sequence it was built from.

    Raises:
        LengthMismatch: If the program and the sequence cover different action counts
    """
    units = entities.units()
    if len(units) != len(program.instructions):
        raise LengthMismatch(
            f"program has {len(program.instructions)} instructions for {len(units)} actions"
        )
    return sum(instruction_divergence(instr, unit, cfg, spec)
               for instr, unit in zip(program.instructions, units))


def _unbound_optional(instr: Instruction) -> int:
    if instr.pattern is None:
        return 0
    return sum(1 for slot, required in instr.pattern.slot_layout
               if not required and not instr.bound(slot))


def _instantiate(spec: DslSpec, unit: ActionUnit, choice: Optional[Choice]) -> Instruction:
    if choice is None:
        instr = Instruction(operation=NOOP, step=unit.step, action=unit.action)
        instr.flags.append("review")
        return instr
    operation, pattern = choice
    bindings, _ = bind_entities(spec, pattern, unit.entities)
    return Instruction(operation=operation, pattern=pattern, bindings=bindings,
                       step=unit.step, action=unit.action)


def _pattern_weights(patterns: Sequence[ProgramPattern], cfg: SynthesisConfig) -> List[float]:
    return [pattern.size ** (-cfg.size_prior) for pattern in patterns]


def _draw(unit: ActionUnit, spec: DslSpec, cfg: SynthesisConfig, rng: random.Random) -> Optional[Choice]:
    if unit.placeholder:
        return None
    names = [name for name, _ in unit.candidates]
    scores = [max(score, 1e-9) for _, score in unit.candidates]
    operation = names[0] if len(names) == 1 else rng.choices(names, weights=scores)[0]
    patterns = spec.operation(operation).patterns
    if len(patterns) == 1:
        return operation, patterns[0]
    return operation, rng.choices(patterns, weights=_pattern_weights(patterns, cfg))[0]


def _program(instructions: List[Instruction], metadata) -> DslProgram:
    return DslProgram(instructions=instructions, metadata=dict(metadata))


def sample_program(
    entities: EntitySequence,
    spec: DslSpec,
    cfg: SynthesisConfig,
    rng: random.Random
) -> DslProgram:
    """
    Draw one program: per action, an operation from its candidate ranking and
    a pattern with probability proportional to size^-prior; entities bound
    greedily. Actions without candidates become flagged no-ops.
    """
    units = entities.units()
    instructions = [_instantiate(spec, unit, _draw(unit, spec, cfg, rng)) for unit in units]
    return _program(instructions, entities.metadata)


def _proposals(spec: DslSpec, op: OperationSchema, entity: Entity) -> List[str]:
    labels = sorted({label for slot in op.slots for label in spec.parameters[slot.name].labels})
    if entity.value is not None and isinstance(entity.value, Quantity):
        dimension_label = {
            "volume-mL": "volume", "mass-g": "mass", "temperature-C": "temperature",
            "duration-s": "duration", "rate": "speed", "count": "count",
        }.get(entity.value.dimension)
        labels = [label for label in labels if label == dimension_label]
    else:
        labels = [label for label in labels if label not in QUANTITY_LABELS]
    return [label for label in labels if label != entity.label]


def refine_labels(
    program: DslProgram,
    entities: EntitySequence,
    cfg: SynthesisConfig,
    rng: random.Random,
    spec: DslSpec
) -> Tuple[EntitySequence, DslProgram]:
    """
    Greedy label edits. An entity whose label no slot of its instruction's
    operation accepts may take a label from that operation's slot vocabulary
    (restricted to its unit dimension for quantities); an edit is kept only if
    it strictly lowers the instruction's divergence. Each pass visits the
    instructions in an order drawn from rng; passes repeat until one accepts
    nothing.

    Returns:
        (refined sequence, rebound program); divergence never increases
    """
    sequence = copy.deepcopy(entities)
    program = copy.deepcopy(program)
    units = sequence.units()

    changed = True
    while changed:
        changed = False
        order = list(range(len(program.instructions)))
        rng.shuffle(order)
        for index in order:
            instr, unit = program.instructions[index], units[index]
            if instr.operation == NOOP or instr.pattern is None:
                continue
            op = spec.operation(instr.operation)
            accepted = {label for slot in op.slots for label in spec.parameters[slot.name].labels}
            for position, entity in enumerate(unit.entities):
                if entity.label in accepted:
                    continue
                current = instruction_divergence(instr, unit, cfg, spec)
                best = None
                for label in _proposals(spec, op, entity):
                    unit.entities[position] = replace(entity, label=label)
                    trial = _instantiate(spec, unit, (instr.operation, instr.pattern))
                    score = instruction_divergence(trial, unit, cfg, spec)
                    if score < current - 1e-12 and (best is None or score < best[0]):
                        best = (score, label, trial)
                    unit.entities[position] = entity
                if best is not None:
                    unit.entities[position] = replace(entity, label=best[1])
                    logger.debug("Relabeled %r %s -> %s", entity.surface, entity.label, best[1])
                    program.instructions[index] = best[2]
                    instr = best[2]
                    changed = True
    return sequence, program


def _choice_key(instr: Instruction, score: float) -> Tuple:
    names = instr.pattern.slot_names if instr.pattern is not None else ()
    return (round(score, 9), _unbound_optional(instr), instr.operation, names)


def _chain(
    entities: EntitySequence,
    spec: DslSpec,
    cfg: SynthesisConfig,
    rng: random.Random
) -> Tuple[DslProgram, float, EntitySequence]:
    sequence = entities
    units = sequence.units()
    best: List[Optional[Choice]] = [None] * len(units)
    best_keys: List[Optional[Tuple]] = [None] * len(units)
    previous = None
    stable = 0
    program = DslProgram(metadata=dict(entities.metadata))
    score = 0.0

    for iteration in range(cfg.max_iterations):
        units = sequence.units()
        # re-key the incumbents under the current labels
        for i, unit in enumerate(units):
            if best[i] is not None or unit.placeholder:
                instr = _instantiate(spec, unit, best[i])
                best_keys[i] = _choice_key(instr, instruction_divergence(instr, unit, cfg, spec))
        for _ in range(cfg.samples_per_iteration):
            for i, unit in enumerate(units):
                if unit.placeholder:
                    continue
                choice = _draw(unit, spec, cfg, rng)
                instr = _instantiate(spec, unit, choice)
                key = _choice_key(instr, instruction_divergence(instr, unit, cfg, spec))
                if best_keys[i] is None or key < best_keys[i]:
                    best[i], best_keys[i] = choice, key

        program = _program([_instantiate(spec, u, c) for u, c in zip(units, best)],
                           entities.metadata)
        sequence, program = refine_labels(program, sequence, cfg, rng, spec)
        score = divergence(program, sequence, cfg, spec)
        logger.debug("EM iteration %d: divergence %.6f", iteration, score)

        if previous is not None and abs(score - previous) < 1e-12:
            stable += 1
            if stable >= 2:
                break
        else:
            stable = 0
        previous = score

    return program, score, sequence


def synthesize(
    entities: EntitySequence,
    spec: DslSpec,
    cfg: Optional[SynthesisConfig] = None
) -> Tuple[DslProgram, float]:
    """
    Search for the program minimizing the divergence to the entity sequence.

    Runs cfg.restarts independent EM chains, each seeded from cfg.seed and its
    chain index, and returns the lowest-scoring program (ties go to the lower
    chain index).

    Args:
        entities: Entity sequence from pre-processing
        spec: The DSL spec
        cfg: Weights, iteration cap, restarts and seed

    Returns:
        (program, divergence)
    """
    cfg = cfg or SynthesisConfig()
    units = entities.units()
    if not units:
        return DslProgram(metadata=dict(entities.metadata)), 0.0

    best = None
    for chain in range(cfg.restarts):
        rng = random.Random(f"{cfg.seed}:{chain}")
        program, score, sequence = _chain(entities, spec, cfg, rng)
        if best is None or score < best[1] - 1e-12:
            best = (program, score, sequence)

    program, score, _ = best
    program.metadata.update({"spec": spec.name, "seed": cfg.seed})
    program.flags.extend(copy.deepcopy(entities.flags))
    for index, instr in enumerate(program.instructions):
        if instr.operation == NOOP:
            program.flags.append(ReviewFlag(
                reason="no operation matched; placeholder needs review",
                instruction=index, step=instr.step,
            ))
    logger.info("Synthesized %d instructions (divergence %.4f)", len(program), score)
    return program, score


# ---------------------------------------------------------------------------
# Control flow
# ---------------------------------------------------------------------------

def _bind_delay(instr: Instruction, spec: DslSpec, duration: Quantity) -> bool:
    op = spec.operations.get(instr.operation)
    if op is None or op.slot("duration") is None or instr.bound("duration"):
        return False
    bound = [slot for slot in instr.bindings if instr.bound(slot)] + ["duration"]
    pattern = fit_pattern(op, bound)
    if pattern is None:
        return False
    instr.bindings["duration"] = duration
    instr.pattern = pattern
    return True


def _fold_call(instr: Instruction) -> Call:
    args = tuple((slot, value) for slot, value in instr.bindings.items()
                 if instr.bound(slot) and value != MASK)
    return Call(instr.operation, args)


def detect_control_flow(
    entities: EntitySequence,
    program: DslProgram,
    spec: Optional[DslSpec] = None
) -> DslProgram:
    """
    Attach control structure recovered from signal clauses.

    - "After <duration>[ more]," binds the duration to the preceding
      instruction's free duration slot.
    - "Once the X is done," sets precond = check_done(target = "X").
    - "<verb> ... when done" folds the instruction into the preceding
      instruction's postcond.
    - Loop (repeat/until/while/for each) and branch (if/when/once/in case)
      signals wrap the smallest instruction range holding the governed verbs.
    - Signals with no governed instruction become UnresolvedControlSignal flags.

    Args:
        entities: The entity sequence the program was synthesized from
        program: Program aligned one-to-one with entities.units()
        spec: DSL spec; without it delays are flagged instead of bound

    Returns:
        New program with wrappers, guards and folds applied
    """
    units = entities.units()
    if len(units) != len(program.instructions):
        raise LengthMismatch(
            f"program has {len(program.instructions)} instructions for {len(units)} actions"
        )
    result = copy.deepcopy(program)
    instructions = result.instructions
    keep: List[bool] = [True] * len(instructions)
    pending: List[Tuple[int, object]] = []

    def previous(i: int) -> Optional[int]:
        for j in range(i - 1, -1, -1):
            if keep[j]:
                return j
        return None

    for i, unit in enumerate(units):
        instr = instructions[i]
        for signal in unit.signals:
            if signal.kind == "delay":
                durations = [e.value for e in signal.entities if isinstance(e.value, Quantity)
                             and e.value.dimension == "duration-s"]
                j = previous(i)
                if not durations or j is None or spec is None \
                        or not _bind_delay(instructions[j], spec, durations[0]):
                    result.flags.append(ReviewFlag(
                        reason=f"delay '{signal.text.strip()}' has no free duration slot to bind",
                        instruction=i, step=unit.step,
                    ))
            elif signal.kind == "guard":
                instr.precond = Call("check_done", (("target", signal.predicate),))
            else:
                pending.append((i, signal))

        if unit.fold:
            j = previous(i)
            if j is not None and instr.operation != NOOP:
                instructions[j].postcond = _fold_call(instr)
                keep[i] = False

    index_map: Dict[int, int] = {}
    for i, kept in enumerate(keep):
        if kept:
            index_map[i] = len(index_map)

    flat = {(unit.step, unit.action): i for i, unit in enumerate(units)}
    wrappers: Dict[Tuple[str, int, int], ControlWrapper] = {}
    for i, signal in pending:
        governed = [flat[(units[i].step, a)] for a in signal.governs if (units[i].step, a) in flat] or [i]
        # folded units produce no instruction; only an all-folded domain falls back
        positions = [index_map[g] for g in governed if keep[g]]
        if not positions:
            target = previous(i)
            if target is None:
                _unresolved(result, signal.text, units[i].step)
                continue
            positions = [index_map[target]]
        key = (signal.kind, min(positions), max(positions))
        wrapper = wrappers.get(key)
        if wrapper is None:
            wrapper = ControlWrapper(kind=signal.kind, signal=signal.keyword,
                                     start=key[1], end=key[2])
            wrappers[key] = wrapper
        if signal.predicate and not wrapper.predicate:
            wrapper.predicate = signal.predicate
        if signal.keyword != "repeat" and wrapper.signal == "repeat":
            wrapper.signal = signal.keyword
        if signal.count is not None:
            wrapper.count = signal.count

    for entry in entities.steps:
        for signal in entry.unresolved:
            _unresolved(result, signal.text, entry.step.index)

    result.instructions = [instr for instr, kept in zip(instructions, keep) if kept]
    result.controls = sorted(wrappers.values(), key=lambda w: (w.start, -w.end, w.kind))
    return result


def _unresolved(program: DslProgram, text: str, step: int) -> None:
    error = UnresolvedControlSignal(f"signal '{text.strip()}' governs no instruction", step=step)
    logger.info(str(error))
    program.flags.append(ReviewFlag(reason=f"UnresolvedControlSignal: {error.message}", step=step))
