"""
DSL Core

Loads DSL specifications (CFG syntax plus operation/condition/parameter
semantics), enumerates the legal program patterns of each operation and
validates programs against them. Also holds the program model shared by every
later stage and its two serializations: the readable listing
(`op(name = value, ...);`) and the JSON artifact form.

Core functions:
    - load_dsl_spec() / build_dsl_spec() - Load and validate a spec file or mapping
    - enumerate_patterns() - Slot layouts an operation may take (o*)
    - validate_program() - Per-instruction syntax report
    - fit_pattern() - Smallest pattern covering a set of bound slots
    - render_listing() / parse_listing() - Readable program listing
    - program_to_dict() / program_from_dict() - JSON artifact form

Usage:
    from protoflow.dsl import load_dsl_spec, enumerate_patterns, validate_program

    spec = load_dsl_spec("protoflow/examples/cooking_spec.yaml")
    patterns = enumerate_patterns(spec.operation("add"), spec)
    report = validate_program(program, spec)
"""

import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Literal, Optional, Sequence, Tuple, Union

import yaml
from pydantic import BaseModel, ValidationError

from protoflow.errors import SpecParseError, SpecValidationError
from protoflow.quantities import DIMENSIONS, Quantity, parse_quantity

logger = logging.getLogger(__name__)

MASK = "<<<MASK>>>"
NOOP = "noop"
VALUE_CLASSES = ("STRING", "REF", "QUANTITY", "CALL")
PATTERN_CAP = 2 ** 12
GUARD_SLOTS = ("precond", "postcond")

# Pseudo-label vocabulary shared by pre-processing, parameter schemas and the NER prompt
ENTITY_LABELS = (
    "reagent",
    "device",
    "container",
    "volume",
    "mass",
    "temperature",
    "duration",
    "concentration",
    "speed",
    "count",
    "other",
)


# ---------------------------------------------------------------------------
# Spec file schema
# ---------------------------------------------------------------------------

class ParameterEntry(BaseModel):
    kind: Literal["reagent", "container", "quantity", "text"] = "text"
    unit: Optional[str] = None
    labels: List[str] = []
    min: int = 1
    max: int = 1
    aliases: Dict[str, str] = {}
    range: Optional[str] = None
    description: str = ""


class OperationEntry(BaseModel):
    keyword: str
    synonyms: List[str] = []
    emits: Optional[str] = None
    consumes: bool = False
    key: List[str] = []
    defaults: Dict[str, str] = {}
    description: str = ""


class GuardEntry(BaseModel):
    established_by: Optional[str] = None
    parameter: str = "target"


class ConstraintEntry(BaseModel):
    operation: str
    requires: Optional[List[str]] = None
    excludes: Optional[List[str]] = None


class SemanticsEntry(BaseModel):
    control: Dict[str, List[str]] = {}
    operations: Dict[str, OperationEntry]
    conditions: Dict[str, str] = {}
    parameters: Dict[str, ParameterEntry]
    guards: Dict[str, GuardEntry] = {}
    constraints: List[ConstraintEntry] = []
    vessels: List[str] = []
    default_container: str = "vessel"


class VariablesEntry(BaseModel):
    control: List[str] = []
    operations: List[str]
    conditions: List[str] = []
    parameters: List[str]


class SpecFile(BaseModel):
    name: str
    start: str
    variables: VariablesEntry
    terminals: List[str]
    productions: Dict[str, List[str]]
    semantics: SemanticsEntry


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterSchema:
    name: str
    kind: str
    unit: Optional[str]
    labels: Tuple[str, ...]
    min_arity: int
    max_arity: int
    value_classes: Tuple[str, ...]
    aliases: Dict[str, Quantity] = field(default_factory=dict, hash=False)
    suggested: Optional[Quantity] = None


@dataclass(frozen=True)
class SlotDescriptor:
    name: str
    required: bool
    min_arity: int = 1
    max_arity: int = 1


@dataclass(frozen=True)
class ProgramPattern:
    """One legal slot layout of an operation, e.g. two- vs three-input `add`."""

    operation: str
    slot_layout: Tuple[Tuple[str, bool], ...]

    @property
    def slot_names(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.slot_layout)

    @property
    def required_slots(self) -> Tuple[str, ...]:
        return tuple(name for name, required in self.slot_layout if required)

    @property
    def size(self) -> int:
        return max(1, len(self.slot_layout))


@dataclass(frozen=True)
class OperationSchema:
    name: str
    variable: str
    slots: Tuple[SlotDescriptor, ...]
    patterns: Tuple[ProgramPattern, ...]
    synonyms: Tuple[str, ...] = ()
    emits: Optional[str] = None
    consumes: bool = False
    key: Tuple[str, ...] = ()
    defaults: Dict[str, Any] = field(default_factory=dict, hash=False)

    def slot(self, name: str) -> Optional[SlotDescriptor]:
        for slot in self.slots:
            if slot.name == name:
                return slot
        return None


@dataclass(frozen=True)
class DslSpec:
    """The loaded DSL: CFG syntax (S, V, Σ, R) plus semantics Λ."""

    name: str
    start_symbol: str
    variables: Dict[str, Tuple[str, ...]]
    terminals: FrozenSet[str]
    productions: Dict[str, Tuple[Tuple[str, ...], ...]]
    operations: Dict[str, OperationSchema]
    parameters: Dict[str, ParameterSchema]
    control: Dict[str, Tuple[str, ...]]
    guards: Dict[str, GuardEntry]
    constraints: Tuple[ConstraintEntry, ...]
    vessels: Tuple[str, ...]
    default_container: str

    def operation(self, keyword: str) -> OperationSchema:
        try:
            return self.operations[keyword]
        except KeyError:
            raise KeyError(f"Operation '{keyword}' is not declared in spec '{self.name}'")

    @property
    def operation_names(self) -> List[str]:
        return sorted(self.operations)

    def control_keywords(self, variable: str) -> Tuple[str, ...]:
        return self.control.get(variable, ())

    def is_vessel(self, text: str) -> bool:
        words = re.findall(r"[a-z]+", text.lower())
        return bool(words) and words[-1] in self.vessels

    def alias(self, parameter: str, text: str) -> Optional[Quantity]:
        schema = self.parameters.get(parameter)
        if schema is None:
            return None
        return schema.aliases.get(text.strip().lower())

    def alias_table(self) -> List[Tuple[str, str]]:
        """All (proxy phrase, parameter) pairs, longest phrase first."""
        pairs = [
            (phrase, name)
            for name, schema in self.parameters.items()
            for phrase in schema.aliases
        ]
        return sorted(pairs, key=lambda pair: (-len(pair[0]), pair[0]))


@dataclass(frozen=True)
class Ref:
    """Symbolic reference to an intermediate reagent or a container."""

    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Call:
    """A guard or folded instruction such as check_done(target = "beef")."""

    name: str
    args: Tuple[Tuple[str, Any], ...] = ()

    def arg(self, key: str) -> Any:
        for name, value in self.args:
            if name == key:
                return value
        return None


Value = Union[str, Quantity, Ref, Call, Tuple[Any, ...]]


@dataclass
class Instruction:
    operation: str
    pattern: Optional[ProgramPattern] = None
    bindings: Dict[str, Value] = field(default_factory=dict)
    emit: Optional[str] = None
    precond: Optional[Call] = None
    postcond: Optional[Call] = None
    step: int = 0
    action: int = 0
    flags: List[str] = field(default_factory=list)

    def bound(self, slot: str) -> bool:
        value = self.bindings.get(slot)
        return value is not None and value != ()


@dataclass
class ControlWrapper:
    kind: str  # "loop" or "branch"
    signal: str
    start: int
    end: int
    predicate: str = ""
    count: Optional[int] = None


@dataclass
class ReviewFlag:
    reason: str
    instruction: Optional[int] = None
    step: Optional[int] = None
    parameter: Optional[str] = None

    def describe(self) -> str:
        where = []
        if self.step is not None:
            where.append(f"step {self.step}")
        if self.instruction is not None:
            where.append(f"instruction {self.instruction}")
        if self.parameter is not None:
            where.append(f"parameter '{self.parameter}'")
        prefix = ", ".join(where)
        return f"{prefix}: {self.reason}" if prefix else self.reason


@dataclass
class DslProgram:
    """p(c): ordered instructions plus control wrappers and review flags."""

    instructions: List[Instruction] = field(default_factory=list)
    controls: List[ControlWrapper] = field(default_factory=list)
    flags: List[ReviewFlag] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instructions)

    @property
    def step_count(self) -> int:
        return len({instr.step for instr in self.instructions})


@dataclass
class SlotViolation:
    instruction: Optional[int]
    slot: Optional[str]
    message: str


@dataclass
class ValidationReport:
    parses: List[bool] = field(default_factory=list)
    violations: List[SlotViolation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        """True when the program is syntax-verified."""
        return not self.violations


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def load_dsl_spec(path: str) -> DslSpec:
    """
    Load and validate a DSL spec file.

    Args:
        path: Path to the YAML spec file

    Returns:
        Fully validated DslSpec

    Raises:
        FileNotFoundError: If the file doesn't exist
        SpecParseError: If the file is not YAML or misses schema sections
        SpecValidationError: On dangling symbols or unsatisfiable arity
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"DSL spec file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise SpecParseError(f"not valid YAML ({e})", symbol=os.path.basename(path))

    spec = build_dsl_spec(data)
    logger.info("Loaded DSL spec '%s' with %d operations", spec.name, len(spec.operations))
    return spec


def build_dsl_spec(data: Any) -> DslSpec:
    """Build a DslSpec from an already parsed mapping (see load_dsl_spec)."""
    if not isinstance(data, dict):
        raise SpecParseError("spec must be a mapping with variables/terminals/productions/semantics")
    try:
        raw = SpecFile.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise SpecParseError(first["msg"], symbol=location)

    _check_symbols(raw)
    parameters = _build_parameters(raw)
    control = {name: tuple(words) for name, words in raw.semantics.control.items()}

    spec = DslSpec(
        name=raw.name,
        start_symbol=raw.start,
        variables={
            "control": tuple(raw.variables.control),
            "operations": tuple(raw.variables.operations),
            "conditions": tuple(raw.variables.conditions),
            "parameters": tuple(raw.variables.parameters),
        },
        terminals=frozenset(raw.terminals),
        productions={
            lhs: tuple(tuple(alt.split()) for alt in alternatives)
            for lhs, alternatives in raw.productions.items()
        },
        operations={},
        parameters=parameters,
        control=control,
        guards=dict(raw.semantics.guards),
        constraints=tuple(raw.semantics.constraints),
        vessels=tuple(word.lower() for word in raw.semantics.vessels),
        default_container=raw.semantics.default_container,
    )

    for variable in raw.variables.operations:
        entry = raw.semantics.operations.get(variable)
        if entry is None:
            raise SpecValidationError("operation has no semantics entry", symbol=variable)
        spec.operations[entry.keyword] = _build_operation(spec, variable, entry)

    return spec


def _all_variables(raw: SpecFile) -> List[str]:
    v = raw.variables
    return v.control + v.operations + v.conditions + v.parameters


def _check_symbols(raw: SpecFile) -> None:
    variables = _all_variables(raw)
    seen = set()
    for symbol in variables:
        if symbol in seen:
            raise SpecValidationError("declared in more than one variable set", symbol=symbol)
        seen.add(symbol)
    for symbol in raw.terminals:
        if symbol in seen:
            raise SpecValidationError("declared as both variable and terminal", symbol=symbol)

    if raw.start not in seen:
        raise SpecValidationError("start symbol is not a declared variable", symbol=raw.start)

    terminals = set(raw.terminals)
    conditions = set(raw.variables.conditions)
    parameters = set(raw.variables.parameters)
    operations = set(raw.variables.operations)

    for lhs, alternatives in raw.productions.items():
        if lhs not in seen:
            raise SpecValidationError("production for undeclared variable", symbol=lhs)
        for alternative in alternatives:
            symbols = [token.rstrip("?") for token in alternative.split()]
            for symbol in symbols:
                if symbol not in seen and symbol not in terminals:
                    raise SpecValidationError(
                        f"referenced by production of {lhs} but not declared", symbol=symbol
                    )
                if lhs in operations and symbol not in terminals and symbol not in conditions:
                    raise SpecValidationError(
                        f"operation {lhs} may only name conditions", symbol=symbol
                    )
                if lhs in conditions and symbol not in parameters:
                    raise SpecValidationError(
                        f"condition {lhs} may only name parameters", symbol=symbol
                    )
                if lhs in parameters and symbol not in VALUE_CLASSES:
                    raise SpecValidationError(
                        f"parameter {lhs} may only produce value classes", symbol=symbol
                    )

    for variable in raw.variables.operations:
        if variable not in raw.productions:
            raise SpecValidationError("operation has no production", symbol=variable)


def _build_parameters(raw: SpecFile) -> Dict[str, ParameterSchema]:
    parameters: Dict[str, ParameterSchema] = {}
    for name in raw.variables.parameters:
        entry = raw.semantics.parameters.get(name, ParameterEntry())
        if entry.unit is not None and entry.unit not in DIMENSIONS:
            raise SpecValidationError(f"unknown unit dimension '{entry.unit}'", symbol=name)
        if entry.min < 0 or entry.min > entry.max:
            raise SpecValidationError(
                f"unsatisfiable arity bounds min={entry.min} max={entry.max}", symbol=name
            )
        for label in entry.labels:
            if label not in ENTITY_LABELS:
                raise SpecValidationError(f"unknown entity label '{label}'", symbol=name)

        aliases = {}
        for phrase, literal in entry.aliases.items():
            quantity = parse_quantity(literal)
            if quantity is None:
                raise SpecValidationError(f"alias '{phrase}' is not a quantity: {literal}", symbol=name)
            aliases[phrase.lower()] = quantity

        suggested = None
        if entry.range is not None:
            suggested = parse_quantity(entry.range)
            if suggested is None:
                raise SpecValidationError(f"range is not a quantity: {entry.range}", symbol=name)

        classes = raw.productions.get(name)
        value_classes = tuple(alt.strip() for alt in classes) if classes else VALUE_CLASSES
        parameters[name] = ParameterSchema(
            name=name,
            kind=entry.kind,
            unit=entry.unit,
            labels=tuple(entry.labels),
            min_arity=entry.min,
            max_arity=entry.max,
            value_classes=value_classes,
            aliases=aliases,
            suggested=suggested,
        )
    return parameters


def _build_operation(spec: DslSpec, variable: str, entry: OperationEntry) -> OperationSchema:
    layouts = _derive(spec, (variable,), True, ())
    if len(layouts) > PATTERN_CAP:
        raise SpecValidationError(
            f"pattern space exceeds {PATTERN_CAP} combinations", symbol=variable
        )

    keyword = entry.keyword
    constraints = [c for c in spec.constraints if c.operation == variable]
    patterns = []
    seen = set()
    for layout in layouts:
        names = [name for name, _ in layout]
        if len(set(names)) != len(names):
            raise SpecValidationError("slot repeated within one layout", symbol=variable)
        if not _satisfies(names, constraints) or layout in seen:
            continue
        seen.add(layout)
        patterns.append(ProgramPattern(operation=keyword, slot_layout=layout))

    if not patterns:
        raise SpecValidationError("no pattern survives the semantic constraints", symbol=variable)
    patterns.sort(key=lambda p: p.slot_names)

    order: List[str] = []
    required_everywhere = set(patterns[0].required_slots)
    for pattern in patterns:
        required_everywhere &= set(pattern.required_slots)
        for name in pattern.slot_names:
            if name not in order:
                order.append(name)
    slots = tuple(
        SlotDescriptor(
            name=name,
            required=name in required_everywhere,
            min_arity=spec.parameters[name].min_arity,
            max_arity=spec.parameters[name].max_arity,
        )
        for name in order
    )

    for name in list(entry.key) + list(entry.defaults):
        if name not in order:
            raise SpecValidationError(f"names parameter '{name}' it has no slot for", symbol=variable)

    defaults: Dict[str, Any] = {}
    for name, literal in entry.defaults.items():
        quantity = parse_quantity(literal)
        defaults[name] = quantity if quantity is not None else literal

    return OperationSchema(
        name=keyword,
        variable=variable,
        slots=slots,
        patterns=tuple(patterns),
        synonyms=tuple(word.lower() for word in entry.synonyms),
        emits=entry.emits,
        consumes=entry.consumes,
        key=tuple(entry.key),
        defaults=defaults,
    )


def _derive(
    spec: DslSpec,
    symbols: Sequence[str],
    required: bool,
    stack: Tuple[str, ...]
) -> List[Tuple[Tuple[str, bool], ...]]:
    """Expand a symbol sequence into every slot layout it can derive."""
    results: List[Tuple[Tuple[str, bool], ...]] = [()]
    for token in symbols:
        optional = token.endswith("?")
        symbol = token.rstrip("?")
        slot_required = required and not optional

        if symbol in spec.terminals:
            continue
        if symbol in spec.parameters:
            options = [((symbol, slot_required),)]
        else:
            if symbol in stack:
                raise SpecValidationError("pattern grammar is recursive", symbol=symbol)
            options = []
            for alternative in spec.productions.get(symbol, ()):
                options.extend(_derive(spec, alternative, slot_required, stack + (symbol,)))
        if optional:
            options = [()] + options

        results = [head + tail for head in results for tail in options]
        if len(results) > PATTERN_CAP:
            raise SpecValidationError(
                f"pattern space exceeds {PATTERN_CAP} combinations", symbol=stack[0] if stack else symbol
            )
    return results


def _satisfies(names: Sequence[str], constraints: Sequence[ConstraintEntry]) -> bool:
    present = set(names)
    for constraint in constraints:
        if constraint.requires and constraint.requires[0] in present:
            if not all(other in present for other in constraint.requires[1:]):
                return False
        if constraint.excludes and sum(name in present for name in constraint.excludes) > 1:
            return False
    return True


# ---------------------------------------------------------------------------
# Patterns
# ---------------------------------------------------------------------------

def enumerate_patterns(op: OperationSchema, spec: DslSpec) -> List[ProgramPattern]:
    """
    Return o*, every slot layout the operation may take, in lexicographic order.

    Args:
        op: Operation schema belonging to spec
        spec: The DSL spec

    Returns:
        Non-empty list of ProgramPattern
    """
    if spec.operations.get(op.name) is not op:
        raise KeyError(f"Operation '{op.name}' does not belong to spec '{spec.name}'")
    return list(op.patterns)


def derives(spec: DslSpec, pattern: ProgramPattern) -> bool:
    """Replay the productions of the pattern's operation and check it is derivable."""
    op = spec.operations.get(pattern.operation)
    if op is None:
        return False
    constraints = [c for c in spec.constraints if c.operation == op.variable]
    for layout in _derive(spec, (op.variable,), True, ()):
        if layout == pattern.slot_layout and _satisfies([n for n, _ in layout], constraints):
            return True
    return False


def fit_pattern(op: OperationSchema, slot_names: Sequence[str]) -> Optional[ProgramPattern]:
    """
    Pick the smallest pattern whose slots cover slot_names and whose required
    slots are all among slot_names. Ties go to the lexicographically first.
    """
    wanted = set(slot_names)
    best = None
    for pattern in op.patterns:
        names = set(pattern.slot_names)
        if wanted <= names and set(pattern.required_slots) <= wanted:
            if best is None or len(pattern.slot_layout) < len(best.slot_layout):
                best = pattern
    return best


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def value_class(value: Any) -> str:
    if isinstance(value, Quantity):
        return "QUANTITY"
    if isinstance(value, Ref):
        return "REF"
    if isinstance(value, Call):
        return "CALL"
    return "STRING"


def _check_value(spec: DslSpec, slot: str, value: Value) -> List[str]:
    problems = []
    schema = spec.parameters[slot]
    items = value if isinstance(value, tuple) else (value,)
    if len(items) < schema.min_arity or len(items) > schema.max_arity:
        problems.append(
            f"arity {len(items)} outside [{schema.min_arity}, {schema.max_arity}]"
        )
    for item in items:
        if item == MASK:
            continue
        kind = value_class(item)
        if kind not in schema.value_classes:
            problems.append(f"value class {kind} not accepted (expects {', '.join(schema.value_classes)})")
    return problems


def validate_program(program: DslProgram, spec: DslSpec) -> ValidationReport:
    """
    Check every instruction against the pattern space of its operation.

    Args:
        program: The program to check
        spec: The DSL spec

    Returns:
        ValidationReport; the program is syntax-verified iff report.ok
    """
    report = ValidationReport()
    emits_seen: Dict[str, int] = {}

    for index, instr in enumerate(program.instructions):
        problems: List[SlotViolation] = []

        if instr.operation == NOOP:
            report.parses.append(True)
            continue

        op = spec.operations.get(instr.operation)
        if op is None:
            problems.append(SlotViolation(index, None, f"unknown operation '{instr.operation}'"))
        else:
            bound = [slot for slot in instr.bindings if instr.bound(slot)]
            pattern = instr.pattern if instr.pattern is not None else fit_pattern(op, bound)
            if pattern is None or pattern not in op.patterns:
                problems.append(SlotViolation(index, None, "slot layout is not in the pattern space"))
            else:
                for slot in instr.bindings:
                    if slot not in pattern.slot_names:
                        problems.append(SlotViolation(index, slot, "unknown slot for this pattern"))
                for slot in pattern.required_slots:
                    if not instr.bound(slot):
                        problems.append(SlotViolation(index, slot, "required slot is not bound"))
            for slot, value in instr.bindings.items():
                if slot in spec.parameters and instr.bound(slot):
                    for message in _check_value(spec, slot, value):
                        problems.append(SlotViolation(index, slot, message))
            if instr.emit is not None and op.emits is None:
                problems.append(SlotViolation(index, "emit", "operation does not emit"))

        for guard in GUARD_SLOTS:
            value = getattr(instr, guard)
            if value is not None and not isinstance(value, Call):
                problems.append(SlotViolation(index, guard, "guard must be a call"))

        if instr.emit is not None:
            if instr.emit in emits_seen:
                problems.append(SlotViolation(
                    index, "emit", f"'{instr.emit}' already emitted by instruction {emits_seen[instr.emit]}"
                ))
            emits_seen[instr.emit] = index

        report.parses.append(not problems)
        report.violations.extend(problems)

    report.violations.extend(_check_controls(program))
    return report


def _check_controls(program: DslProgram) -> List[SlotViolation]:
    problems = []
    n = len(program.instructions)
    for wrapper in program.controls:
        if not 0 <= wrapper.start <= wrapper.end < n:
            problems.append(SlotViolation(
                None, None, f"{wrapper.kind} range [{wrapper.start}, {wrapper.end}] out of bounds"
            ))
    for a in program.controls:
        for b in program.controls:
            if a is b:
                continue
            overlap = a.start <= b.end and b.start <= a.end
            nested = (a.start <= b.start and b.end <= a.end) or (b.start <= a.start and a.end <= b.end)
            if overlap and not nested:
                problems.append(SlotViolation(
                    None, None, f"control ranges [{a.start}, {a.end}] and [{b.start}, {b.end}] cross"
                ))
    return problems


# ---------------------------------------------------------------------------
# Listing form
# ---------------------------------------------------------------------------

def render_value(value: Any) -> str:
    """Listing rendering of a slot value."""
    if isinstance(value, tuple):
        return "[" + ", ".join(render_value(item) for item in value) + "]"
    if isinstance(value, Quantity):
        return value.render()
    if isinstance(value, Ref):
        return value.name
    if isinstance(value, Call):
        args = ", ".join(f"{name} = {render_value(arg)}" for name, arg in value.args)
        return f"{value.name}({args})"
    escaped = str(value).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def render_instruction(instr: Instruction) -> str:
    parts = []
    if instr.precond is not None:
        parts.append(f"precond = {render_value(instr.precond)}")
    order = list(instr.pattern.slot_names) if instr.pattern else []
    order += [slot for slot in instr.bindings if slot not in order]
    for slot in order:
        if instr.bound(slot):
            parts.append(f"{slot} = {render_value(instr.bindings[slot])}")
    if instr.emit is not None:
        parts.append(f"emit = {instr.emit}")
    if instr.postcond is not None:
        parts.append(f"postcond = {render_value(instr.postcond)}")
    return f"{instr.operation}({', '.join(parts)});"


def render_listing(program: DslProgram) -> str:
    """Render the program in `op(name = value, ...);` form, one instruction per line."""
    lines = []
    depth = 0
    starts = {}
    ends = {}
    for wrapper in program.controls:
        starts.setdefault(wrapper.start, []).append(wrapper)
        ends.setdefault(wrapper.end, []).append(wrapper)
    for index, instr in enumerate(program.instructions):
        for wrapper in sorted(starts.get(index, []), key=lambda w: -w.end):
            header = f"{wrapper.signal} {wrapper.predicate}".strip()
            if wrapper.count is not None:
                header += f" x{wrapper.count}"
            lines.append("  " * depth + f"# {wrapper.kind}: {header} {{")
            depth += 1
        lines.append("  " * depth + render_instruction(instr))
        for _ in ends.get(index, []):
            depth -= 1
            lines.append("  " * depth + "# }")
    return "\n".join(lines) + ("\n" if lines else "")


_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<string>"(?:[^"\\]|\\.)*")
      | (?P<quantity>\d+(?:\.\d+)?(?:\s*-\s*\d+(?:\.\d+)?)?\s*(?:[A-Za-z°µμ][A-Za-z°µμ/]*))
      | (?P<number>\d+(?:\.\d+)?)
      | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
      | (?P<punct>[()\[\],=;])
    )""",
    re.VERBOSE,
)
_GUARD_ALIASES = {"precond": "precond", "postcond": "postcond", "postcon": "postcond"}


def _tokenize(text: str) -> List[Tuple[str, str]]:
    lines = [line for line in text.splitlines() if not line.lstrip().startswith("#")]
    source = "\n".join(lines)
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        match = _TOKEN_RE.match(source, pos)
        if match is None or match.end() == pos:
            raise ValueError(f"Unexpected listing text at offset {pos}: {source[pos:pos + 20]!r}")
        kind = match.lastgroup
        tokens.append((kind, match.group(kind)))
        pos = match.end()
    return tokens


class _ListingParser:
    def __init__(self, tokens: List[Tuple[str, str]]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Tuple[str, str]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else ("eof", "")

    def take(self, expected: Optional[str] = None) -> Tuple[str, str]:
        token = self.peek()
        if expected is not None and token[1] != expected:
            raise ValueError(f"Expected '{expected}' but found '{token[1]}' (token {self.pos})")
        self.pos += 1
        return token

    def call(self) -> Tuple[str, List[Tuple[str, Any]]]:
        kind, name = self.take()
        if kind != "ident":
            raise ValueError(f"Expected an operation name but found '{name}'")
        self.take("(")
        args = []
        while self.peek()[1] != ")":
            key_kind, key = self.take()
            if key_kind != "ident":
                raise ValueError(f"Expected a slot name but found '{key}'")
            self.take("=")
            args.append((key, self.value()))
            if self.peek()[1] == ",":
                self.take(",")
        self.take(")")
        return name, args

    def value(self) -> Any:
        kind, text = self.peek()
        if kind == "string":
            self.take()
            return bytes(text[1:-1], "utf-8").decode("unicode_escape") if "\\" in text else text[1:-1]
        if kind in ("quantity", "number"):
            self.take()
            quantity = parse_quantity(text)
            if quantity is None:
                raise ValueError(f"Not a quantity: '{text}'")
            return quantity
        if text == "[":
            self.take("[")
            items = []
            while self.peek()[1] != "]":
                items.append(self.value())
                if self.peek()[1] == ",":
                    self.take(",")
            self.take("]")
            return tuple(items)
        if kind == "ident":
            if self.pos + 1 < len(self.tokens) and self.tokens[self.pos + 1][1] == "(":
                name, args = self.call()
                return Call(name, tuple(args))
            self.take()
            return Ref(text)
        raise ValueError(f"Unexpected token '{text}'")


def parse_listing(text: str, spec: Optional[DslSpec] = None) -> DslProgram:
    """
    Parse a program listing in `op(name = value, ...);` form.

    Quoted strings become literals, bare identifiers become references,
    numbers with units become quantities. `emit`, `precond` and `postcond`
    (also spelled `postcon`) are lifted out of the slot bindings.

    Args:
        text: Listing text; lines starting with '#' are ignored
        spec: Optional spec used to assign each instruction its pattern

    Raises:
        ValueError: On malformed listing text
    """
    parser = _ListingParser(_tokenize(text))
    program = DslProgram()
    while parser.peek()[0] != "eof":
        name, args = parser.call()
        if parser.peek()[1] == ";":
            parser.take(";")
        instr = Instruction(operation=name, step=len(program.instructions))
        for key, value in args:
            if key == "emit":
                instr.emit = value.name if isinstance(value, Ref) else str(value)
            elif key in _GUARD_ALIASES:
                setattr(instr, _GUARD_ALIASES[key], value)
            else:
                instr.bindings[key] = value
        if spec is not None and name in spec.operations:
            instr.pattern = fit_pattern(spec.operations[name], list(instr.bindings))
        program.instructions.append(instr)
    return program


# ---------------------------------------------------------------------------
# JSON artifact form
# ---------------------------------------------------------------------------

def encode_value(value: Any) -> Any:
    if isinstance(value, tuple):
        return [encode_value(item) for item in value]
    if isinstance(value, Quantity):
        return {"quantity": value.render(), "text": value.text}
    if isinstance(value, Ref):
        return {"ref": value.name}
    if isinstance(value, Call):
        return {"call": value.name, "args": [[k, encode_value(v)] for k, v in value.args]}
    return value


def decode_value(data: Any) -> Any:
    if isinstance(data, list):
        return tuple(decode_value(item) for item in data)
    if isinstance(data, dict):
        if "quantity" in data:
            quantity = parse_quantity(data["quantity"])
            return Quantity(quantity.value, quantity.unit, quantity.dimension, quantity.high,
                            data.get("text", ""))
        if "ref" in data:
            return Ref(data["ref"])
        if "call" in data:
            return Call(data["call"], tuple((k, decode_value(v)) for k, v in data.get("args", [])))
    return data


def program_to_dict(program: DslProgram) -> Dict[str, Any]:
    """Serialize a program into a JSON-compatible dictionary with stable key order."""
    return {
        "instructions": [
            {
                "operation": instr.operation,
                "pattern": [[name, required] for name, required in instr.pattern.slot_layout]
                if instr.pattern else None,
                "bindings": {slot: encode_value(value) for slot, value in instr.bindings.items()},
                "emit": instr.emit,
                "precond": encode_value(instr.precond) if instr.precond else None,
                "postcond": encode_value(instr.postcond) if instr.postcond else None,
                "step": instr.step,
                "action": instr.action,
                "flags": list(instr.flags),
            }
            for instr in program.instructions
        ],
        "controls": [
            {
                "kind": w.kind,
                "signal": w.signal,
                "start": w.start,
                "end": w.end,
                "predicate": w.predicate,
                "count": w.count,
            }
            for w in program.controls
        ],
        "flags": [
            {"reason": f.reason, "instruction": f.instruction, "step": f.step, "parameter": f.parameter}
            for f in program.flags
        ],
        "metadata": program.metadata,
    }


def program_from_dict(data: Dict[str, Any]) -> DslProgram:
    program = DslProgram(metadata=dict(data.get("metadata", {})))
    for item in data.get("instructions", []):
        layout = item.get("pattern")
        program.instructions.append(Instruction(
            operation=item["operation"],
            pattern=ProgramPattern(item["operation"], tuple((n, bool(r)) for n, r in layout))
            if layout is not None else None,
            bindings={slot: decode_value(value) for slot, value in item.get("bindings", {}).items()},
            emit=item.get("emit"),
            precond=decode_value(item["precond"]) if item.get("precond") else None,
            postcond=decode_value(item["postcond"]) if item.get("postcond") else None,
            step=item.get("step", 0),
            action=item.get("action", 0),
            flags=list(item.get("flags", [])),
        ))
    for w in data.get("controls", []):
        program.controls.append(ControlWrapper(**w))
    for f in data.get("flags", []):
        program.flags.append(ReviewFlag(**f))
    return program
