"""
Protocol Pre-processing

Turns raw protocol text into the pseudo-labeled entity sequence the
synthesizer works on: front matter, step segmentation, imperative verb
detection, operation matching and entity recognition.

Core functions:
    - parse_protocol() - Front matter + step segmentation of a raw protocol
    - segment_protocol() - Populate steps with spans into the raw text
    - extract_actions() - Imperative verbs of one step with ranked candidates
    - match_operation() - Rank operations for an action word
    - extract_entities() - Pseudo-labeled entities of one step
    - preprocess_protocol() - All of the above for a whole protocol

Usage:
    from protoflow.preprocess import preprocess_protocol

    sequence = preprocess_protocol(text, spec, gateway)
    for unit in sequence.units():
        print(unit.verb, unit.candidates[:1], [e.surface for e in unit.entities])
"""

import logging
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Any, Tuple

from protoflow.config import MatchConfig
from protoflow.dsl import ENTITY_LABELS, DslSpec, ReviewFlag
from protoflow.errors import NoActionFound
from protoflow.extractor import DIMENSION_LABELS, ExtractorGateway
from protoflow.quantities import Quantity, find_quantities

logger = logging.getLogger(__name__)

MARKUP_CHARS = re.compile(r"[@<>|{}\[\]]")
_MARKUP_REAGENT_RE = re.compile(r"@([^@\n]+)@|\{([^}\n]+)\}")
_MARKER_RE = re.compile(r"^\s*(?:step\s+(\d+)\s*[:.)]|(\d+)\s*[.)](?!\d))\s*", re.IGNORECASE)
_SENTENCE_RE = re.compile(r"[^\s].*?(?:[.!?](?=\s|$)|$)", re.DOTALL)
_CLAUSE_SPLIT_RE = re.compile(r"\s*[,;]\s*|\s+(?:and|then)\s+|\s+(?=(?:until|while)\b)", re.IGNORECASE)
_WORD_RE = re.compile(r"[A-Za-z][A-Za-z'\-]*")

ARTICLES = {"the", "a", "an", "some", "each", "it"}
PREPOSITIONS = {
    "in", "into", "to", "at", "on", "for", "with", "from", "of", "onto", "by", "over",
    "under", "as", "until", "when", "while", "before", "after", "and", "or", "then", "per",
}
NEGATIONS = {"don't", "dont", "never", "not", "do"}
LOOP_WORDS = ("repeat", "until", "while", "for each")
BRANCH_WORDS = ("if", "when", "once", "in case")
SIGNAL_WORDS = ("after", "once", "when", "if", "until", "while", "before", "in case", "for each")
AUXILIARIES = ("let it", "let the mixture", "let them")

_DONE_FOLD_RE = re.compile(r"\s*\b(?:when|once)\s+done\b", re.IGNORECASE)
_GUARD_RE = re.compile(r"^(?:once|when|after)\s+(?:the\s+)?(.+?)\s+(?:is|are)\s+done$", re.IGNORECASE)
_DELAY_RE = re.compile(r"^after\b", re.IGNORECASE)


@dataclass
class Step:
    index: int
    text: str
    start: int
    end: int
    marker: Optional[str] = None


@dataclass
class ProtocolText:
    raw: str
    steps: List[Step] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)
    body_start: int = 0


@dataclass(frozen=True)
class Entity:
    """A pseudo-labeled span; raw[start:end] == surface."""

    surface: str
    start: int
    end: int
    label: str
    confidence: float = 1.0
    source: str = "rule"
    value: Optional[Quantity] = None
    parameter: Optional[str] = None
    role: Optional[str] = None

    @property
    def text(self) -> str:
        """Normalized text used for bindings: articles stripped, markup-free."""
        words = self.surface.split()
        while words and words[0].lower() in ARTICLES:
            words = words[1:]
        return " ".join(words)


@dataclass
class Signal:
    kind: str  # delay, guard, loop, branch
    keyword: str
    text: str
    start: int
    end: int
    predicate: str = ""
    entities: List[Entity] = field(default_factory=list)
    count: Optional[int] = None
    # action indices (within the step) a loop or branch signal governs
    governs: List[int] = field(default_factory=list)


@dataclass
class ActionUnit:
    """One verb of one step; becomes one instruction."""

    step: int
    action: int
    verb: str
    start: int
    end: int
    candidates: List[Tuple[str, float]] = field(default_factory=list)
    entities: List[Entity] = field(default_factory=list)
    clause: str = ""
    signals: List[Signal] = field(default_factory=list)
    fold: bool = False
    review: Optional[str] = None

    @property
    def placeholder(self) -> bool:
        return not self.candidates


@dataclass
class StepEntities:
    step: Step
    actions: List[ActionUnit] = field(default_factory=list)
    unresolved: List[Signal] = field(default_factory=list)
    review: Optional[str] = None


@dataclass
class EntitySequence:
    """s(c): per step, matched candidates and pseudo-labeled entities."""

    protocol: ProtocolText
    steps: List[StepEntities] = field(default_factory=list)
    flags: List[ReviewFlag] = field(default_factory=list)

    def units(self) -> List[ActionUnit]:
        """Action units in text order; a step without actions yields one placeholder."""
        units = []
        for entry in self.steps:
            if entry.actions:
                units.extend(entry.actions)
            else:
                units.append(ActionUnit(
                    step=entry.step.index, action=0, verb="", start=entry.step.start,
                    end=entry.step.end, clause=entry.step.text, review=entry.review,
                ))
        return units

    @property
    def metadata(self) -> Dict[str, Any]:
        return self.protocol.metadata


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

def mask_markup(text: str) -> str:
    """Replace annotation characters with spaces; offsets are preserved."""
    return MARKUP_CHARS.sub(" ", text)


def load_protocol(path: str) -> ProtocolText:
    """
    Load a protocol file and segment it.

    Raises:
        FileNotFoundError: If the file doesn't exist
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Protocol file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_protocol(f.read())


def parse_protocol(raw: str) -> ProtocolText:
    """Recognize front matter (title, Yield, Ingredients, Instructions) and segment the body."""
    protocol = ProtocolText(raw=raw)
    match = re.search(r"^[ \t]*Instructions:[ \t]*$", raw, re.MULTILINE | re.IGNORECASE)
    if match:
        protocol.body_start = match.end()
        protocol.metadata = _parse_front_matter(raw[:match.start()])
    return segment_protocol(protocol)


def _parse_front_matter(head: str) -> Dict[str, Any]:
    metadata: Dict[str, Any] = {"ingredients": []}
    lines = [line.strip() for line in head.splitlines() if line.strip()]
    in_ingredients = False
    for line in lines:
        lowered = line.lower()
        if lowered.startswith("yield:"):
            metadata["yield"] = line.split(":", 1)[1].strip()
        elif lowered.startswith("ingredients:"):
            in_ingredients = True
        elif line.startswith("-") and in_ingredients:
            metadata["ingredients"].append(_ingredient_name(line[1:].strip()))
        elif "title" not in metadata:
            metadata["title"] = line
    return metadata


def _ingredient_name(line: str) -> str:
    braced = re.search(r"\{([^}]+)\}", line)
    if braced:
        return braced.group(1).strip()
    text = mask_markup(line.split(";")[0])
    quantities = find_quantities(text)
    if quantities:
        text = text[quantities[-1][2]:]
    return " ".join(text.split())


def segment_protocol(text: ProtocolText) -> ProtocolText:
    """
    Split the protocol body into steps with spans into text.raw.

    Blank-line separated blocks and numbered items are steps; a body that is a
    single block is split into sentences. Empty input yields zero steps.
    """
    raw = text.raw
    body_start = text.body_start
    body = raw[body_start:]
    blocks = [(m.start() + body_start, m.end() + body_start)
              for m in re.finditer(r"\S(?:.*?\S)?(?=\n[ \t]*\n|\s*\Z)", body, re.DOTALL)]

    pieces: List[Tuple[int, int, bool]] = []
    for start, end in blocks:
        numbered = [m for m in re.finditer(r"^[ \t]*(?:step\s+\d+\s*[:.)]|\d+\s*[.)])",
                                           raw[start:end], re.MULTILINE | re.IGNORECASE)]
        if len(numbered) > 1:
            cuts = [start + m.start() for m in numbered] + [end]
            if cuts[0] > start:
                pieces.append((start, cuts[0], False))
            pieces.extend((a, b, True) for a, b in zip(cuts, cuts[1:]))
        else:
            pieces.append((start, end, bool(numbered)))

    if len(pieces) == 1 and not pieces[0][2]:
        start, end = pieces[0][0], pieces[0][1]
        pieces = [(start + m.start(), start + m.end(), False)
                  for m in _SENTENCE_RE.finditer(raw[start:end])]

    steps = []
    for start, end, _ in pieces:
        marker = None
        marker_match = _MARKER_RE.match(raw[start:end])
        if marker_match:
            marker = marker_match.group(0).strip()
            start += marker_match.end()
        segment = raw[start:end]
        stripped = segment.strip()
        if not stripped:
            continue
        start += len(segment) - len(segment.lstrip())
        end = start + len(stripped)
        steps.append(Step(index=len(steps), text=stripped, start=start, end=end, marker=marker))

    text.steps = steps
    logger.debug("Segmented protocol into %d steps", len(steps))
    return text


# ---------------------------------------------------------------------------
# Operation matching
# ---------------------------------------------------------------------------

def _trigrams(text: str) -> Counter:
    padded = f"  {text.lower()} "
    return Counter(padded[i:i + 3] for i in range(len(padded) - 2))


def trigram_similarity(a: str, b: str) -> float:
    """Cosine similarity of character-trigram count vectors."""
    ta, tb = _trigrams(a), _trigrams(b)
    dot = sum(ta[g] * tb[g] for g in ta)
    norm = math.sqrt(sum(v * v for v in ta.values())) * math.sqrt(sum(v * v for v in tb.values()))
    return dot / norm if norm else 0.0


def match_operation(
    action: str,
    spec: DslSpec,
    config: Optional[MatchConfig] = None
) -> List[Tuple[str, float]]:
    """
    Rank operations for an action word.

    score = w_exact * exact(action, keyword or synonym) + w_sem * trigram
    similarity(action, keyword). Candidates below the floor are dropped; ties
    go to the lexicographically smaller operation name.
    """
    config = config or MatchConfig()
    normalized = action.strip().lower()
    ranking = []
    for name, op in spec.operations.items():
        exact = 1.0 if normalized == name.lower() or normalized in op.synonyms else 0.0
        score = config.w_exact * exact + config.w_sem * trigram_similarity(normalized, name)
        score = min(1.0, score)
        if score >= config.floor:
            ranking.append((name, round(score, 12)))
    ranking.sort(key=lambda pair: (-pair[1], pair[0]))
    return ranking


def _nominal_operation(noun: str, spec: DslSpec) -> Optional[str]:
    noun = noun.lower()
    best = None
    for name in spec.operation_names:
        prefix = os.path.commonprefix([noun, name.lower()])
        if len(prefix) >= max(4, len(name) - 2):
            if best is None or len(prefix) > len(os.path.commonprefix([noun, best])):
                best = name
    return best


# ---------------------------------------------------------------------------
# Clauses and actions
# ---------------------------------------------------------------------------

@dataclass
class _Clause:
    start: int  # step-local
    end: int
    text: str
    kind: str = "plain"  # action, signal, negated, plain
    verb: Optional[str] = None
    verb_start: int = 0
    verb_end: int = 0
    operation_word: Optional[str] = None
    signal: Optional[Signal] = None
    sentence: int = 0


def _hide_parentheses(text: str) -> str:
    return re.sub(r"\([^)]*\)", lambda m: " " * len(m.group(0)), text)


def _split_clauses(view: str) -> List[_Clause]:
    clauses = []
    for sentence_index, sentence in enumerate(_SENTENCE_RE.finditer(view)):
        base = sentence.start()
        body = sentence.group(0)
        position = 0
        for separator in list(_CLAUSE_SPLIT_RE.finditer(body)) + [None]:
            end = separator.start() if separator else len(body)
            piece = body[position:end]
            if piece.strip():
                lead = len(piece) - len(piece.lstrip())
                text = piece.strip().rstrip(".!?").rstrip()
                start = base + position + lead
                clauses.append(_Clause(start=start, end=start + len(text), text=text,
                                       sentence=sentence_index))
            position = separator.end() if separator else len(body)
    return clauses


def _strip_lead(text: str, spec: DslSpec) -> int:
    """Offset of the first content word after connectives, adverbs and auxiliaries."""
    offset = 0
    while True:
        rest = text[offset:]
        lowered = rest.lower()
        moved = False
        for aux in AUXILIARIES + ("and ", "then "):
            aux_word = aux.strip()
            if lowered.startswith(aux_word + " "):
                offset += len(aux_word) + 1
                moved = True
                break
        if not moved:
            word = _WORD_RE.match(rest)
            if word and word.group(0).lower().endswith("ly") and len(word.group(0)) > 3 \
                    and rest[word.end():word.end() + 1] == " " \
                    and not match_operation(word.group(0), spec):
                offset += word.end() + 1
                moved = True
        if not moved:
            return offset
        while offset < len(text) and text[offset] == " ":
            offset += 1


def _starts_with_signal(lowered: str) -> Optional[str]:
    for word in SIGNAL_WORDS:
        if lowered == word or lowered.startswith(word + " "):
            return word
    return None


def _is_negated(text: str) -> bool:
    words = [w.lower() for w in _WORD_RE.findall(text)]
    if not words:
        return False
    if words[0] in ("don't", "dont", "never") or words[:2] == ["do", "not"]:
        return True
    return "not" in words or "don't" in words or "never" in words


def _classify(step_view: str, spec: DslSpec, config: MatchConfig) -> List[_Clause]:
    clauses = _split_clauses(step_view)
    for clause in clauses:
        lowered = clause.text.lower()
        keyword = _starts_with_signal(lowered)
        if keyword is not None:
            clause.kind = "signal"
            continue
        if _is_negated(clause.text):
            clause.kind = "negated"
            continue
        lead = _strip_lead(clause.text, spec)
        word = _WORD_RE.match(clause.text[lead:])
        if not word:
            continue
        verb = word.group(0)
        operation_word = verb
        if verb.lower() == "repeat":
            noun = re.match(r"\s+(?:the\s+)?([A-Za-z]+)", clause.text[lead + word.end():], re.IGNORECASE)
            nominal = _nominal_operation(noun.group(1), spec) if noun else None
            if nominal is None:
                continue
            operation_word = nominal
        if not match_operation(operation_word, spec, config):
            continue
        clause.kind = "action"
        clause.verb = verb
        clause.operation_word = operation_word
        clause.verb_start = clause.start + lead + word.start()
        clause.verb_end = clause.start + lead + word.end()
    return clauses


def _build_signal(clause: _Clause, step_text: str) -> Signal:
    text = step_text[clause.start:clause.end]
    visible = " ".join(_hide_parentheses(mask_markup(text)).split())
    keyword = _starts_with_signal(visible.lower()) or ""
    guard = _GUARD_RE.match(visible)
    if guard:
        return Signal("guard", keyword, text, clause.start, clause.end, predicate=guard.group(1))
    if _DELAY_RE.match(visible):
        return Signal("delay", keyword, text, clause.start, clause.end)
    predicate = visible[len(keyword):].strip()
    kind = "loop" if keyword in LOOP_WORDS else "branch"
    return Signal(kind, keyword, text, clause.start, clause.end, predicate=predicate)


def extract_actions(
    step: str,
    spec: DslSpec,
    config: Optional[MatchConfig] = None
) -> List[Tuple[Tuple[int, int], List[Tuple[str, float]]]]:
    """
    Imperative verbs of a step with their ranked operation candidates.

    Args:
        step: One step's text
        spec: DSL spec supplying operation keywords and synonyms
        config: Matching weights and floor

    Returns:
        List of ((verb start, verb end), candidates) in text order

    Raises:
        NoActionFound: When no verb matches any operation above the floor
    """
    config = config or MatchConfig()
    view = _hide_parentheses(mask_markup(step))
    actions = []
    for clause in _classify(view, spec, config):
        if clause.kind == "action":
            actions.append(((clause.verb_start, clause.verb_end),
                            match_operation(clause.operation_word, spec, config)))
    if not actions:
        raise NoActionFound(f"no imperative verb matches an operation in {step[:40]!r}")
    return actions


# ---------------------------------------------------------------------------
# Entities
# ---------------------------------------------------------------------------

def _vessel_pattern(spec: DslSpec) -> Optional["re.Pattern[str]"]:
    if not spec.vessels:
        return None
    nouns = "|".join(re.escape(v) for v in sorted(spec.vessels, key=len, reverse=True))
    return re.compile(rf"\b(?:{nouns})(?:e?s)?\b", re.IGNORECASE)


def _label_for_parameter(spec: DslSpec, parameter: str) -> str:
    schema = spec.parameters.get(parameter)
    if schema and schema.labels:
        return schema.labels[0]
    if schema and schema.unit:
        return DIMENSION_LABELS.get(schema.unit, "other")
    return "other"


def extract_entities(
    step: str,
    gateway: ExtractorGateway,
    spec: Optional[DslSpec] = None,
    offset: int = 0,
    verbs: Optional[List[Tuple[int, int]]] = None
) -> List[Entity]:
    """
    Pseudo-labeled entities of one step.

    Recognizers run in priority order (markup, quantities, spec aliases,
    vessel phrases, gateway NER, direct objects); a later span overlapping an
    earlier one is dropped. Spans are shifted by offset so they index the raw
    protocol text when step is a slice of it.

    Args:
        step: Step text (markup allowed)
        gateway: Extraction gateway used for NER
        spec: Optional DSL spec for aliases, vessels and terminal lookup
        offset: Position of step in the raw text
        verbs: Step-local verb spans; enables the direct-object recognizer

    Returns:
        Entities sorted by start offset
    """
    masked = mask_markup(step)
    found: List[Entity] = []

    def free(start: int, end: int) -> bool:
        return all(end <= e.start - offset or start >= e.end - offset for e in found)

    def add(start: int, end: int, label: str, **kwargs) -> None:
        while start < end and step[start] in " ~":
            start += 1
        while end > start and step[end - 1] == " ":
            end -= 1
        if start < end and free(start, end):
            found.append(Entity(step[start:end], start + offset, end + offset, label, **kwargs))

    for match in _MARKUP_REAGENT_RE.finditer(step):
        group = 1 if match.group(1) is not None else 2
        add(match.start(group), match.end(group), "reagent", source="markup")

    for quantity, start, end in find_quantities(masked):
        add(start, end, DIMENSION_LABELS.get(quantity.dimension, "other"),
            source="quantity", value=quantity)

    if spec is not None:
        for phrase, parameter in spec.alias_table():
            for match in re.finditer(rf"\b{re.escape(phrase)}\b", masked, re.IGNORECASE):
                add(match.start(), match.end(), _label_for_parameter(spec, parameter),
                    source="alias", value=spec.alias(parameter, phrase), parameter=parameter)

        vessel_re = _vessel_pattern(spec)
        if vessel_re is not None:
            for match in vessel_re.finditer(masked):
                start = match.start()
                words = list(_WORD_RE.finditer(masked[:start]))
                taken = 0
                for word in reversed(words):
                    lowered = word.group(0).lower()
                    gap = masked[word.end():start]
                    if taken == 2 or lowered in ARTICLES or lowered in PREPOSITIONS \
                            or gap.strip() or not free(word.start(), match.end()):
                        break
                    start = word.start()
                    taken += 1
                add(start, match.end(), "container", source="vessel")

    label_set = list(ENTITY_LABELS)
    cursor = 0
    for surface, label in gateway.ner_extract(masked, label_set):
        position = masked.find(surface, cursor)
        if position < 0:
            position = masked.find(surface)
        if position < 0:
            logger.debug("NER surface %r not found in step", surface)
            continue
        cursor = position + len(surface)
        value = None
        if label in ("volume", "mass", "temperature", "duration", "speed", "count"):
            quantities = find_quantities(surface)
            value = quantities[0][0] if quantities else None
        add(position, position + len(surface), label, source=gateway.backend, value=value,
            confidence=0.8)

    for verb_start, verb_end in verbs or []:
        _direct_object(step, masked, verb_end, offset, found, add)

    found.sort(key=lambda e: (e.start, e.end))
    return found


def _direct_object(step, masked, verb_end, offset, found, add) -> None:
    covered = [(e.start - offset, e.end - offset) for e in found]
    position = verb_end
    words = []
    for word in _WORD_RE.finditer(_hide_parentheses(masked), verb_end):
        gap = masked[position:word.start()]
        if any(ch in gap for ch in ",;.!?()") or any(s <= word.start() < e for s, e in covered):
            break
        lowered = word.group(0).lower()
        if lowered in PREPOSITIONS or lowered in NEGATIONS or lowered.endswith("ly"):
            break
        if lowered in ARTICLES and not words:
            position = word.end()
            continue
        words.append(word)
        position = word.end()
    if words:
        add(words[0].start(), words[-1].end(), "reagent", confidence=0.5,
            source="object", role="object")


# ---------------------------------------------------------------------------
# Whole protocol
# ---------------------------------------------------------------------------

def preprocess_step(
    step: Step,
    spec: DslSpec,
    gateway: ExtractorGateway,
    config: Optional[MatchConfig] = None
) -> StepEntities:
    config = config or MatchConfig()
    view = _hide_parentheses(mask_markup(step.text))
    clauses = _classify(view, spec, config)
    verbs = [(c.verb_start, c.verb_end) for c in clauses if c.kind == "action"]
    entities = extract_entities(step.text, gateway, spec, offset=step.start, verbs=verbs)
    entry = StepEntities(step=step)

    if not verbs:
        entry.review = f"no imperative verb matches an operation in {step.text[:40]!r}"
        signals = [_build_signal(c, step.text) for c in clauses if c.kind == "signal"]
        entry.unresolved.extend(s for s in signals if s.kind in ("loop", "branch"))
        return entry

    # clause ownership: action clauses own themselves, plain clauses join the
    # preceding action (or the next when none precedes), signals attach to
    # the action they lead or trail
    owner: List[Optional[int]] = []
    pending_signals: List[Signal] = []
    current: Optional[int] = None
    sentence_of: List[int] = []
    scoped: List[Tuple[Signal, int, bool]] = []
    for clause in clauses:
        if clause.kind == "action":
            current = len(entry.actions)
            text = step.text[clause.start:clause.end]
            fold = bool(_DONE_FOLD_RE.search(text))
            unit = ActionUnit(
                step=step.index,
                action=current,
                verb=step.text[clause.verb_start:clause.verb_end],
                start=step.start + clause.verb_start,
                end=step.start + clause.verb_end,
                candidates=match_operation(clause.operation_word, spec, config),
                clause=_DONE_FOLD_RE.sub("", text).strip(),
                fold=fold,
            )
            if clause.verb.lower() == "repeat":
                count = re.search(r"\b(\d+)\s+times\b", text, re.IGNORECASE)
                unit.signals.append(Signal("loop", "repeat", text, clause.start, clause.end,
                                           predicate="", count=int(count.group(1)) if count else None,
                                           governs=[current]))
            unit.signals.extend(pending_signals)
            scoped.extend((signal, current, True) for signal in pending_signals)
            pending_signals = []
            entry.actions.append(unit)
            sentence_of.append(clause.sentence)
            owner.append(current)
        elif clause.kind == "signal":
            signal = _build_signal(clause, step.text)
            clause.signal = signal
            leading = current is None or (
                clause.sentence != clauses[clauses.index(clause) - 1].sentence
            ) or signal.kind in ("delay", "guard")
            if leading:
                pending_signals.append(signal)
            else:
                entry.actions[current].signals.append(signal)
                scoped.append((signal, current, False))
            owner.append(None)
        elif clause.kind == "negated":
            owner.append(None)
        else:
            owner.append(current)

    entry.unresolved.extend(s for s in pending_signals if s.kind in ("loop", "branch"))
    for signal, holder, leading in scoped:
        if signal.kind in ("loop", "branch"):
            signal.governs = _coordinated(sentence_of, holder, leading)
    first_action = next(i for i, c in enumerate(clauses) if c.kind == "action")
    owner = [owner[first_action] if o is None and c.kind == "plain" else o
             for o, c in zip(owner, clauses)]

    for entity in entities:
        local = entity.start - step.start
        in_parentheses = _hide_parentheses(step.text)[local] == " " and step.text[local] != " "
        index = _clause_at(clauses, local)
        if index is None:
            continue
        clause = clauses[index]
        if clause.kind == "signal" and not in_parentheses:
            clause.signal.entities.append(entity)
            continue
        target = owner[index]
        if clause.kind == "signal" and in_parentheses:
            target = _signal_owner(entry, clause.signal)
        if target is None:
            continue
        entry.actions[target].entities.append(entity)

    for unit in entry.actions:
        objects = [e for e in unit.entities if e.label == "reagent"]
        if objects and all(e.role != "object" for e in objects):
            position = unit.entities.index(objects[0])
            unit.entities[position] = replace(objects[0], role="object")
    return entry


def _coordinated(sentence_of: List[int], holder: int, leading: bool) -> List[int]:
    """A leading signal governs the rest of its sentence, a trailing one the sentence up to its verb."""
    step = 1 if leading else -1
    governed = [holder]
    other = holder + step
    while 0 <= other < len(sentence_of) and sentence_of[other] == sentence_of[holder]:
        governed.append(other)
        other += step
    return sorted(governed)


def _clause_at(clauses: List[_Clause], local: int) -> Optional[int]:
    best = None
    for index, clause in enumerate(clauses):
        if clause.start <= local:
            best = index
    return best


def _signal_owner(entry: StepEntities, signal: Signal) -> Optional[int]:
    for index, unit in enumerate(entry.actions):
        if signal in unit.signals:
            return index
    return None


def preprocess_protocol(
    text: str,
    spec: DslSpec,
    gateway: ExtractorGateway,
    config: Optional[MatchConfig] = None
) -> EntitySequence:
    """
    Build the full entity sequence s(c) for a raw protocol.

    Steps without a matching verb are kept with a review flag rather than
    aborting the protocol.
    """
    protocol = parse_protocol(text)
    ingredients = protocol.metadata.get("ingredients", [])
    if ingredients:
        gateway = gateway.with_lexicon(ingredients)

    sequence = EntitySequence(protocol=protocol)
    for step in protocol.steps:
        entry = preprocess_step(step, spec, gateway, config)
        if entry.review:
            logger.info("Step %d needs review: %s", step.index, entry.review)
            sequence.flags.append(ReviewFlag(reason=f"NoActionFound: {entry.review}", step=step.index))
        sequence.steps.append(entry)
    return sequence
