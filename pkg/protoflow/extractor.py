"""
Extraction Gateway

One interface for the questions the pipeline asks about free text: which
entities a step names, which candidate is an instruction's output, which
remembered reagents an instruction silently uses, and what value an unbound
key parameter takes. A deterministic rule backend answers offline; a
language-model service backend renders the fixed prompt templates below and
posts them over HTTP.

Core functions:
    - ExtractorGateway.ner_extract() - Entities and labels in a text
    - ExtractorGateway.query_output() - Pick one output among candidates
    - ExtractorGateway.query_missing_reagents() - Omitted reagents among candidates
    - ExtractorGateway.query_missing_value() - Value of an unbound key parameter
    - render_ner_prompt() / render_output_prompt() / render_missing_reagents_prompt()
    - render_missing_value_prompt()
    - ServiceClient - requests-based client with retries, budget, semaphore, cassette

Usage:
    from protoflow.extractor import ExtractorGateway

    gateway = ExtractorGateway()                      # rule backend, no network
    gateway = ExtractorGateway.from_config(run.gateway)  # service / fallback
    gateway.query_output({"action": "add", "reagent": ["glycoblue"], "output": ""},
                         ["RNA", "mRNA"])
"""

import hashlib
import json
import logging
import os
import re
import threading
import time
from typing import Dict, List, Optional, Any, Sequence, Tuple

import requests

from protoflow.config import GatewayConfig, get_service_config, mask_key
from protoflow.errors import BudgetExceeded, ExtractionUnavailable, MalformedReply
from protoflow.quantities import Quantity, find_quantities, parse_quantity

logger = logging.getLogger(__name__)

# Slot tokens are replaced literally; the templates contain JSON braces.
NER_PROMPT_TEMPLATE = "\n".join([
    "Given entity label set: {label_set}.",
    "Please name the entities in the given text. Based on the given entity label set, "
    "provide answer in the following JSON format: [{\"Entity Name\": \"Entity Label\"}]. "
    "If there is no entity in the text, return the following empty list: [].",
    "Please note that entities have already been annotated with [], "
    "no need to extract and analyze other entities.",
    "{cases}",
    "Text: {query}",
    "Answer:",
])

OUTPUT_PROMPT_TEMPLATE = "\n".join([
    "This instruction describes a step in an experimental process, which includes one action, "
    "multiple parameters, and one output. ",
    "Please help analyze the output of this instruction. I will provide a list of potential outputs. "
    "You need to assist in determining which of these outputs is most suitable for this instruction. ",
    "Note that you must choose one output from the list. Please output only a string without any explanation.",
    "",
    "[Examples]",
    "Instruction: {\"action\": \"add\", \"reagent\": [\"glycoblue\"], \"output\": \"\"}",
    "Potential output list: \"RNA\", \"mRNA\"",
    "Output: \"RNA\"",
    "",
    "Instruction: {\"action\": \"add\", \"concentration\": [\"1:10 volume 5 M NaCl\"], \"output\": \"\"}",
    "Potential output list: \"a μMACS column\", \"solution\"",
    "Output: \"solution\"",
    "",
    "Instruction: {\"action\": \"heat\", \"reagent\": [\"limestone\"], \"output\": \"\"}",
    "Potential output list: \"water\", \"NaCl\"",
    "Output: ",
    "",
    "[Question]",
    "Instruction: {Instruction}",
    "Potential output list: {Input}",
    "Output:",
])

MISSING_REAGENTS_PROMPT_TEMPLATE = "\n".join([
    "This instruction describes a step in an experimental process, which includes one action, "
    "multiple parameters-including various reagents-and one output.",
    "Please help analyze the missing reagents of this instruction. I will provide a list of potential reagents. "
    "You need to help me analyze which of these reagents might be the ones omitted from the current instruction. ",
    "Please note how many reagent parameters are missing from the current instruction. "
    "It is possible that some reagent parameters cannot be completed with the list provided. "
    "Please output only a comma-separated list of strings without any explanation.",
    "",
    "[Examples]",
    "Instruction: {\"action\": \"add\", \"reagent\": [\"\"], \"output\": \"\"}",
    "Potential reagent list: \"RNA\", \"glycoblue\"",
    "Reagents: \"glycoblue\"",
    "",
    "Instruction: {\"action\": \"add\", \"concentration\": [\"1:10 volume\"], \"reagent\": [\"\", \"\"], \"output\": \"\"}",
    "Potential reagent list: \"μMACS\", \"solution\", \"NaCl\"",
    "Reagents: \"NaCl\", \"μMACS\"",
    "",
    "Instruction: {\"action\": \"use\", \"reagent\": [\"BamHI\", \"XhoI\", \"\"], "
    "\"device\": [\"PCR amplification\"], \"output\": \"\"}",
    "Potential reagent list: \"agar\", \"food\"",
    "Reagents:",
    "",
    "[Question]",
    "Instruction: {Instruction}",
    "Potential reagent list: {Memory}",
    "Reagents:",
])

MISSING_VALUE_PROMPT_TEMPLATE = "\n".join([
    "This instruction describes a step in an experimental process, which includes one action, "
    "multiple parameters and one output.",
    "Please help complete the missing parameter \"{Parameter}\" of this instruction. I will provide the values "
    "this parameter took earlier in the same protocol. You may choose one of them or give another value in {Unit}. ",
    "If the value cannot be inferred from the instruction, output an empty string. "
    "Please output only a string without any explanation.",
    "",
    "[Examples]",
    "Instruction: {\"action\": \"centrifuge\", \"reagent\": [\"sample\"], \"speed\": [\"\"], \"output\": \"\"}",
    "Earlier values: \"4000rpm\"",
    "Value: \"4000rpm\"",
    "",
    "Instruction: {\"action\": \"heat\", \"reagent\": [\"limestone\"], \"temperature\": [\"\"], \"output\": \"\"}",
    "Earlier values: ",
    "Value: \"\"",
    "",
    "[Question]",
    "Instruction: {Instruction}",
    "Earlier values: {Memory}",
    "Value:",
])

# Few-shot cases for the NER prompt. Kept small and fixed so recorded
# cassettes stay valid across runs.
NER_CASES = "\n".join([
    "Text: Add 35 mL [water] to the [flask].",
    "Answer: [{\"35 mL\": \"volume\"}, {\"water\": \"reagent\"}, {\"flask\": \"container\"}]",
    "Text: Heat the [mixture] to [70 °C] for [10 minutes].",
    "Answer: [{\"mixture\": \"reagent\"}, {\"70 °C\": \"temperature\"}, {\"10 minutes\": \"duration\"}]",
])

DIMENSION_LABELS = {
    "volume-mL": "volume",
    "mass-g": "mass",
    "temperature-C": "temperature",
    "duration-s": "duration",
    "rate": "speed",
    "count": "count",
    "dimensionless": "other",
}

_STOP_WORDS = {
    "in", "into", "to", "at", "on", "for", "with", "from", "of", "and", "or", "then",
    "until", "when", "while", "by", "over", "under", "as", "the", "a", "an",
}
_WORD_RE = re.compile(r"[A-Za-z][A-Za-z\-']*")


def _fill(template: str, slots: Dict[str, str]) -> str:
    text = template
    for token, value in slots.items():
        text = text.replace("{" + token + "}", value)
    return text


def format_candidates(candidates: Sequence[str]) -> str:
    """Render a candidate list the way the prompts show it: "a", "b"."""
    return ", ".join(json.dumps(c, ensure_ascii=False) for c in candidates)


def instruction_json(record: Dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False)


def render_ner_prompt(text: str, label_set: Sequence[str], cases: str = NER_CASES) -> str:
    return _fill(NER_PROMPT_TEMPLATE, {
        "label_set": ", ".join(label_set),
        "cases": cases,
        "query": text,
    })


def render_output_prompt(record: Dict[str, Any], candidates: Sequence[str]) -> str:
    return _fill(OUTPUT_PROMPT_TEMPLATE, {
        "Instruction": instruction_json(record),
        "Input": format_candidates(candidates),
    })


def render_missing_reagents_prompt(record: Dict[str, Any], candidates: Sequence[str]) -> str:
    return _fill(MISSING_REAGENTS_PROMPT_TEMPLATE, {
        "Instruction": instruction_json(record),
        "Memory": format_candidates(candidates),
    })


def render_missing_value_prompt(
    record: Dict[str, Any],
    parameter: str,
    candidates: Sequence[str],
    dimension: Optional[str] = None
) -> str:
    unit = dimension.split("-")[-1] if dimension and "-" in dimension else "any unit"
    return _fill(MISSING_VALUE_PROMPT_TEMPLATE, {
        "Parameter": parameter,
        "Unit": unit,
        "Instruction": instruction_json(record),
        "Memory": format_candidates(candidates),
    })


def request_hash(model: str, prompt: str) -> str:
    return hashlib.sha256(f"{model}\n{prompt}".encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Reply parsing (strict first, then one bracketed-region salvage)
# ---------------------------------------------------------------------------

def parse_ner_reply(reply: str, label_set: Sequence[str]) -> List[Tuple[str, str]]:
    """
    Parse a `[{"Entity Name": "Entity Label"}]` reply.

    Raises:
        MalformedReply: If neither the reply nor its bracketed region is a JSON list
    """
    data = None
    try:
        data = json.loads(reply.strip())
    except json.JSONDecodeError:
        match = re.search(r"\[.*\]", reply, re.DOTALL)
        if match:
            try:
                data = json.loads(match.group(0))
            except json.JSONDecodeError:
                data = None
    if not isinstance(data, list):
        raise MalformedReply(f"expected a JSON list of entities, got {reply[:60]!r}")

    entities = []
    for item in data:
        if not isinstance(item, dict):
            raise MalformedReply(f"entity entry is not an object: {item!r}")
        for name, label in item.items():
            label = str(label).lower()
            entities.append((str(name), label if label in label_set else "other"))
    return entities


def _quoted_items(reply: str) -> List[str]:
    items = re.findall(r'"((?:[^"\\]|\\.)*)"', reply)
    if items:
        return items
    return [part.strip() for part in reply.split(",") if part.strip()]


def parse_choice_reply(reply: str, candidates: Sequence[str]) -> str:
    """Return the candidate named by reply; MalformedReply if it names none."""
    text = reply.strip()
    for option in [text, text.strip('"'), *_quoted_items(text)]:
        if option in candidates:
            return option
    raise MalformedReply(f"reply {text[:60]!r} is not one of the candidates")


def parse_list_reply(reply: str, candidates: Sequence[str]) -> List[str]:
    """Parse a comma-separated quoted list, keeping only listed candidates."""
    chosen = []
    for item in _quoted_items(reply.strip()):
        if item in candidates and item not in chosen:
            chosen.append(item)
    return chosen


def parse_value_reply(reply: str, dimension: Optional[str] = None) -> Optional[Quantity]:
    """
    Parse a single quoted quantity; an empty answer means "cannot be inferred".

    Raises:
        MalformedReply: If the answer is no quantity, or one of another dimension
    """
    items = _quoted_items(reply.strip())
    if not items or not items[0].strip():
        return None
    quantity = parse_quantity(items[0])
    if quantity is None or (dimension is not None and quantity.dimension != dimension):
        raise MalformedReply(f"reply {reply[:60]!r} is not a {dimension or 'quantity'} value")
    return quantity


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

def _tokens(text: str) -> List[str]:
    return [w.lower() for w in _WORD_RE.findall(text)]


def _record_tokens(record: Dict[str, Any]) -> set:
    tokens = set()
    for key, value in record.items():
        if key in ("action", "output"):
            continue
        values = value if isinstance(value, list) else [value]
        for item in values:
            tokens.update(_tokens(str(item)))
    return tokens


class RuleBackend:
    """Deterministic offline answers: unit recognizers, lexicon lookup, name overlap."""

    name = "rule"

    def __init__(self, lexicon: Sequence[str] = ()):
        self.lexicon = sorted({term.lower() for term in lexicon if term}, key=lambda t: (-len(t), t))

    def ner(self, text: str, label_set: Sequence[str]) -> List[Tuple[str, str]]:
        found: List[Tuple[int, int, str, str]] = []

        def free(start: int, end: int) -> bool:
            return all(end <= s or start >= e for s, e, _, _ in found)

        for quantity, start, end in find_quantities(text):
            label = DIMENSION_LABELS.get(quantity.dimension, "other")
            found.append((start, end, text[start:end], label if label in label_set else "other"))
            if quantity.dimension not in ("volume-mL", "mass-g", "count"):
                continue
            # "10 g of sodium chloride", "1/3 cup red wine"
            tail = re.match(r"\s+(?:of\s+)?((?:[A-Za-z][A-Za-z\-]*\s?){1,3})", text[end:])
            if tail:
                words = []
                for word in tail.group(1).split():
                    if word.lower() in _STOP_WORDS:
                        break
                    words.append(word)
                if words:
                    phrase = " ".join(words)
                    offset = end + text[end:].index(phrase)
                    if free(offset, offset + len(phrase)):
                        found.append((offset, offset + len(phrase), phrase, "reagent"))

        lowered = text.lower()
        for term in self.lexicon:
            for match in re.finditer(rf"\b{re.escape(term)}\b", lowered):
                if free(match.start(), match.end()):
                    found.append((match.start(), match.end(), text[match.start():match.end()], "reagent"))

        found.sort()
        return [(surface, label) for _, _, surface, label in found]

    def choose_output(self, record: Dict[str, Any], candidates: Sequence[str]) -> str:
        mentioned = _record_tokens(record)
        best, best_score = candidates[0], -1.0
        for candidate in candidates:
            tokens = _tokens(candidate)
            score = len(set(tokens) & mentioned) / len(tokens) if tokens else 0.0
            if score > best_score:
                best, best_score = candidate, score
        return best

    def missing_value(self, record: Dict[str, Any], parameter: str, candidates: Sequence[str]) -> Optional[Quantity]:
        # never guesses a value
        return None

    def missing_reagents(self, record: Dict[str, Any], candidates: Sequence[str]) -> List[str]:
        slots = record.get("reagent", [])
        missing = sum(1 for value in slots if value == "") if isinstance(slots, list) else 0
        if missing == 0 or not candidates:
            return []
        # most recently remembered first
        return list(reversed(candidates[-missing:]))


class ScriptedClient:
    """
    In-process completion client returning canned replies.

    Replies are taken from a prompt-substring map first, then from a queue,
    then the default. Counts calls like a mock LLM client.

    Example:
        client = ScriptedClient(replies=['"RNA"'])
        gateway = ExtractorGateway(backend="service", client=client)
    """

    def __init__(
        self,
        replies: Optional[List[str]] = None,
        by_substring: Optional[Dict[str, str]] = None,
        default: str = "[]",
        model: str = "scripted",
        delay: float = 0.0
    ):
        self.model = model
        self.replies = list(replies or [])
        self.by_substring = dict(by_substring or {})
        self.default = default
        self.delay = delay
        self.prompts: List[str] = []
        self._call_count = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self._call_count += 1
            self.prompts.append(prompt)
        if self.delay:
            time.sleep(self.delay)
        question = prompt.rsplit("[Question]", 1)[-1]
        for needle, reply in self.by_substring.items():
            if needle in question:
                return reply
        with self._lock:
            if self.replies:
                return self.replies.pop(0)
        return self.default

    @property
    def call_count(self) -> int:
        return self._call_count


class Cassette:
    """JSON array of {request-hash, prompt, reply} entries for record/replay."""

    def __init__(self, path: str, mode: str = "replay"):
        if mode not in ("record", "replay"):
            raise ValueError(f"Unknown cassette mode: {mode}")
        self.path = path
        self.mode = mode
        self.entries: List[Dict[str, str]] = []
        self._lock = threading.Lock()
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                self.entries = json.load(f)
        elif mode == "replay":
            raise FileNotFoundError(f"Cassette file not found: {path}")

    def lookup(self, key: str) -> Optional[str]:
        for entry in self.entries:
            if entry["request-hash"] == key:
                return entry["reply"]
        return None

    def record(self, key: str, prompt: str, reply: str) -> None:
        with self._lock:
            if self.lookup(key) is None:
                self.entries.append({"request-hash": key, "prompt": prompt, "reply": reply})
                self.save()

    def save(self) -> None:
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(self.entries, f, indent=2, ensure_ascii=False)


class ServiceClient:
    """
    HTTP client for the language-model service.

    Posts {model, prompt, max_tokens} and reads the reply text from the
    response JSON. Enforces a per-run request budget and a bound on
    outstanding requests. Never logs the credential.
    """

    def __init__(
        self,
        endpoint: str,
        key: str,
        model: str,
        timeout: float = 30.0,
        retries: int = 2,
        max_concurrency: int = 4,
        budget: int = 500,
        max_tokens: int = 256,
        cassette: Optional[Cassette] = None
    ):
        self.endpoint = endpoint
        self.key = key
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.budget = budget
        self.max_tokens = max_tokens
        self.cassette = cassette
        self.requests_made = 0
        self._semaphore = threading.BoundedSemaphore(max_concurrency)
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, config: GatewayConfig) -> "ServiceClient":
        cassette = Cassette(config.cassette, config.cassette_mode) \
            if config.cassette and config.cassette_mode != "off" else None
        if cassette is not None and cassette.mode == "replay":
            env = {"endpoint": "", "key": "", "model": os.getenv("PROTOFLOW_LLM_MODEL", "replay")}
        else:
            env = get_service_config()
        logger.debug("Service client for %s (key %s, model %s)",
                     env["endpoint"], mask_key(env["key"]), env["model"])
        return cls(
            endpoint=env["endpoint"],
            key=env["key"],
            model=env["model"],
            timeout=config.timeout,
            retries=config.retries,
            max_concurrency=config.max_concurrency,
            budget=config.budget,
            max_tokens=config.max_tokens,
            cassette=cassette,
        )

    def complete(self, prompt: str) -> str:
        key = request_hash(self.model, prompt)
        if self.cassette is not None and self.cassette.mode == "replay":
            reply = self.cassette.lookup(key)
            if reply is None:
                raise ExtractionUnavailable(f"no recorded reply for request {key[:12]}")
            return reply

        with self._lock:
            if self.requests_made >= self.budget:
                raise BudgetExceeded(f"request budget of {self.budget} spent")
            self.requests_made += 1

        reply = self._post(prompt)
        if self.cassette is not None:
            self.cassette.record(key, prompt, reply)
        return reply

    def _post(self, prompt: str) -> str:
        headers = {
            "Authorization": f"Bearer {self.key}",
            "Content-Type": "application/json",
        }
        payload = {"model": self.model, "prompt": prompt, "max_tokens": self.max_tokens}
        last_error: Optional[Exception] = None

        for attempt in range(self.retries + 1):
            with self._semaphore:
                try:
                    response = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
                except requests.RequestException as e:
                    last_error = e
                    logger.warning("Service request failed (attempt %d): %s", attempt + 1, e)
                    continue
            if response.status_code != 200:
                last_error = requests.HTTPError(
                    f"Request failed with status {response.status_code}: {response.text[:200]}"
                )
                logger.warning("Service returned %d (attempt %d)", response.status_code, attempt + 1)
                continue
            return _reply_text(response.json())

        raise ExtractionUnavailable(f"service unavailable after {self.retries + 1} attempts: {last_error}")


def _reply_text(body: Dict[str, Any]) -> str:
    if "text" in body:
        return body["text"]
    choices = body.get("choices") or []
    if choices:
        first = choices[0]
        if "text" in first:
            return first["text"]
        if "message" in first:
            return first["message"].get("content", "")
    raise MalformedReply("service response carries no text field")


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------

class ExtractorGateway:
    """
    Front door for all extraction questions.

    Backends:
        rule     - offline recognizers and name matching
        service  - prompts to the language-model client; errors propagate
        fallback - service first, rule answer (flagged degraded) on failure
    """

    def __init__(
        self,
        backend: str = "rule",
        client: Optional[Any] = None,
        lexicon: Sequence[str] = ()
    ):
        if backend not in ("rule", "service", "fallback"):
            raise ValueError(f"Unknown extractor backend: {backend}")
        if backend != "rule" and client is None:
            raise ValueError(f"Backend '{backend}' needs a service client")
        self.backend = backend
        self.client = client
        self.rule = RuleBackend(lexicon)
        self.degraded: List[str] = []

    @classmethod
    def from_config(cls, config: GatewayConfig, lexicon: Sequence[str] = ()) -> "ExtractorGateway":
        client = ServiceClient.from_config(config) if config.backend != "rule" else None
        return cls(backend=config.backend, client=client, lexicon=lexicon)

    def with_lexicon(self, lexicon: Sequence[str]) -> "ExtractorGateway":
        """Same backend and client, extended reagent lexicon."""
        gateway = ExtractorGateway(self.backend, self.client, list(self.rule.lexicon) + list(lexicon))
        gateway.degraded = self.degraded
        return gateway

    def save(self) -> None:
        """Write the recorded cassette, if the client records one."""
        cassette = getattr(self.client, "cassette", None)
        if cassette is not None and cassette.mode == "record":
            cassette.save()

    def _ask(self, prompt: str, parse, rule_answer, what: str):
        attempts = 0
        while True:
            attempts += 1
            try:
                return parse(self.client.complete(prompt))
            except MalformedReply as e:
                if attempts < 2:
                    logger.info("Malformed %s reply, asking again: %s", what, e.message)
                    continue
                failure: Exception = e
            except ExtractionUnavailable as e:
                failure = e
            break
        if self.backend == "fallback" or (isinstance(failure, MalformedReply) and what != "ner"):
            self.degraded.append(f"{what}: {failure}")
            logger.warning("Falling back to rule backend for %s: %s", what, failure)
            return rule_answer()
        raise failure

    def ner_extract(self, text: str, label_set: Sequence[str]) -> List[Tuple[str, str]]:
        """
        Name the entities in text with labels from label_set.

        Raises:
            ValueError: If label_set is empty
            ExtractionUnavailable: Service failure without fallback
            MalformedReply: Unparseable reply after one re-ask (service mode)
        """
        if not label_set:
            raise ValueError("label_set must not be empty")
        if self.backend == "rule":
            return self.rule.ner(text, label_set)
        return self._ask(
            render_ner_prompt(text, label_set),
            lambda reply: parse_ner_reply(reply, label_set),
            lambda: self.rule.ner(text, label_set),
            "ner",
        )

    def query_output(self, record: Dict[str, Any], candidates: Sequence[str]) -> str:
        """Select exactly one output among candidates."""
        if not candidates:
            raise ValueError("candidates must not be empty")
        candidates = list(candidates)
        if len(candidates) == 1 or self.backend == "rule":
            return candidates[0] if len(candidates) == 1 else self.rule.choose_output(record, candidates)
        return self._ask(
            render_output_prompt(record, candidates),
            lambda reply: parse_choice_reply(reply, candidates),
            lambda: self.rule.choose_output(record, candidates),
            "output",
        )

    def query_missing_value(
        self,
        record: Dict[str, Any],
        parameter: str,
        candidates: Sequence[str] = (),
        dimension: Optional[str] = None
    ) -> Optional[Quantity]:
        """
        Ask for the value of an unbound parameter; candidates are the values
        it took earlier in the protocol. None when no value can be inferred.
        """
        candidates = list(candidates)
        if self.backend == "rule":
            return self.rule.missing_value(record, parameter, candidates)
        question = dict(record)
        question[parameter] = [""]
        question["output"] = question.pop("output", "")
        return self._ask(
            render_missing_value_prompt(question, parameter, candidates, dimension),
            lambda reply: parse_value_reply(reply, dimension),
            lambda: self.rule.missing_value(record, parameter, candidates),
            "missing-value",
        )

    def query_missing_reagents(self, record: Dict[str, Any], candidates: Sequence[str]) -> List[str]:
        """Return the omitted reagents of record, drawn from candidates (possibly none)."""
        candidates = list(candidates)
        if not candidates:
            return []
        if self.backend == "rule":
            return self.rule.missing_reagents(record, candidates)
        return self._ask(
            render_missing_reagents_prompt(record, candidates),
            lambda reply: parse_list_reply(reply, candidates),
            lambda: self.rule.missing_reagents(record, candidates),
            "missing-reagents",
        )
