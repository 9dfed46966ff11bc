"""
Evaluation

Key-value comparison of programs: instructions are canonicalized to flat
JSON-style records and compared key by key, so a wrong temperature costs more
than a reworded reagent.

Core functions:
    - to_canonical() - Program -> list of flat records
    - kv_similarity() - Weighted key-value score between two record lists
    - rouge_l() / bleu() / exact() - Token-sequence metrics
    - load_records() - Read records from JSON or a program listing
    - score_directories() - Per-protocol score table (pandas DataFrame)

Usage:
    from protoflow.evaluation import to_canonical, kv_similarity

    score = kv_similarity(to_canonical(pred), to_canonical(gold), metric="rouge-l")
"""

import json
import logging
import os
from typing import Callable, Dict, List, Optional, Any, Sequence, Union

from nltk.translate.bleu_score import SmoothingFunction, sentence_bleu
from rouge_score import rouge_scorer

from protoflow.config import DEFAULT_KEY_WEIGHTS
from protoflow.dsl import DslProgram, parse_listing, program_from_dict, render_value

logger = logging.getLogger(__name__)

METRICS = ("rouge-l", "bleu", "exact")

Record = Dict[str, Union[str, List[str]]]


class _WhitespaceTokenizer:
    """Keeps tokens such as 300F or mixture_1 intact."""

    def tokenize(self, text: str) -> List[str]:
        return text.split()


_scorer = rouge_scorer.RougeScorer(["rougeL"], tokenizer=_WhitespaceTokenizer())


def _render(value: Any) -> Union[str, List[str]]:
    if isinstance(value, tuple):
        return [render_value(item).strip('"') for item in value]
    return render_value(value).strip('"')


def to_canonical(program: DslProgram) -> List[Record]:
    """
    Flatten each instruction to {"action": ..., <slot>: value, "output": emit}.

    Key order: action, precond, pattern slots, remaining slots, output, postcond.
    """
    records = []
    for instr in program.instructions:
        record: Record = {"action": instr.operation}
        if instr.precond is not None:
            record["precond"] = _render(instr.precond)
        order = list(instr.pattern.slot_names) if instr.pattern is not None else []
        order += [slot for slot in instr.bindings if slot not in order]
        for slot in order:
            if instr.bound(slot):
                record[slot.lower()] = _render(instr.bindings[slot])
        if instr.emit:
            record["output"] = instr.emit
        if instr.postcond is not None:
            record["postcond"] = _render(instr.postcond)
        records.append(record)
    return records


def tokens(value: Union[str, List[str], None]) -> List[str]:
    if value is None:
        return []
    if isinstance(value, list):
        value = " ".join(value)
    return str(value).lower().split()


def exact(a: Sequence[str], b: Sequence[str]) -> float:
    return 1.0 if list(a) == list(b) else 0.0


def rouge_l(a: Sequence[str], b: Sequence[str]) -> float:
    """LCS-based ROUGE-L F1; 1.0 when both are empty."""
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return _scorer.score(" ".join(a), " ".join(b))["rougeL"].fmeasure


def bleu(a: Sequence[str], b: Sequence[str], max_n: int = 4) -> float:
    """
    Smoothed sentence BLEU of b against reference a.

    The n-gram order shrinks to the shorter sequence so short values such as
    a single temperature still score 1.0 when identical.
    """
    if not a and not b:
        return 1.0
    if not a or not b or not set(a) & set(b):
        return 0.0
    n = max(1, min(max_n, len(a), len(b)))
    weights = tuple(1.0 / n for _ in range(n))
    smooth = SmoothingFunction()
    return sentence_bleu([list(a)], list(b), weights=weights, smoothing_function=smooth.method1)


_METRIC_FUNCTIONS: Dict[str, Callable[[Sequence[str], Sequence[str]], float]] = {
    "rouge-l": rouge_l,
    "bleu": bleu,
    "exact": exact,
}


def _pair_score(pred: Record, gold: Record, metric: Callable, weights: Dict[str, float]) -> float:
    keys = list(gold) + [key for key in pred if key not in gold]
    if not keys:
        return 1.0
    total = 0.0
    weight_sum = 0.0
    for key in keys:
        weight = weights.get(key, 1.0)
        weight_sum += weight
        if key in pred and key in gold:
            total += weight * metric(tokens(pred[key]), tokens(gold[key]))
    return total / weight_sum if weight_sum else 0.0


def pair_scores(
    pred: Sequence[Record],
    gold: Sequence[Record],
    metric: str = "rouge-l",
    weights: Optional[Dict[str, float]] = None
) -> List[float]:
    """Per aligned instruction pair; unaligned tail positions score 0."""
    if metric not in _METRIC_FUNCTIONS:
        raise ValueError(f"Unknown metric: {metric} (expected one of {', '.join(METRICS)})")
    function = _METRIC_FUNCTIONS[metric]
    weights = DEFAULT_KEY_WEIGHTS if weights is None else weights
    scores = [_pair_score(p, g, function, weights) for p, g in zip(pred, gold)]
    scores += [0.0] * (max(len(pred), len(gold)) - len(scores))
    return scores


def kv_similarity(
    pred: Sequence[Record],
    gold: Sequence[Record],
    metric: str = "rouge-l",
    weights: Optional[Dict[str, float]] = None
) -> float:
    """
    Key-value similarity in [0, 1].

    Instructions are aligned by order. Each pair scores the weighted mean of
    the metric over the union of its keys (keys on one side only score 0);
    the result is the mean over pairs.

    Args:
        pred: Predicted records
        gold: Reference records
        metric: "rouge-l", "bleu" or "exact"
        weights: Per-key weights; unlisted keys weigh 1

    Returns:
        Score in [0, 1]; two empty lists score 1.0
    """
    scores = pair_scores(pred, gold, metric, weights)
    if not scores:
        return 1.0
    return sum(scores) / len(scores)


def load_records(path: str) -> List[Record]:
    """
    Read canonical records from a JSON record list, a program JSON artifact
    or a program listing (.txt).

    Raises:
        FileNotFoundError: If the file doesn't exist
        ValueError: If the JSON has neither shape
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Records file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if not path.endswith(".json"):
        return to_canonical(parse_listing(text))
    data = json.loads(text) if text.strip() else []
    if isinstance(data, dict) and "instructions" in data:
        return to_canonical(program_from_dict(data))
    if isinstance(data, list):
        return data
    raise ValueError(f"{path}: expected a record list or a program artifact")


def _stem(filename: str) -> str:
    return filename.split(".")[0]


def score_directories(
    pred_dir: str,
    gold_dir: str,
    metric: str = "rouge-l",
    weights: Optional[Dict[str, float]] = None
) -> 'pd.DataFrame':  # type: ignore
    """
    Score every prediction against the reference with the same stem.

    Args:
        pred_dir: Directory of predicted records/programs
        gold_dir: Directory of reference records/programs
        metric: Token metric
        weights: Per-key weights

    Returns:
        DataFrame with one row per protocol (protocol, pred_instructions,
        gold_instructions, pairs, pair_total, score). Its `attrs` carry
        aggregate_per_protocol and aggregate_per_step.

    Raises:
        FileNotFoundError: If either directory doesn't exist
    """
    import pandas as pd

    for directory in (pred_dir, gold_dir):
        if not os.path.isdir(directory):
            raise FileNotFoundError(f"Directory not found: {directory}")

    golds = {_stem(name): name for name in sorted(os.listdir(gold_dir))
             if name.endswith((".json", ".txt"))}
    rows = []
    for name in sorted(os.listdir(pred_dir)):
        stem = _stem(name)
        if stem not in golds or not name.endswith((".json", ".txt")):
            continue
        pred = load_records(os.path.join(pred_dir, name))
        gold = load_records(os.path.join(gold_dir, golds[stem]))
        scores = pair_scores(pred, gold, metric, weights)
        rows.append({
            "protocol": stem,
            "pred_instructions": len(pred),
            "gold_instructions": len(gold),
            "pairs": len(scores),
            "pair_total": sum(scores),
            "score": sum(scores) / len(scores) if scores else 1.0,
        })
        logger.debug("Scored %s: %.4f", stem, rows[-1]["score"])

    df = pd.DataFrame(rows, columns=["protocol", "pred_instructions", "gold_instructions",
                                     "pairs", "pair_total", "score"])
    pairs = df["pairs"].sum() if len(df) else 0
    df.attrs["aggregate_per_protocol"] = float(df["score"].mean()) if len(df) else 1.0
    df.attrs["aggregate_per_step"] = float(df["pair_total"].sum() / pairs) if pairs else 1.0
    df.attrs["metric"] = metric
    return df
