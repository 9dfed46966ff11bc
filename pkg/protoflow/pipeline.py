"""
Pipeline

Wires the three stages end to end: syntax (pre-processing, synthesis, control
flow), semantics (implied steps, parameter completion, reagent flow, PDG) and
execution (constraint model, simulation). Used by the CLI runner and the
end-to-end tests.

Core functions:
    - structure() - Protocol text -> structured program
    - complete() - Structured program -> completed program
    - translate() - Every stage for one protocol
    - write_artifacts() - Stage artifacts into an output directory
    - translate_many() - Several protocols on a thread pool, results in input order

Usage:
    from protoflow.pipeline import translate, write_artifacts

    result = translate(text, spec, gateway, run_config, resources=resources, stem="bolognese")
    write_artifacts(result, "protoflow_out")
    print(result.exit_code)
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from protoflow.config import RunConfig
from protoflow.dsl import (
    DslProgram,
    DslSpec,
    ValidationReport,
    program_to_dict,
    render_listing,
    validate_program,
)
from protoflow.execution import (
    ExecutionModel,
    ExecutionTrace,
    ResourceDeclarations,
    Violation,
    dump_trace,
    is_satisfied,
    make_model,
    render_trace,
    simulate,
    trace_report,
)
from protoflow.evaluation import to_canonical
from protoflow.extractor import ExtractorGateway
from protoflow.pdg import DualityReport, Pdg, build_pdg, check_duality, export_pdg
from protoflow.preprocess import EntitySequence, load_protocol, preprocess_protocol
from protoflow.reagent_flow import (
    ReagentFlowGraph,
    analyze_flow,
    complete_implied_steps,
    complete_parameters,
    locality_statistic,
)
from protoflow.synthesis import detect_control_flow, synthesize

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VIOLATIONS = 2


@dataclass
class TranslationResult:
    stem: str
    entities: EntitySequence
    structured: DslProgram
    divergence: float
    validation: ValidationReport
    completed: Optional[DslProgram] = None
    flow: Optional[ReagentFlowGraph] = None
    pdg: Optional[Pdg] = None
    duality: Optional[DualityReport] = None
    model: Optional[ExecutionModel] = None
    trace: Optional[ExecutionTrace] = None
    violations: List[Violation] = field(default_factory=list)
    locality: Optional[float] = None

    @property
    def satisfied(self) -> bool:
        if self.model is None or self.trace is None:
            return self.validation.ok
        return is_satisfied(self.model, self.trace, self.violations)

    @property
    def exit_code(self) -> int:
        if not self.validation.ok:
            return EXIT_ERROR
        return EXIT_OK if self.satisfied else EXIT_VIOLATIONS


def structure(
    text: str,
    spec: DslSpec,
    gateway: ExtractorGateway,
    config: Optional[RunConfig] = None
) -> Tuple[EntitySequence, DslProgram, float]:
    """Syntax stage: entity sequence, synthesized program with control flow, divergence."""
    config = config or RunConfig()
    entities = preprocess_protocol(text, spec, gateway, config.match)
    program, score = synthesize(entities, spec, config.synthesis)
    program = detect_control_flow(entities, program, spec)
    return entities, program, score


def complete(program: DslProgram, spec: DslSpec, gateway: ExtractorGateway) -> DslProgram:
    """Semantics stage, first half: implied steps then parameter completion."""
    return complete_parameters(complete_implied_steps(program, spec), spec, gateway)


def translate(
    text: str,
    spec: DslSpec,
    gateway: Optional[ExtractorGateway] = None,
    config: Optional[RunConfig] = None,
    resources: Optional[ResourceDeclarations] = None,
    stem: str = "protocol",
    validate_only: bool = False
) -> TranslationResult:
    """
    Run every stage on one protocol.

    Args:
        text: Raw protocol text
        spec: DSL spec
        gateway: Extraction gateway (rule backend if None)
        config: Run configuration
        resources: Capacities, attributes and safety rules
        stem: Artifact name stem
        validate_only: Stop after syntax verification

    Returns:
        TranslationResult; exit_code gives the CLI verdict
    """
    config = config or RunConfig()
    gateway = gateway or ExtractorGateway()
    entities, structured, score = structure(text, spec, gateway, config)
    validation = validate_program(structured, spec)
    result = TranslationResult(stem=stem, entities=entities, structured=structured,
                               divergence=score, validation=validation)
    if not validation.ok:
        for violation in validation.violations:
            logger.warning("Syntax violation at instruction %s: %s", violation.instruction, violation.message)
        return result
    if validate_only:
        return result

    result.completed = complete(structured, spec, gateway)
    result.flow = analyze_flow(result.completed, gateway, spec)
    result.locality = locality_statistic(result.flow, result.completed)
    result.pdg = build_pdg(result.completed, result.flow, spec.name, config.synthesis.seed)
    result.duality = check_duality(result.pdg)

    resources = resources or ResourceDeclarations()
    result.model = make_model(result.completed, result.pdg, resources.rules, resources, spec)
    result.trace, result.violations = simulate(result.model)
    logger.info("Translated %s: %d instructions, accept=%s, %d violations",
                stem, len(result.completed), result.flow.accept, len(result.violations))
    return result


def review_report(result: TranslationResult) -> str:
    """Every review flag plus flow and duality findings, one per line."""
    lines = []
    program = result.completed or result.structured
    for flag in program.flags:
        lines.append(f"REVIEW {flag.describe()}")
    for violation in result.validation.violations:
        lines.append(f"SYNTAX instruction {violation.instruction} slot {violation.slot}: {violation.message}")
    if result.flow is not None and not result.flow.accept:
        lines.append(f"FLOW {result.flow.describe()}")
    if result.duality is not None and not result.duality.passed:
        lines.append(f"DUALITY {result.duality.describe()}")
    return "\n".join(lines) + ("\n" if lines else "")


def _write(path: str, content: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        f.write(content)
    return path


def write_artifacts(
    result: TranslationResult,
    out_dir: str,
    formats: Sequence[str] = ("json", "dot", "text")
) -> List[str]:
    """
    Write the stage artifacts `<stem>.structured.*`, `<stem>.completed.*`,
    `<stem>.records.json`, `<stem>.pdg.*`, `<stem>.trace.*` and
    `<stem>.review.txt`.

    Returns:
        Paths written, in order
    """
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, result.stem)
    written = []

    def dump(obj) -> str:
        return json.dumps(obj, indent=2, ensure_ascii=False)

    if "json" in formats:
        written.append(_write(f"{base}.structured.json", dump(program_to_dict(result.structured))))
    if "text" in formats:
        written.append(_write(f"{base}.structured.txt", render_listing(result.structured)))

    if result.completed is not None:
        if "json" in formats:
            written.append(_write(f"{base}.completed.json", dump(program_to_dict(result.completed))))
            written.append(_write(f"{base}.records.json", dump(to_canonical(result.completed))))
            written.append(_write(f"{base}.pdg.json", export_pdg(result.pdg, "json")))
        if "text" in formats:
            written.append(_write(f"{base}.completed.txt", render_listing(result.completed)))
        if "dot" in formats:
            written.append(_write(f"{base}.pdg.dot", export_pdg(result.pdg, "dot")))

    if result.model is not None:
        report = trace_report(result.model, result.trace, result.violations)
        if "json" in formats:
            written.append(_write(f"{base}.trace.json", dump_trace(report)))
        if "text" in formats:
            written.append(_write(f"{base}.trace.txt", render_trace(report)))

    written.append(_write(f"{base}.review.txt", review_report(result)))
    logger.debug("Wrote %d artifacts for %s", len(written), result.stem)
    return written


def protocol_stem(path: str) -> str:
    return os.path.basename(path).split(".")[0]


def translate_many(
    paths: Sequence[str],
    spec: DslSpec,
    gateway: ExtractorGateway,
    config: Optional[RunConfig] = None,
    resources: Optional[ResourceDeclarations] = None,
    validate_only: bool = False,
    max_workers: int = 4
) -> List[Tuple[str, Optional[TranslationResult], Optional[Exception]]]:
    """
    Translate several protocol files concurrently.

    Returns:
        (path, result, error) per input path, in input order
    """
    def run(path: str) -> Tuple[str, Optional[TranslationResult], Optional[Exception]]:
        try:
            protocol = load_protocol(path)
            return path, translate(protocol.raw, spec, gateway, config, resources,
                                   protocol_stem(path), validate_only), None
        except Exception as e:
            logger.error("Translation of %s failed: %s", path, e)
            return path, None, e

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        return list(pool.map(run, paths))


def summarize(results: Sequence[TranslationResult]) -> Dict[str, float]:
    done = [r for r in results if r.completed is not None]
    return {
        "protocols": len(results),
        "completed": len(done),
        "accepted": sum(1 for r in done if r.flow.accept),
        "satisfied": sum(1 for r in done if r.satisfied),
    }
