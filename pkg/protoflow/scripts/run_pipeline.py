#!/usr/bin/env python3
"""
Easy Runner for the Protoflow Pipeline

CLI tool for translating protocols and running single stages on emitted
artifacts.

Usage:
    # Translate a protocol with the bundled cooking spec (rule backend)
    python protoflow/scripts/run_pipeline.py translate protoflow/examples/pasta_bolognese.txt

    # Check capacities and safety rules against declared resources
    python protoflow/scripts/run_pipeline.py translate protoflow/examples/capacity_protocol.txt \\
        --dsl protoflow/examples/chemistry_spec.yaml --resources protoflow/examples/capacity_resources.yaml

    # Stop after syntax verification
    python protoflow/scripts/run_pipeline.py translate protocol.txt --validate-only

    # Complete a structured program and analyze its reagent flow
    python protoflow/scripts/run_pipeline.py flow protoflow_out/pasta_bolognese.structured.json

    # Build the PDG of a completed program (JSON and DOT)
    python protoflow/scripts/run_pipeline.py graph protoflow_out/pasta_bolognese.completed.json

    # Simulate with a what-if edit
    python protoflow/scripts/run_pipeline.py simulate out/capacity_protocol.completed.json \\
        --dsl protoflow/examples/chemistry_spec.yaml --resources protoflow/examples/capacity_resources.yaml \\
        --whatif delete:1

    # Score predictions against references
    python protoflow/scripts/run_pipeline.py eval predictions/ references/ --metric rouge-l -o scores.csv

    # Debug mode (shows configuration, tracebacks)
    python protoflow/scripts/run_pipeline.py translate protocol.txt --debug

Exit codes: 0 fully satisfied, 2 constraint violations, 1 errors.
"""

import os
import sys
import json
import logging
import argparse

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from protoflow.config import get_service_config, load_run_config, mask_key
from protoflow.dsl import load_dsl_spec, parse_listing, program_from_dict, program_to_dict, render_listing
from protoflow.errors import ProtoflowError
from protoflow.evaluation import score_directories
from protoflow.execution import (
    ResourceDeclarations,
    dump_trace,
    is_satisfied,
    load_resources,
    make_model,
    parse_edit,
    render_trace,
    simulate,
    trace_report,
    whatif,
)
from protoflow.extractor import ExtractorGateway
from protoflow.pdg import build_pdg, check_duality, export_pdg, pdg_from_json
from protoflow.pipeline import (
    EXIT_ERROR,
    EXIT_OK,
    EXIT_VIOLATIONS,
    complete,
    protocol_stem,
    summarize,
    translate_many,
    write_artifacts,
)
from protoflow.reagent_flow import analyze_flow, locality_statistic

EXAMPLES_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "examples")
DEFAULT_DSL = os.path.join(EXAMPLES_DIR, "cooking_spec.yaml")


def print_section(title: str, width: int = 70):
    """Print a formatted section header."""
    print("\n" + "=" * width)
    print(title)
    print("=" * width)


def setup_logging(args) -> None:
    level = logging.DEBUG if args.debug else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def load_config(args):
    overrides = {
        "dsl": getattr(args, "dsl", None),
        "resources": getattr(args, "resources", None),
        "rules": getattr(args, "rules", None),
        "out": getattr(args, "out", None),
        "seed": getattr(args, "seed", None),
        "gateway.backend": getattr(args, "extractor", None),
        "gateway.cassette": getattr(args, "cassette", None),
        "gateway.cassette_mode": getattr(args, "cassette_mode", None),
    }
    if getattr(args, "formats", None):
        overrides["formats"] = args.formats.split(",")
    config = load_run_config(args.config, overrides)
    if config.dsl is None:
        config.dsl = DEFAULT_DSL
    return config


def load_declarations(config) -> ResourceDeclarations:
    resources = load_resources(config.resources) if config.resources else ResourceDeclarations()
    if config.rules:
        extra = load_resources(config.rules)
        resources.rules.extend(extra.rules)
        resources.attributes.update(extra.attributes)
    return resources


def load_program(path: str, spec=None):
    """Read a program from a JSON artifact or a `.txt` listing."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Program artifact not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        if path.endswith(".txt"):
            return parse_listing(f.read(), spec)
        return program_from_dict(json.load(f))


def worst(a: int, b: int) -> int:
    """Combine exit codes: errors beat violations, violations beat success."""
    rank = {EXIT_OK: 0, EXIT_VIOLATIONS: 1, EXIT_ERROR: 2}
    return a if rank[a] >= rank[b] else b


def show_service_config(config) -> None:
    print_section("Extractor Configuration")
    print(f"Backend: {config.gateway.backend}")
    print(f"Cassette: {config.gateway.cassette or 'N/A'} ({config.gateway.cassette_mode})")
    if config.gateway.backend != "rule" and config.gateway.cassette_mode != "replay":
        try:
            service = get_service_config()
            print(f"Endpoint: {service['endpoint']}")
            print(f"Model: {service['model']}")
            print(f"API Key: {mask_key(service.get('key'))}")
        except ValueError as e:
            print(f"⚠ Could not load service config: {e}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_translate(args) -> int:
    config = load_config(args)
    spec = load_dsl_spec(config.dsl)
    resources = load_declarations(config)
    if args.debug:
        show_service_config(config)
    gateway = ExtractorGateway.from_config(config.gateway)

    for path in args.protocols:
        if not os.path.exists(path):
            print(f"✗ Error: Protocol file not found: {path}")
            return EXIT_ERROR

    if args.verbose or args.debug:
        print_section("Translating")
        print(f"Spec: {spec.name} ({config.dsl})")
        print(f"Protocols: {len(args.protocols)}")

    outcomes = translate_many(args.protocols, spec, gateway, config, resources,
                              validate_only=args.validate_only)
    gateway.save()
    exit_code = EXIT_OK
    results = []
    for path, result, error in outcomes:
        print_section(f"Protocol: {path}")
        if error is not None:
            print(f"✗ {error}")
            exit_code = EXIT_ERROR
            continue
        results.append(result)
        print(f"Instructions (structured): {len(result.structured)}  divergence: {result.divergence:.4f}")
        if result.validation.ok:
            print("✓ Program is syntax-verified")
        else:
            print("✗ Syntax verification failed:")
            for violation in result.validation.violations:
                print(f"  - instruction {violation.instruction}, slot {violation.slot}: {violation.message}")
        if args.validate_only:
            if not result.validation.ok:
                exit_code = EXIT_ERROR
            continue

        if result.completed is not None:
            print(f"Instructions (completed): {len(result.completed)}")
            print(f"{'✓' if result.flow.accept else '⚠'} Reagent flow {result.flow.describe()}")
            print(f"Locality: {result.locality:.2f}")
            print(f"{'✓' if result.duality.passed else '✗'} PDG duality: {result.duality.describe()}")
            for violation in result.violations:
                print(f"✗ {violation.describe()}")
            if result.satisfied:
                print("✓ Execution fully satisfies the constraints")
        for flag in (result.completed or result.structured).flags:
            print(f"⚠ Review: {flag.describe()}")

        written = write_artifacts(result, config.out, config.formats)
        if args.verbose or args.debug:
            for item in written:
                print(f"  wrote {item}")
        if args.debug:
            print(render_listing(result.completed or result.structured))
        exit_code = worst(exit_code, result.exit_code)

    if args.validate_only:
        print("\n✓ Validation complete (--validate-only mode)" if exit_code == EXIT_OK
              else "\n✗ Validation failed")
        return exit_code

    if len(results) > 1:
        print_section("Summary")
        for key, value in summarize(results).items():
            print(f"{key}: {value}")
    print(f"\nArtifacts in: {config.out}")
    return exit_code


def cmd_flow(args) -> int:
    config = load_config(args)
    spec = load_dsl_spec(config.dsl)
    gateway = ExtractorGateway.from_config(config.gateway)
    program = load_program(args.program, spec)
    completed = complete(program, spec, gateway)
    flow = analyze_flow(completed, gateway, spec)
    gateway.save()

    print_section("Reagent Flow")
    print(f"Instructions: {len(completed)}")
    print(f"Dependences: {len(flow.dependences)}")
    for definer, killer, reagent in flow.dependences:
        print(f"  <{definer}, {killer}> {reagent}")
    print(f"Locality: {locality_statistic(flow, completed):.2f}")
    if flow.accept:
        print("✓ Flow accepted")
    else:
        print(f"⚠ Flow rejected: {flow.describe()}")

    os.makedirs(config.out, exist_ok=True)
    stem = protocol_stem(args.program)
    base = os.path.join(config.out, stem)
    with open(f"{base}.completed.json", "w", encoding="utf-8") as f:
        json.dump(program_to_dict(completed), f, indent=2, ensure_ascii=False)
    with open(f"{base}.completed.txt", "w", encoding="utf-8") as f:
        f.write(render_listing(completed))
    print(f"\n✓ Completed program saved to: {base}.completed.json")
    return EXIT_OK


def cmd_graph(args) -> int:
    config = load_config(args)
    if args.program.endswith(".pdg.json"):
        with open(args.program, "r", encoding="utf-8") as f:
            pdg = pdg_from_json(f.read())
    else:
        spec = load_dsl_spec(config.dsl)
        program = load_program(args.program, spec)
        flow = analyze_flow(program, ExtractorGateway.from_config(config.gateway), spec)
        pdg = build_pdg(program, flow, spec.name, config.seed)

    report = check_duality(pdg)
    print_section("Protocol Dependence Graph")
    print(f"Op nodes: {pdg.op_graph.number_of_nodes()}  op edges: {pdg.op_graph.number_of_edges()}")
    print(f"Reagent nodes: {len(pdg.reagent_nodes())}")
    print(f"{'✓' if report.passed else '✗'} Duality: {report.describe()}")

    os.makedirs(config.out, exist_ok=True)
    base = os.path.join(config.out, protocol_stem(args.program))
    for fmt in ("json", "dot"):
        if args.format in (fmt, "both"):
            path = f"{base}.pdg.{fmt}"
            with open(path, "w", encoding="utf-8") as f:
                f.write(export_pdg(pdg, fmt))
            print(f"✓ Saved: {path}")
    return EXIT_OK if report.passed else EXIT_VIOLATIONS


def cmd_simulate(args) -> int:
    config = load_config(args)
    spec = load_dsl_spec(config.dsl)
    resources = load_declarations(config)
    program = load_program(args.program, spec)
    flow = analyze_flow(program, ExtractorGateway.from_config(config.gateway), spec)
    pdg = build_pdg(program, flow, spec.name, config.seed)
    model = make_model(program, pdg, resources.rules, resources, spec)
    trace, violations = simulate(model, args.seed)
    report = trace_report(model, trace, violations)

    print_section("Simulation")
    print(render_trace(report), end="")

    for text in args.whatif or []:
        edit = parse_edit(text)
        delta = whatif(model, edit)
        print_section(f"What if: {text}")
        if delta.empty:
            print("No change in violations")
        for violation in delta.added:
            print(f"+ {violation.describe()}")
        for violation in delta.removed:
            print(f"- {violation.describe()}")

    os.makedirs(config.out, exist_ok=True)
    base = os.path.join(config.out, protocol_stem(args.program))
    with open(f"{base}.trace.json", "w", encoding="utf-8") as f:
        f.write(dump_trace(report))
    with open(f"{base}.trace.txt", "w", encoding="utf-8") as f:
        f.write(render_trace(report))
    return EXIT_OK if is_satisfied(model, trace, violations) else EXIT_VIOLATIONS


def cmd_eval(args) -> int:
    config = load_config(args)
    df = score_directories(args.pred_dir, args.gold_dir, args.metric, config.eval.key_weights)

    print_section("Evaluation")
    print(f"Metric: {args.metric}")
    print(f"Protocols scored: {len(df)}")
    if df.empty:
        print("⚠ No prediction matched a reference by file stem")
    else:
        print(df.to_string(index=False))
    print(f"\nAggregate (per protocol): {df.attrs['aggregate_per_protocol']:.4f}")
    print(f"Aggregate (per step):     {df.attrs['aggregate_per_step']:.4f}")

    if args.output:
        df.to_csv(args.output, index=False)
        print(f"\n✓ Results saved to: {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--debug", "-d", action="store_true",
                        help="Debug mode: show configuration, listings and tracebacks")
    shared.add_argument("--verbose", "-v", action="store_true",
                        help="Verbose mode: show stage progress")
    shared.add_argument("--config", "-c", type=str, default=None,
                        help="YAML run-config file (CLI flags override its values)")
    shared.add_argument("--dsl", type=str, default=None,
                        help="DSL spec file (default: protoflow/examples/cooking_spec.yaml)")
    shared.add_argument("--out", type=str, default=None,
                        help="Output directory for artifacts (default: protoflow_out)")
    shared.add_argument("--extractor", choices=["rule", "service", "fallback"], default=None,
                        help="Extraction backend (default: rule)")
    shared.add_argument("--cassette", type=str, default=None,
                        help="Record/replay cassette for service requests")
    shared.add_argument("--cassette-mode", choices=["off", "record", "replay"], default=None)
    shared.add_argument("--seed", type=int, default=None,
                        help="Seed for synthesis; simulate also orders independent instructions by it")

    parser = argparse.ArgumentParser(
        description="Translate natural-language protocols into verified programs",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("translate", parents=[shared], help="Run every stage on protocol files")
    p.add_argument("protocols", nargs="+", help="Protocol text files")
    p.add_argument("--resources", type=str, default=None, help="Containers/attributes/rules YAML")
    p.add_argument("--rules", type=str, default=None, help="Additional safety rules YAML")
    p.add_argument("--formats", type=str, default=None, help="Comma list of json,dot,text")
    p.add_argument("--validate-only", action="store_true",
                   help="Only verify program syntax, don't complete or simulate")
    p.set_defaults(handler=cmd_translate)

    p = sub.add_parser("flow", parents=[shared], help="Complete a structured program, analyze reagent flow")
    p.add_argument("program", help="Structured program (JSON artifact or .txt listing)")
    p.set_defaults(handler=cmd_flow)

    p = sub.add_parser("graph", parents=[shared], help="Build or re-export the PDG")
    p.add_argument("program", help="Completed program (JSON or .txt listing) or a .pdg.json export")
    p.add_argument("--format", choices=["json", "dot", "both"], default="both")
    p.set_defaults(handler=cmd_graph)

    p = sub.add_parser("simulate", parents=[shared], help="Simulate a completed program")
    p.add_argument("program", help="Completed program (JSON artifact or .txt listing)")
    p.add_argument("--resources", type=str, default=None, help="Containers/attributes/rules YAML")
    p.add_argument("--rules", type=str, default=None, help="Additional safety rules YAML")
    p.add_argument("--whatif", action="append",
                   help="Edit to evaluate: set:<i>:<param>=<value>, delete:<i>, insert:<i>:<listing>")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("eval", parents=[shared], help="Score predictions against references")
    p.add_argument("pred_dir", help="Directory of predicted records/programs")
    p.add_argument("gold_dir", help="Directory of reference records/programs")
    p.add_argument("--metric", choices=["rouge-l", "bleu", "exact"], default="rouge-l")
    p.add_argument("--output", "-o", type=str, default=None, help="CSV file path to save the table")
    p.set_defaults(handler=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args)
    try:
        return args.handler(args)
    except (ProtoflowError, FileNotFoundError, ValueError) as e:
        print(f"\n✗ Error: {e}")
        if args.debug:
            import traceback
            traceback.print_exc()
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
