"""
Protoflow Protocol Translation

Translates natural-language experimental protocols into structured programs
of a domain-specific language, completes their implicit semantics and links
them into a Protocol Dependence Graph checked against execution constraints.

Quick Start:
    from protoflow.dsl import load_dsl_spec
    from protoflow.extractor import ExtractorGateway
    from protoflow.pipeline import translate

    spec = load_dsl_spec("protoflow/examples/cooking_spec.yaml")
    with open("protoflow/examples/pasta_bolognese.txt") as f:
        result = translate(f.read(), spec, ExtractorGateway())
    print(result.completed and len(result.completed), result.flow.accept)
"""

__version__ = "1.0.0"
