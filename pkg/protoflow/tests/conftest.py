"""
Shared fixtures: bundled specs, a small lab spec built in memory, and gateways
that never touch the network.
"""

import os
import sys

import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from protoflow.dsl import build_dsl_spec, load_dsl_spec, parse_listing
from protoflow.extractor import ExtractorGateway

TESTS_DIR = os.path.dirname(os.path.abspath(__file__))
EXAMPLES_DIR = os.path.join(os.path.dirname(TESTS_DIR), "examples")
GOLDEN_DIR = os.path.join(TESTS_DIR, "golden")


def example_path(name: str) -> str:
    return os.path.join(EXAMPLES_DIR, name)


def read_example(name: str) -> str:
    with open(example_path(name), "r", encoding="utf-8") as f:
        return f.read()


def flow_corpus() -> list:
    """Well-formed lab-spec listings, one per blank-line separated block."""
    with open(os.path.join(GOLDEN_DIR, "flow_corpus.txt"), "r", encoding="utf-8") as f:
        return [block.strip() + "\n" for block in f.read().split("\n\n") if block.strip()]


LAB_SPEC = {
    "name": "lab",
    "start": "Protocol",
    "variables": {
        "control": ["Protocol"],
        "operations": ["Mix", "Transfer", "Titrate", "Record"],
        "conditions": ["Reagent", "Vessel", "Amount", "Destination"],
        "parameters": ["target", "container", "volume", "destination"],
    },
    "terminals": ["MIX_KW", "TRANSFER_KW", "TITRATE_KW", "RECORD_KW", "STRING", "REF", "QUANTITY"],
    "productions": {
        "Protocol": ["Mix", "Transfer", "Titrate", "Record"],
        "Mix": ["MIX_KW Reagent? Vessel? Amount?"],
        "Transfer": ["TRANSFER_KW Reagent? Destination?"],
        "Titrate": ["TITRATE_KW Reagent? Amount?"],
        "Record": ["RECORD_KW Reagent?"],
        "Reagent": ["target"],
        "Vessel": ["container"],
        "Amount": ["volume"],
        "Destination": ["destination"],
        "target": ["STRING", "REF"],
        "container": ["STRING", "REF"],
        "volume": ["QUANTITY"],
        "destination": ["STRING", "REF"],
    },
    "semantics": {
        "operations": {
            "Mix": {"keyword": "mix", "emits": "mixture", "consumes": True},
            "Transfer": {"keyword": "transfer", "consumes": True},
            "Titrate": {"keyword": "titrate"},
            "Record": {"keyword": "record"},
        },
        "parameters": {
            "target": {"kind": "reagent", "labels": ["reagent"], "max": 2},
            "container": {"kind": "container", "labels": ["container"]},
            "volume": {"kind": "quantity", "unit": "volume-mL", "labels": ["volume"]},
            "destination": {"kind": "container", "labels": ["container"]},
        },
        "vessels": ["flask", "tube", "beaker"],
        "default_container": "flask",
    },
}

MINIMAL_CHAIN = "mix(emit = mixture_1);\ntransfer(target = mixture_1);\n"


@pytest.fixture(scope="session")
def cooking_spec():
    return load_dsl_spec(example_path("cooking_spec.yaml"))


@pytest.fixture(scope="session")
def chemistry_spec():
    return load_dsl_spec(example_path("chemistry_spec.yaml"))


@pytest.fixture(scope="session")
def lab_spec():
    return build_dsl_spec(LAB_SPEC)


@pytest.fixture
def gateway():
    return ExtractorGateway()


@pytest.fixture
def minimal_chain(lab_spec):
    return parse_listing(MINIMAL_CHAIN, lab_spec)


@pytest.fixture
def pasta_structured(cooking_spec):
    return parse_listing(read_example("pasta_bolognese_structured.txt"), cooking_spec)
