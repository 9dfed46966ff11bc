"""
Protocol Dependence Graph

Joins the operation dependence structure of a program and its reagent flow
graph into one dual structure: instructions are nodes of the operation graph
and edges of the reagent graph; reagents passed between instructions are
edges of the operation graph and nodes of the reagent graph.

Core functions:
    - build_pdg() - Assemble both graphs and their cross-links
    - check_duality() - Verify the edge/node bijections in both directions
    - export_pdg() - Serialize as JSON or DOT
    - pdg_from_json() - Re-import a JSON export

Usage:
    from protoflow.pdg import build_pdg, check_duality, export_pdg

    pdg = build_pdg(program, flow, spec_name="cooking")
    report = check_duality(pdg)
    print(export_pdg(pdg, "dot"))
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Any, Tuple

import networkx as nx

from protoflow import __version__
from protoflow.dsl import DslProgram, render_instruction
from protoflow.errors import InconsistentInputs
from protoflow.reagent_flow import ReagentFlowGraph, container_of

logger = logging.getLogger(__name__)

SOURCE_NODE = "source"
SINK_NODE = "sink"
BOUNDARY_NODES = (SOURCE_NODE, SINK_NODE)

DOT_TEMPLATE = """digraph pdg {
  rankdir = "TB" ;
  node [fontname="Helvetica", fontsize=10, style=filled, fillcolor=white] ;

  // Instructions
  %s

  // Reagents
  %s

  // Edges
  %s
}
"""


@dataclass
class Pdg:
    op_graph: nx.MultiDiGraph = field(default_factory=nx.MultiDiGraph)
    reagent_graph: nx.MultiDiGraph = field(default_factory=nx.MultiDiGraph)
    cross_links: Dict[str, List[Dict[str, Any]]] = field(
        default_factory=lambda: {"op_edges": [], "reagent_edges": []}
    )
    meta: Dict[str, Any] = field(default_factory=dict)

    def flow_edges(self) -> List[Tuple[int, int, str]]:
        """Reagent-carrying op edges as (definer, killer, reagent id)."""
        return [(u, v, k) for u, v, k, kind in self.op_graph.edges(keys=True, data="kind") if kind == "flow"]

    def reagent_nodes(self) -> List[str]:
        return [n for n in self.reagent_graph.nodes if n not in BOUNDARY_NODES]


@dataclass
class DualityReport:
    unmatched_op_edges: List[Tuple[int, int, str]] = field(default_factory=list)
    unmatched_reagent_nodes: List[str] = field(default_factory=list)
    unmatched_reagent_edges: List[Tuple[str, str, int]] = field(default_factory=list)
    unmatched_op_nodes: List[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not (self.unmatched_op_edges or self.unmatched_reagent_nodes
                    or self.unmatched_reagent_edges or self.unmatched_op_nodes)

    def describe(self) -> str:
        if self.passed:
            return "duality holds"
        parts = []
        for u, v, reagent in self.unmatched_op_edges:
            parts.append(f"op edge {u}->{v} carrying '{reagent}' has no reagent node")
        for node in self.unmatched_reagent_nodes:
            parts.append(f"reagent node '{node}' has no op edge")
        for u, v, key in self.unmatched_reagent_edges:
            parts.append(f"reagent edge {u}->{v} (instruction {key}) has no op node")
        for node in self.unmatched_op_nodes:
            parts.append(f"op node {node} has no reagent edge")
        return "; ".join(parts)


def _instruction_container(program: DslProgram, flow: ReagentFlowGraph, index: int) -> Optional[str]:
    container = container_of(program.instructions[index])
    if container is None:
        for rid in flow.uses[index] + flow.defs[index]:
            record = flow.records.get(rid)
            if record is not None and record.container is not None:
                return record.container
    return container


def build_pdg(
    program: DslProgram,
    flow: ReagentFlowGraph,
    spec_name: str = "",
    seed: Optional[int] = None
) -> Pdg:
    """
    Build the Protocol Dependence Graph.

    Args:
        program: Completed program
        flow: Result of analyze_flow() on the same program
        spec_name: Recorded in meta
        seed: Recorded in meta

    Returns:
        Pdg with op_graph, reagent_graph and cross-links

    Raises:
        InconsistentInputs: If flow refers to instructions the program lacks
    """
    n = len(program.instructions)
    if len(flow.uses) != n:
        raise InconsistentInputs(f"flow covers {len(flow.uses)} instructions, program has {n}")
    for definer, killer, reagent in flow.dependences:
        if not (0 <= definer < n and 0 <= killer < n):
            raise InconsistentInputs(
                f"dependence <{definer}, {killer}> outside the program", symbol=reagent
            )

    pdg = Pdg()
    boundary = sorted(
        rid for rid, record in flow.records.items()
        if record.at_source or rid in flow.consumed_by_output
    )
    pdg.meta = {"spec": spec_name, "seed": seed, "version": __version__, "boundary": boundary}

    op = pdg.op_graph
    containers = {}
    for index, instr in enumerate(program.instructions):
        containers[index] = _instruction_container(program, flow, index)
        op.add_node(index, operation=instr.operation, step=instr.step,
                    label=render_instruction(instr).rstrip(";"), container=containers[index])

    for definer, killer, reagent in flow.dependences:
        op.add_edge(definer, killer, key=reagent, kind="flow", reagent=reagent)

    last_in: Dict[str, int] = {}
    for index in range(n):
        container = containers[index]
        if container is None:
            continue
        previous = last_in.get(container)
        if previous is not None and not op.has_edge(previous, index):
            op.add_edge(previous, index, key="order", kind="order", container=container)
        last_in[container] = index

    for wrapper in program.controls:
        if wrapper.kind == "loop":
            op.add_edge(wrapper.end, wrapper.start, key="loop", kind="control", loop=True)
        elif wrapper.kind == "branch" and wrapper.start > 0 and wrapper.end + 1 < n:
            op.add_edge(wrapper.start - 1, wrapper.end + 1, key="branch", kind="control", loop=False)

    reagents = pdg.reagent_graph
    for rid, record in flow.records.items():
        reagents.add_node(rid, name=record.name, definer=record.definer, killer=record.killer,
                          container=record.container, boundary=rid in boundary)
    if n:
        reagents.add_node(SOURCE_NODE, boundary=True)
        reagents.add_node(SINK_NODE, boundary=True)
    for index in range(n):
        uses, defs, kills = flow.uses[index], flow.defs[index], flow.kills[index]
        start = uses[0] if uses else SOURCE_NODE
        if defs:
            end = defs[0]
        elif uses and uses[0] not in kills:
            end = uses[0]
        else:
            end = SINK_NODE
        reagents.add_edge(start, end, key=index)
        pdg.cross_links["reagent_edges"].append({"reagent_edge": [start, end, index], "op_node": index})

    for definer, killer, reagent in flow.dependences:
        if reagent not in boundary:
            pdg.cross_links["op_edges"].append({"op_edge": [definer, killer, reagent], "reagent_node": reagent})

    logger.info("Built PDG: %d op nodes, %d op edges, %d reagent nodes",
                op.number_of_nodes(), op.number_of_edges(), len(pdg.reagent_nodes()))
    return pdg


def check_duality(pdg: Pdg) -> DualityReport:
    """
    Check both bijections: reagent-carrying op edges against reagent nodes,
    reagent edges against op nodes. Boundary reagents listed in meta are
    outside the bijection. Never raises.
    """
    report = DualityReport()
    boundary = set(pdg.meta.get("boundary", []))
    nodes = {n for n in pdg.reagent_nodes() if n not in boundary}

    carried: Dict[str, int] = {}
    for u, v, reagent in pdg.flow_edges():
        if reagent in boundary:
            continue
        if reagent not in nodes or carried.get(reagent):
            report.unmatched_op_edges.append((u, v, reagent))
        carried[reagent] = carried.get(reagent, 0) + 1
    report.unmatched_reagent_nodes = sorted(n for n in nodes if n not in carried)

    per_instruction: Dict[int, int] = {}
    for u, v, key in pdg.reagent_graph.edges(keys=True):
        if key not in pdg.op_graph or per_instruction.get(key):
            report.unmatched_reagent_edges.append((u, v, key))
        per_instruction[key] = per_instruction.get(key, 0) + 1
    report.unmatched_op_nodes = sorted(n for n in pdg.op_graph.nodes if n not in per_instruction)

    if not report.passed:
        logger.warning("Duality check failed: %s", report.describe())
    return report


def non_loop_acyclic(pdg: Pdg) -> bool:
    """The op graph without loop back-edges has no cycle."""
    view = nx.subgraph_view(
        pdg.op_graph,
        filter_edge=lambda u, v, k: not pdg.op_graph.edges[u, v, k].get("loop", False),
    )
    return nx.is_directed_acyclic_graph(view)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def pdg_to_dict(pdg: Pdg) -> Dict[str, Any]:
    op_nodes = [
        {"id": node, "operation": data["operation"], "step": data["step"],
         "label": data["label"], "container": data["container"]}
        for node, data in sorted(pdg.op_graph.nodes(data=True))
    ]
    op_edges = []
    for u, v, key, data in pdg.op_graph.edges(keys=True, data=True):
        entry = {"source": u, "target": v, "key": key, "kind": data["kind"]}
        for extra in ("reagent", "container", "loop"):
            if extra in data:
                entry[extra] = data[extra]
        op_edges.append(entry)

    reagent_nodes = []
    for node, data in pdg.reagent_graph.nodes(data=True):
        entry = {"id": node}
        entry.update(data)
        reagent_nodes.append(entry)
    reagent_edges = [
        {"source": u, "target": v, "key": key}
        for u, v, key in pdg.reagent_graph.edges(keys=True)
    ]
    return {
        "op_nodes": op_nodes,
        "op_edges": op_edges,
        "reagent_nodes": reagent_nodes,
        "reagent_edges": reagent_edges,
        "cross_links": pdg.cross_links,
        "meta": pdg.meta,
    }


def pdg_from_json(text: str) -> Pdg:
    """Rebuild a Pdg from export_pdg(pdg, "json")."""
    data = json.loads(text)
    pdg = Pdg(meta=data.get("meta", {}),
              cross_links=data.get("cross_links", {"op_edges": [], "reagent_edges": []}))
    for node in data.get("op_nodes", []):
        attrs = dict(node)
        pdg.op_graph.add_node(attrs.pop("id"), **attrs)
    for edge in data.get("op_edges", []):
        attrs = dict(edge)
        pdg.op_graph.add_edge(attrs.pop("source"), attrs.pop("target"), key=attrs.pop("key"), **attrs)
    for node in data.get("reagent_nodes", []):
        attrs = dict(node)
        pdg.reagent_graph.add_node(attrs.pop("id"), **attrs)
    for edge in data.get("reagent_edges", []):
        pdg.reagent_graph.add_edge(edge["source"], edge["target"], key=edge["key"])
    return pdg


def _quote(text: Any) -> str:
    return str(text).replace("\\", "\\\\").replace('"', '\\"')


def pdg_to_dot(pdg: Pdg) -> str:
    """
    DOT rendering: instructions as boxes, reagents as ellipses, op edges
    solid, reagent lifecycle cross-links dashed. Boundary nodes are omitted.
    """
    if pdg.op_graph.number_of_nodes() == 0 and not pdg.reagent_nodes():
        return "digraph pdg {\n}\n"

    op_nodes = [
        '"op_%s" [label="%s", shape=box] ;' % (node, _quote(data.get("label", data.get("operation", ""))))
        for node, data in sorted(pdg.op_graph.nodes(data=True))
    ]
    reagent_nodes = [
        '"r_%s" [label="%s", shape=ellipse] ;' % (_quote(node), _quote(node))
        for node in pdg.reagent_nodes()
    ]

    edges = []
    for u, v, key, data in pdg.op_graph.edges(keys=True, data=True):
        if data.get("kind") == "flow":
            edges.append('"op_%s" -> "op_%s" [label="%s"] ;' % (u, v, _quote(key)))
        elif data.get("kind") == "control":
            edges.append('"op_%s" -> "op_%s" [label="%s", style=bold] ;' % (u, v, _quote(key)))
        else:
            edges.append('"op_%s" -> "op_%s" [color=gray] ;' % (u, v))
    for u, v, key in pdg.reagent_graph.edges(keys=True):
        if u not in BOUNDARY_NODES and u != v:
            edges.append('"r_%s" -> "op_%s" [style=dashed] ;' % (_quote(u), key))
        if v not in BOUNDARY_NODES and u != v:
            edges.append('"op_%s" -> "r_%s" [style=dashed] ;' % (key, _quote(v)))

    return DOT_TEMPLATE % (
        "\n  ".join(op_nodes),
        "\n  ".join(reagent_nodes),
        "\n  ".join(edges),
    )


def export_pdg(pdg: Pdg, fmt: str = "json") -> str:
    """
    Serialize a Pdg.

    Args:
        pdg: Graph to serialize
        fmt: "json" or "dot"

    Returns:
        Document text

    Raises:
        ValueError: If the format is unknown
    """
    if fmt == "json":
        return json.dumps(pdg_to_dict(pdg), indent=2, ensure_ascii=False)
    if fmt == "dot":
        return pdg_to_dot(pdg)
    raise ValueError(f"Unknown PDG format: {fmt} (expected json or dot)")
