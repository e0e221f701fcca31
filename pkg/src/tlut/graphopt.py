"""Graph pass: split fused LUT-GEMV nodes into precompute + lookup, then
share one precompute among all lookups reading the same activation.

Graph JSON::

    {"nodes": [{"id": "x", "op": "input"},
               {"id": "q", "op": "lut_gemv", "inputs": ["x"], "weight": "wq"},
               {"id": "y", "op": "add", "inputs": ["q", "k"]}],
     "outputs": ["y"],
     "weights": {"wq": {"M": 256, "K": 256, "scheme": "int4-b64"}}}

Ops: ``input``, ``lut_gemv``, ``precompute``, ``lookup``, ``add``, ``mul``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .lutgemv import GROUP, float_tables, lut_lookup, precompute_act_luts, prepare_activations

FUSED = "lut_gemv"
PRECOMPUTE = "precompute"
LOOKUP = "lookup"
ELEMENTWISE = {"add": np.add, "mul": np.multiply}


class GraphError(ValueError):
    pass


@dataclass
class Node:
    id: str
    op: str
    inputs: list[str] = field(default_factory=list)
    weight: str | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "op": self.op}
        if self.inputs:
            d["inputs"] = list(self.inputs)
        if self.weight is not None:
            d["weight"] = self.weight
        return d


@dataclass
class KernelGraph:
    nodes: list[Node]
    outputs: list[str]
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def by_id(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    def count(self, op: str) -> int:
        return sum(n.op == op for n in self.nodes)

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise GraphError("duplicate node ids")
        seen = set()
        by_id = self.by_id
        for n in self.nodes:
            if n.op not in {"input", FUSED, PRECOMPUTE, LOOKUP, *ELEMENTWISE}:
                raise GraphError(f"unknown op {n.op!r} on node {n.id}")
            for i in n.inputs:
                if i not in by_id:
                    raise GraphError(f"node {n.id} reads missing node {i}")
                if i not in seen:
                    raise GraphError(f"node {n.id} reads {i} before it is defined (cycle or bad order)")
            if n.op in (FUSED, LOOKUP) and n.weight is None:
                raise GraphError(f"{n.op} node {n.id} has no weight")
            if n.op == LOOKUP:
                if len(n.inputs) != 1 or by_id[n.inputs[0]].op != PRECOMPUTE:
                    raise GraphError(f"lookup {n.id} must depend on exactly one precompute")
            if n.op in (FUSED, PRECOMPUTE) and len(n.inputs) != 1:
                raise GraphError(f"{n.op} node {n.id} takes one activation")
            seen.add(n.id)
        for o in self.outputs:
            if o not in by_id:
                raise GraphError(f"output {o} is not a node")

    def to_dict(self) -> dict:
        return {"nodes": [n.to_dict() for n in self.nodes], "outputs": list(self.outputs),
                "weights": copy.deepcopy(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelGraph":
        try:
            nodes = [Node(n["id"], n["op"], list(n.get("inputs", [])), n.get("weight"))
                     for n in d["nodes"]]
            return cls(nodes, list(d["outputs"]), dict(d.get("weights", {})))
        except (KeyError, TypeError) as e:
            raise GraphError(f"malformed graph: {e}") from e

    @classmethod
    def from_json(cls, text: str) -> "KernelGraph":
        return cls.from_dict(json.loads(text))


def unfuse(g: KernelGraph) -> KernelGraph:
    """Replace every fused LUT-GEMV with a precompute feeding a lookup.

    The lookup keeps the fused node's id so consumers need no rewiring.
    """
    nodes = []
    for n in g.nodes:
        if n.op == FUSED:
            pre = Node(f"{n.id}.precompute", PRECOMPUTE, list(n.inputs))
            nodes += [pre, Node(n.id, LOOKUP, [pre.id], n.weight)]
        else:
            nodes.append(copy.copy(n))
    return KernelGraph(nodes, list(g.outputs), copy.deepcopy(g.weights))


def dedup_precompute(g: KernelGraph) -> KernelGraph:
    """Keep one precompute per activation source; rewire lookups to it.

    Sources are compared structurally (same producer node id).
    """
    keep: dict[str, str] = {}
    alias: dict[str, str] = {}
    nodes = []
    for n in g.nodes:
        n = copy.copy(n)
        n.inputs = [alias.get(i, i) for i in n.inputs]
        if n.op == PRECOMPUTE:
            src = n.inputs[0]
            if src in keep:
                alias[n.id] = keep[src]
                continue
            keep[src] = n.id
        nodes.append(n)
    return KernelGraph(nodes, list(g.outputs), copy.deepcopy(g.weights))


@dataclass
class ExecResult:
    values: dict[str, np.ndarray]
    precompute_calls: int
    table_builds: int

    def outputs(self, g: KernelGraph) -> dict[str, np.ndarray]:
        return {o: self.values[o] for o in g.outputs}


def execute(g: KernelGraph, inputs: dict[str, np.ndarray], models: dict) -> ExecResult:
    """Run the graph in node order. ``models`` maps weight id -> PackedModel.

    Fused nodes build their own activation tables; precompute nodes build them
    once and every dependent lookup reuses them.
    """
    vals: dict[str, object] = {}
    calls = 0
    builds = 0
    for n in g.nodes:
        if n.op == "input":
            vals[n.id] = np.asarray(inputs[n.id], dtype=np.float64)
        elif n.op in ELEMENTWISE:
            a, b = (vals[i] for i in n.inputs)
            vals[n.id] = ELEMENTWISE[n.op](a, b)
        elif n.op == PRECOMPUTE:
            vals[n.id] = _precompute(vals[n.inputs[0]], _mode_for(g, n, models))
            calls += 1
            builds += len(vals[n.id][0])
        elif n.op == LOOKUP:
            tables, scale = vals[n.inputs[0]]
            vals[n.id] = lut_lookup(models[n.weight], tables, act_scale=scale).out
        elif n.op == FUSED:
            model = models[n.weight]
            tables, scale = _precompute(vals[n.inputs[0]], model.scheme.activation_mode)
            calls += 1
            builds += len(tables)
            vals[n.id] = lut_lookup(model, tables, act_scale=scale).out
    return ExecResult({k: v for k, v in vals.items() if isinstance(v, np.ndarray)}, calls, builds)


def _precompute(a, mode):
    codes, scale = prepare_activations(a, mode)
    width = 16 if mode.value == "fp16" else 32
    return precompute_act_luts(codes, GROUP, width, float_tables(codes, width)), scale


def _mode_for(g: KernelGraph, pre: Node, models: dict):
    """Activation mode of the lookups reading this precompute; they must agree."""
    modes = {models[n.weight].scheme.activation_mode
             for n in g.nodes if n.op == LOOKUP and pre.id in n.inputs}
    if len(modes) > 1:
        raise GraphError(f"lookups sharing {pre.id} disagree on activation mode")
    if not modes:
        raise GraphError(f"precompute {pre.id} has no consumers")
    return modes.pop()


def qkv_graph(hidden: int = 256, scheme: str = "int4-b64") -> KernelGraph:
    """Attention projections: one activation feeding Q, K and V."""
    w = {name: {"M": hidden, "K": hidden, "scheme": scheme} for name in ("wq", "wk", "wv")}
    nodes = [Node("x", "input")] + [Node(p, FUSED, ["x"], f"w{p}") for p in "qkv"]
    return KernelGraph(nodes, ["q", "k", "v"], w)


def mlp_graph(hidden: int = 256, inter: int = 512, scheme: str = "int4-b64") -> KernelGraph:
    """Gated MLP front half: up and gate read the same activation."""
    w = {"w_up": {"M": inter, "K": hidden, "scheme": scheme},
         "w_gate": {"M": inter, "K": hidden, "scheme": scheme}}
    nodes = [Node("x", "input"), Node("up", FUSED, ["x"], "w_up"),
             Node("gate", FUSED, ["x"], "w_gate"), Node("h", "mul", ["up", "gate"])]
    return KernelGraph(nodes, ["h"], w)
