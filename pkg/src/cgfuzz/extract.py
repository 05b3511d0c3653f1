"""Pattern extraction: run the documented-test corpus under instrumentation,
collect (graph, pass) pairs and cut out the block or subgraph each pass
acts on.

A pattern is stored in its standalone-embedding form: a graph whose inputs
are the pattern's dangling inputs (with their concrete types) and whose
outputs are its dangling outputs.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import ops, passes
from .graph import (
    Constant,
    Graph,
    Node,
    ParseError,
    TensorType,
    Value,
    graph_from_dict,
    graph_to_dict,
    load_graph,
    topo_order,
    validate,
)

ADAPTIVE = "adaptive"
BLOCK_ONLY = "block"
SUBGRAPH_ONLY = "subgraph"
WHOLE_GRAPH = "whole-graph"
NOOPT = "noopt"
MODES = (ADAPTIVE, BLOCK_ONLY, SUBGRAPH_ONLY, WHOLE_GRAPH, NOOPT)

GRAPH = "Graph"
PATTERN_SCHEMA = "cgfuzz.pattern/1"


class CorpusError(Exception):
    def __init__(self, path, cause: str):
        super().__init__(f"{path}: {cause}")
        self.path = str(path)
        self.cause = cause


@dataclass(frozen=True)
class Pattern:
    target: str | None
    granularity: str
    graph: Graph
    provenance: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def nodes(self) -> tuple[Node, ...]:
        return self.graph.nodes

    @property
    def dangling_inputs(self) -> list[tuple[str, int, TensorType]]:
        """(node id, slot, concrete requirement) for every cut input edge."""
        out = []
        for v in self.graph.inputs:
            for n, slot in self.graph.consumers.get(v.id, []):
                out.append((n.id, slot, v.type))
        return out

    @property
    def dangling_outputs(self) -> list[tuple[str, TensorType]]:
        return [(o, self.graph.type_of(o)) for o in self.graph.outputs]

    def uses(self, value_id: str) -> list[tuple[Node, int]]:
        return self.graph.consumers.get(value_id, [])

    @property
    def adaptable_constants(self) -> frozenset[str]:
        """Splat constants feeding only same-shape elementwise ops; synthesis
        may re-create them at the type of their sibling operand."""
        ids = set()
        for c in self.graph.constants:
            uses = self.uses(c.id)
            if c.is_splat() and uses and all(n.op in ops.ELEMENTWISE_BINARY for n, _ in uses):
                ids.add(c.id)
        return frozenset(ids)

    @property
    def id(self) -> str:
        return canonical_hash(self)


@dataclass(frozen=True)
class AbstractPattern:
    source: Pattern
    requirements: tuple[ops.Abstract, ...]  # one per dangling input value, in input order

    @property
    def nodes(self) -> tuple[Node, ...]:
        return self.source.nodes

    @property
    def topology(self) -> list[tuple[str, tuple[str, ...], tuple]]:
        return _topology(self.source.graph)


def _relabel(g: Graph) -> tuple[dict[str, str], list[tuple]]:
    names: dict[str, str] = {}
    for i, v in enumerate(g.inputs):
        names[v.id] = f"in{i}"
    for i, c in enumerate(g.constants):
        names[c.id] = f"c{i}"
    rows = []
    for k, n in enumerate(topo_order(g)):
        for j, v in enumerate(n.outputs):
            names[v.id] = f"n{k}.{j}"
        rows.append((n.op, tuple(names[i] for i in n.inputs), n.attrs))
    return names, rows


def _topology(g: Graph) -> list[tuple]:
    """Op kinds, non-tensor attrs and edges under a canonical relabeling."""
    return _relabel(g)[1]


def canonical_hash(p: Pattern) -> str:
    g = p.graph
    names, rows = _relabel(g)
    body = {
        "target": p.target,
        "granularity": p.granularity,
        "inputs": [str(v.type) for v in g.inputs],
        "constants": [[str(c.type), list(c.data)] for c in g.constants],
        "nodes": [[op, list(ins), [[k, v] for k, v in attrs]] for op, ins, attrs in rows],
        "outputs": [names[o] for o in g.outputs],
    }
    text = json.dumps(body, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def abstract(p: Pattern) -> AbstractPattern:
    reqs = []
    for v in p.graph.inputs:
        req = ops.Abstract()
        for n, slot in p.uses(v.id):
            req = ops.merge_abstract(req, ops.input_requirements(n.op, len(n.inputs), n.attr_map)[slot])
        reqs.append(req)
    return AbstractPattern(p, tuple(reqs))


# ---------------------------------------------------------------------------
# corpus -> pairs


def load_corpus(directory) -> list[tuple[Path, Graph, list[str]]]:
    d = Path(directory)
    entries = []
    for path in sorted(d.glob("*.cg.json")):
        manifest = path.with_name(path.name[: -len(".cg.json")] + ".manifest.json")
        try:
            g, _ = load_graph(path)
        except (ParseError, OSError) as e:
            raise CorpusError(path, str(e)) from e
        result = validate(g)
        if not result.ok:
            raise CorpusError(path, f"invalid graph: {result.violations[0]}")
        names: list[str] = []
        if manifest.exists():
            try:
                with open(manifest) as f:
                    names = list(json.load(f).get("passes", []))
            except (OSError, ValueError) as e:
                raise CorpusError(manifest, str(e)) from e
        for n in names:
            if n not in passes.PASSES:
                raise CorpusError(manifest, f"unknown pass {n!r}")
        entries.append((path, g, names))
    return entries


@dataclass(frozen=True)
class SourcedPair:
    pair: passes.PassTracePair
    source: str
    index: int


def collect_pairs(directory) -> list[SourcedPair]:
    out: list[SourcedPair] = []
    for path, g, names in load_corpus(directory):
        traces = passes.with_instrumentation(None, lambda: passes.run_pipeline(names, g))
        for i, t in enumerate(traces):
            out.append(SourcedPair(t, path.name, i))
    return out


# ---------------------------------------------------------------------------
# pair -> patterns


class _UnionFind:
    def __init__(self, items: Iterable[str]):
        self.parent = {x: x for x in items}

    def find(self, x: str) -> str:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def groups(self, order: Sequence[str]) -> list[list[str]]:
        by_root: dict[str, list[str]] = {}
        for x in order:
            by_root.setdefault(self.find(x), []).append(x)
        return list(by_root.values())


def subgraph_groups(g: Graph) -> list[list[str]]:
    """Connected groups of nodes that share an input or output tensor."""
    order = [n.id for n in topo_order(g)]
    uf = _UnionFind(order)
    for vid, uses in g.consumers.items():
        ids = [n.id for n, _ in uses]
        p = g.producers.get(vid)
        if p is not None:
            ids.append(p.id)
        for other in ids[1:]:
            uf.union(ids[0], other)
    return uf.groups(order)


def block_groups(g: Graph) -> list[list[str]]:
    """Within each subgraph: nodes joined by intermediate tensors whose
    producer and consumer sit in the same block."""
    order = [n.id for n in topo_order(g)]
    uf = _UnionFind(order)
    for n in g.nodes:
        for i in n.inputs:
            p = g.producers.get(i)
            if p is not None and p.block == n.block:
                uf.union(p.id, n.id)
    return uf.groups(order)


def cut(g: Graph, node_ids: Sequence[str], target: str | None, granularity: str, provenance: dict) -> Pattern:
    members = set(node_ids)
    nodes = [n for n in topo_order(g) if n.id in members]
    produced = {v.id for n in nodes for v in n.outputs}
    consts = g.constant_map
    inputs: list[Value] = []
    constants: list[Constant] = []
    seen: set[str] = set()
    for n in nodes:
        for i in n.inputs:
            if i in produced or i in seen:
                continue
            seen.add(i)
            if i in consts:
                constants.append(consts[i])
            else:
                inputs.append(Value(i, g.type_of(i)))
    outputs = []
    graph_outs = set(g.outputs)
    for n in nodes:
        for v in n.outputs:
            external = any(c.id not in members for c, _ in g.consumers.get(v.id, []))
            if external or v.id in graph_outs:
                outputs.append(v.id)
    if not outputs:
        internal = {i for n in nodes for i in n.inputs}
        outputs = [v.id for n in nodes for v in n.outputs if v.id not in internal]
    pg = Graph(tuple(inputs), tuple(constants), tuple(nodes), tuple(outputs))
    return Pattern(target, granularity, pg, provenance)


def _granularity(pass_name: str, mode: str) -> str:
    if mode == BLOCK_ONLY:
        return passes.BLOCK
    if mode == SUBGRAPH_ONLY:
        return passes.SUBGRAPH
    if mode == WHOLE_GRAPH:
        return GRAPH
    return passes.descriptor(pass_name).granularity


def extract(pair: passes.PassTracePair, mode: str = ADAPTIVE, source: str = "", index: int = 0) -> list[Pattern]:
    """Candidate patterns of a pair, before the trigger filter."""
    g = pair.graph
    if not g.nodes:
        return []
    gran = _granularity(pair.pass_name, mode)
    if gran == GRAPH:
        groups = [[n.id for n in topo_order(g)]]
    elif gran == passes.BLOCK:
        groups = block_groups(g)
    else:
        groups = subgraph_groups(g)
    return [
        cut(g, grp, pair.pass_name, gran, {"source": source, "pair": index, "group": k})
        for k, grp in enumerate(groups)
    ]


def triggers(p: Pattern) -> bool:
    """Standalone-embedding trigger property."""
    if p.target is None:
        return False
    r = passes.run_pass(p.target, p.graph)
    return r.fired and r.crash is None


def build_pool(pairs: Sequence[SourcedPair], mode: str = ADAPTIVE) -> list[Pattern]:
    pool: list[Pattern] = []
    seen: set[str] = set()
    for sp in pairs:
        for p in extract(sp.pair, mode, sp.source, sp.index):
            if mode != WHOLE_GRAPH and not triggers(p):
                continue
            key = p.id
            if key in seen:
                continue
            seen.add(key)
            pool.append(p)
    return pool


def noopt_pool(directory, count: int, seed: int = 0) -> list[Pattern]:
    """Subgraph patterns cut from graphs that trigger no pass, sampled down
    to ``count``."""
    cands: list[Pattern] = []
    seen: set[str] = set()
    for path, g, _ in load_corpus(directory):
        for k, grp in enumerate(subgraph_groups(g)):
            p = cut(g, grp, None, passes.SUBGRAPH, {"source": path.name, "pair": 0, "group": k})
            if p.id not in seen:
                seen.add(p.id)
                cands.append(p)
    if len(cands) <= count:
        return cands
    picks = sorted(random.Random(seed).sample(range(len(cands)), count))
    return [cands[i] for i in picks]


def extract_corpus(root, mode: str = ADAPTIVE, seed: int = 0) -> list[Pattern]:
    root = Path(root)
    adaptive = build_pool(collect_pairs(root / "corpus" / "opt"), ADAPTIVE if mode == NOOPT else mode)
    if mode == NOOPT:
        return noopt_pool(root / "corpus" / "noopt", len(adaptive), seed)
    return adaptive


# ---------------------------------------------------------------------------
# persistence


def pattern_to_dict(p: Pattern) -> dict:
    return {
        "schema": PATTERN_SCHEMA,
        "id": p.id,
        "target": p.target,
        "granularity": p.granularity,
        "provenance": p.provenance,
        "graph": graph_to_dict(p.graph),
    }


def pattern_from_dict(d: dict) -> Pattern:
    if d.get("schema") != PATTERN_SCHEMA:
        raise ParseError(f"unsupported pattern schema {d.get('schema')!r}", field="schema")
    p = Pattern(d["target"], d["granularity"], graph_from_dict(d["graph"]), dict(d.get("provenance", {})))
    if p.id != d.get("id"):
        raise ParseError(f"pattern id mismatch: stored {d.get('id')}, computed {p.id}", field="id")
    return p


def save_pool(directory, pool: Sequence[Pattern], mode: str) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    per_pass: dict[str, int] = {}
    for p in pool:
        with open(d / f"{p.id}.json", "w") as f:
            json.dump(pattern_to_dict(p), f, indent=1)
            f.write("\n")
        key = p.target or "(none)"
        per_pass[key] = per_pass.get(key, 0) + 1
    index = {"mode": mode, "count": len(pool), "per_pass": per_pass, "patterns": [p.id for p in pool]}
    with open(d / "index.json", "w") as f:
        json.dump(index, f, indent=1)
        f.write("\n")
    return index


def load_pool(directory) -> list[Pattern]:
    d = Path(directory)
    index_path = d / "index.json"
    if not index_path.exists():
        raise CorpusError(d, "pattern pool has no index.json")
    with open(index_path) as f:
        index = json.load(f)
    pool = []
    for pid in index["patterns"]:
        path = d / f"{pid}.json"
        try:
            with open(path) as f:
                pool.append(pattern_from_dict(json.load(f)))
        except (OSError, ValueError, KeyError) as e:
            raise CorpusError(path, str(e)) from e
    return pool
