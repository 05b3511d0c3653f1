"""Computational-graph IR: tensor types, nodes, graphs, validation and the
``.cg.json`` on-disk format.

Graphs are immutable. Build them with :class:`GraphBuilder` or by
constructing the dataclasses directly; every transformation returns a new
graph.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Iterator, Mapping, Sequence

SCHEMA_VERSION = "cgfuzz.graph/1"
MAX_RANK = 8
MAX_EXTENT = 1 << 16


class DType(str, enum.Enum):
    F32 = "F32"
    F64 = "F64"
    I32 = "I32"
    I64 = "I64"
    Bool = "Bool"

    @property
    def is_float(self) -> bool:
        return self in (DType.F32, DType.F64)

    @property
    def is_int(self) -> bool:
        return self in (DType.I32, DType.I64)

    @property
    def bits(self) -> int:
        return _BITS[self]


_BITS = {DType.F32: 32, DType.F64: 64, DType.I32: 32, DType.I64: 64, DType.Bool: 1}


@dataclass(frozen=True)
class TensorType:
    dtype: DType
    shape: tuple[int, ...]

    def __post_init__(self) -> None:
        # normalise lists/enum strings passed in by callers
        if not isinstance(self.dtype, DType):
            object.__setattr__(self, "dtype", DType(self.dtype))
        if not isinstance(self.shape, tuple):
            object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)

    def with_shape(self, shape: Iterable[int]) -> TensorType:
        return TensorType(self.dtype, tuple(shape))

    def with_dtype(self, dtype: DType) -> TensorType:
        return TensorType(dtype, self.shape)

    def __str__(self) -> str:
        return f"{self.dtype.value}[{','.join(map(str, self.shape))}]"


def type_problems(t: TensorType) -> list[str]:
    problems = []
    if t.rank > MAX_RANK:
        problems.append(f"rank {t.rank} exceeds cap {MAX_RANK}")
    for d in t.shape:
        if d < 0:
            problems.append(f"negative extent {d}")
        elif d > MAX_EXTENT:
            problems.append(f"extent {d} exceeds cap {MAX_EXTENT}")
    return problems


@dataclass(frozen=True)
class Value:
    id: str
    type: TensorType


@dataclass(frozen=True)
class Constant:
    id: str
    type: TensorType
    data: tuple  # flat, row-major

    def is_splat(self) -> bool:
        return len(self.data) > 0 and all(x == self.data[0] for x in self.data)


def _freeze_attr(v: Any) -> Any:
    if isinstance(v, (list, tuple)):
        return tuple(_freeze_attr(x) for x in v)
    if isinstance(v, DType):
        return v.value
    return v


def _thaw_attr(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_thaw_attr(x) for x in v]
    return v


@dataclass(frozen=True)
class Node:
    id: str
    op: str
    inputs: tuple[str, ...]
    outputs: tuple[Value, ...]
    attrs: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self) -> None:
        if isinstance(self.attrs, Mapping):
            object.__setattr__(
                self, "attrs", tuple(sorted((k, _freeze_attr(v)) for k, v in self.attrs.items()))
            )
        if not isinstance(self.inputs, tuple):
            object.__setattr__(self, "inputs", tuple(self.inputs))
        if not isinstance(self.outputs, tuple):
            object.__setattr__(self, "outputs", tuple(self.outputs))

    @property
    def attr_map(self) -> dict[str, Any]:
        return dict(self.attrs)

    def attr(self, name: str, default: Any = None) -> Any:
        for k, v in self.attrs:
            if k == name:
                return v
        return default

    @property
    def block(self) -> str:
        return self.attr("block", "") or ""

    @property
    def output_ids(self) -> tuple[str, ...]:
        return tuple(v.id for v in self.outputs)

    def replace(self, **changes: Any) -> Node:
        fields = {
            "id": self.id,
            "op": self.op,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "attrs": self.attrs,
        }
        fields.update(changes)
        return Node(**fields)


@dataclass(frozen=True)
class Graph:
    inputs: tuple[Value, ...] = ()
    constants: tuple[Constant, ...] = ()
    nodes: tuple[Node, ...] = ()
    outputs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("inputs", "constants", "nodes", "outputs"):
            v = getattr(self, name)
            if not isinstance(v, tuple):
                object.__setattr__(self, name, tuple(v))

    @cached_property
    def value_types(self) -> dict[str, TensorType]:
        types: dict[str, TensorType] = {}
        for v in self.inputs:
            types.setdefault(v.id, v.type)
        for c in self.constants:
            types.setdefault(c.id, c.type)
        for n in self.nodes:
            for v in n.outputs:
                types.setdefault(v.id, v.type)
        return types

    @cached_property
    def constant_map(self) -> dict[str, Constant]:
        return {c.id: c for c in self.constants}

    @cached_property
    def producers(self) -> dict[str, Node]:
        return {v.id: n for n in self.nodes for v in n.outputs}

    @cached_property
    def consumers(self) -> dict[str, list[tuple[Node, int]]]:
        uses: dict[str, list[tuple[Node, int]]] = {}
        for n in self.nodes:
            for slot, vid in enumerate(n.inputs):
                uses.setdefault(vid, []).append((n, slot))
        return uses

    @cached_property
    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @property
    def input_ids(self) -> tuple[str, ...]:
        return tuple(v.id for v in self.inputs)

    def type_of(self, value_id: str) -> TensorType:
        return self.value_types[value_id]

    def all_ids(self) -> set[str]:
        ids = set(self.value_types)
        ids.update(n.id for n in self.nodes)
        return ids

    def replace(self, **changes: Any) -> Graph:
        fields = {
            "inputs": self.inputs,
            "constants": self.constants,
            "nodes": self.nodes,
            "outputs": self.outputs,
        }
        fields.update(changes)
        return Graph(**fields)


class CycleDetected(Exception):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


@dataclass
class ValidationResult:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate(graph: Graph) -> ValidationResult:
    """Check every structural and typing invariant of ``graph``.

    Violations are collected rather than raised; the result is truthy iff the
    graph is well formed.
    """
    from . import ops

    out: list[str] = []
    defined: dict[str, TensorType] = {}
    node_ids: set[str] = set()

    def define(vid: str, t: TensorType, what: str) -> None:
        if vid in defined:
            out.append(f"duplicate value id '{vid}'")
        defined[vid] = t
        for p in type_problems(t):
            out.append(f"{what} '{vid}': {p}")

    for v in graph.inputs:
        define(v.id, v.type, "input")
    for c in graph.constants:
        define(c.id, c.type, "constant")
        if len(c.data) != c.type.element_count:
            out.append(
                f"constant '{c.id}': payload length {len(c.data)} != element count {c.type.element_count}"
            )

    later = {v.id for n in graph.nodes for v in n.outputs}
    for n in graph.nodes:
        if n.id in node_ids:
            out.append(f"duplicate node id '{n.id}'")
        node_ids.add(n.id)
        in_types = []
        for vid in n.inputs:
            if vid in defined:
                in_types.append(defined[vid])
            elif vid in later:
                out.append(f"use before definition of '{vid}' at node '{n.id}'")
                in_types.append(None)
            else:
                out.append(f"undefined value '{vid}' at node '{n.id}'")
                in_types.append(None)
        if n.op not in ops.REGISTRY:
            out.append(f"unknown op '{n.op}' at node '{n.id}'")
        elif None not in in_types:
            try:
                inferred = ops.infer(n.op, in_types, n.attr_map)
            except ops.ConstraintViolation as e:
                out.append(f"constraint violation at node '{n.id}': {e}")
            else:
                if len(inferred) != len(n.outputs):
                    out.append(f"output arity mismatch at node '{n.id}'")
                else:
                    for v, t in zip(n.outputs, inferred):
                        if v.type != t:
                            out.append(
                                f"output type mismatch at node '{n.id}': '{v.id}' declared {v.type}, inferred {t}"
                            )
        for v in n.outputs:
            define(v.id, v.type, "node output")

    for vid in graph.outputs:
        if vid not in defined:
            out.append(f"declared output '{vid}' does not exist")
    return ValidationResult(out)


_NUM_RE = re.compile(r"(\d+)")


def id_sort_key(s: str) -> tuple:
    """Natural ordering so that ``n2`` sorts before ``n10``."""
    return tuple(int(p) if p.isdigit() else p for p in _NUM_RE.split(s))


def topo_order(graph: Graph) -> list[Node]:
    """Kahn's algorithm; ready nodes are released in natural id order."""
    producers = graph.producers
    indeg: dict[str, int] = {}
    succ: dict[str, list[str]] = {n.id: [] for n in graph.nodes}
    for n in graph.nodes:
        deps = {producers[v].id for v in n.inputs if v in producers}
        indeg[n.id] = len(deps)
        for d in deps:
            succ[d].append(n.id)
    ready = [(id_sort_key(nid), nid) for nid, k in indeg.items() if k == 0]
    heapq.heapify(ready)
    order = []
    nodes = graph.node_map
    while ready:
        _, nid = heapq.heappop(ready)
        order.append(nodes[nid])
        for s in succ[nid]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, (id_sort_key(s), s))
    if len(order) != len(graph.nodes):
        raise CycleDetected(f"cycle among {len(graph.nodes) - len(order)} nodes")
    return order


# ---------------------------------------------------------------------------
# serialization


def _type_json(t: TensorType) -> dict:
    return {"dtype": t.dtype.value, "shape": list(t.shape)}


def graph_to_dict(graph: Graph, meta: Mapping[str, Any] | None = None) -> dict:
    d: dict[str, Any] = {"schema": SCHEMA_VERSION}
    if meta:
        d["meta"] = dict(meta)
    d["inputs"] = [{"id": v.id, **_type_json(v.type)} for v in graph.inputs]
    d["constants"] = [
        {"id": c.id, **_type_json(c.type), "data": list(c.data)} for c in graph.constants
    ]
    d["nodes"] = [
        {
            "id": n.id,
            "op": n.op,
            "inputs": list(n.inputs),
            "attrs": {k: _thaw_attr(v) for k, v in n.attrs},
            "outputs": [{"id": v.id, **_type_json(v.type)} for v in n.outputs],
        }
        for n in graph.nodes
    ]
    d["outputs"] = list(graph.outputs)
    return d


def serialize(graph: Graph, meta: Mapping[str, Any] | None = None) -> str:
    return json.dumps(graph_to_dict(graph, meta), indent=1)


def graph_hash(graph: Graph) -> str:
    text = json.dumps(graph_to_dict(graph), separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _line_of(text: str, needle: str) -> int | None:
    idx = text.find(needle)
    return None if idx < 0 else text.count("\n", 0, idx) + 1


def _parse_type(entry: Mapping, where: str) -> TensorType:
    try:
        dtype = DType(entry["dtype"])
    except (KeyError, ValueError):
        raise ParseError(f"bad or missing dtype {entry.get('dtype')!r}", field=f"{where}.dtype")
    shape = entry.get("shape")
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise ParseError(f"bad shape {shape!r}", field=f"{where}.shape")
    return TensorType(dtype, tuple(shape))


def _convert_scalar(x: Any, dtype: DType) -> Any:
    if dtype is DType.Bool:
        return bool(x)
    if dtype.is_int:
        return int(x)
    return float(x)


def graph_from_dict(d: Mapping, text: str = "") -> Graph:
    if not isinstance(d, Mapping):
        raise ParseError("top-level value must be an object")
    schema = d.get("schema")
    if schema != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema {schema!r}", field="schema")
    seen: set[str] = set()
    node_ids: set[str] = set()

    def fresh(vid: Any, where: str) -> str:
        if not isinstance(vid, str) or not vid:
            raise ParseError(f"bad id {vid!r}", field=where)
        if vid in seen:
            raise ParseError(f"duplicate value id '{vid}'", _line_of(text, f'"{vid}"'), where)
        seen.add(vid)
        return vid

    inputs = []
    for i, e in enumerate(d.get("inputs", [])):
        inputs.append(Value(fresh(e.get("id"), f"inputs[{i}].id"), _parse_type(e, f"inputs[{i}]")))
    constants = []
    for i, e in enumerate(d.get("constants", [])):
        t = _parse_type(e, f"constants[{i}]")
        data = e.get("data")
        if not isinstance(data, list):
            raise ParseError("constant data must be a list", field=f"constants[{i}].data")
        if len(data) != t.element_count:
            raise ParseError(
                f"constant payload length {len(data)} != {t.element_count}", field=f"constants[{i}].data"
            )
        constants.append(
            Constant(fresh(e.get("id"), f"constants[{i}].id"), t, tuple(_convert_scalar(x, t.dtype) for x in data))
        )
    nodes = []
    for i, e in enumerate(d.get("nodes", [])):
        nid = e.get("id")
        if not isinstance(nid, str) or not nid:
            raise ParseError(f"bad node id {nid!r}", field=f"nodes[{i}].id")
        if nid in node_ids:
            raise ParseError(f"duplicate node id '{nid}'", _line_of(text, f'"{nid}"'), f"nodes[{i}].id")
        node_ids.add(nid)
        op = e.get("op")
        if not isinstance(op, str):
            raise ParseError(f"bad op {op!r}", field=f"nodes[{i}].op")
        ins = e.get("inputs", [])
        if not isinstance(ins, list) or not all(isinstance(x, str) for x in ins):
            raise ParseError("node inputs must be a list of ids", field=f"nodes[{i}].inputs")
        for x in ins:
            if x not in seen:
                raise ParseError(
                    f"reference to undefined value '{x}'", _line_of(text, f'"{x}"'), f"nodes[{i}].inputs"
                )
        attrs = e.get("attrs", {})
        if not isinstance(attrs, dict):
            raise ParseError("attrs must be an object", field=f"nodes[{i}].attrs")
        outs = [
            Value(fresh(o.get("id"), f"nodes[{i}].outputs[{j}].id"), _parse_type(o, f"nodes[{i}].outputs[{j}]"))
            for j, o in enumerate(e.get("outputs", []))
        ]
        nodes.append(Node(nid, op, tuple(ins), tuple(outs), attrs))
    outputs = d.get("outputs", [])
    if not isinstance(outputs, list):
        raise ParseError("outputs must be a list", field="outputs")
    for o in outputs:
        if o not in seen:
            raise ParseError(f"reference to undefined value '{o}'", _line_of(text, f'"{o}"'), "outputs")
    return Graph(tuple(inputs), tuple(constants), tuple(nodes), tuple(outputs))


def parse(text: str) -> Graph:
    return parse_with_meta(text)[0]


def parse_with_meta(text: str) -> tuple[Graph, dict]:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", e.lineno) from e
    g = graph_from_dict(d, text)
    return g, dict(d.get("meta", {}))


def load_graph(path) -> tuple[Graph, dict]:
    with open(path) as f:
        return parse_with_meta(f.read())


def save_graph(path, graph: Graph, meta: Mapping[str, Any] | None = None) -> None:
    with open(path, "w") as f:
        f.write(serialize(graph, meta))
        f.write("\n")


# ---------------------------------------------------------------------------
# construction helpers


class IdAllocator:
    """Hands out ids with a given prefix that do not collide with ``taken``."""

    def __init__(self, taken: Iterable[str] = ()):
        self.taken = set(taken)
        self._next: dict[str, int] = {}

    def __call__(self, prefix: str) -> str:
        i = self._next.get(prefix, 0)
        while f"{prefix}{i}" in self.taken:
            i += 1
        name = f"{prefix}{i}"
        self._next[prefix] = i + 1
        self.taken.add(name)
        return name


class GraphBuilder:
    """Mutable builder confined to one thread; ``build()`` returns an immutable graph.

    Output types are inferred through the op registry, so a builder can only
    produce well-typed nodes.
    """

    def __init__(self, taken: Iterable[str] = ()):
        self.inputs: list[Value] = []
        self.constants: list[Constant] = []
        self.nodes: list[Node] = []
        self.outputs: list[str] = []
        self.types: dict[str, TensorType] = {}
        self.ids = IdAllocator(taken)

    def input(self, dtype: DType | str, shape: Sequence[int], name: str | None = None) -> str:
        vid = name or self.ids("x")
        self.ids.taken.add(vid)
        t = TensorType(DType(dtype), tuple(shape))
        self.inputs.append(Value(vid, t))
        self.types[vid] = t
        return vid

    def const(self, dtype: DType | str, shape: Sequence[int], data: Sequence, name: str | None = None) -> str:
        vid = name or self.ids("c")
        self.ids.taken.add(vid)
        t = TensorType(DType(dtype), tuple(shape))
        if len(data) == 1 and t.element_count != 1:
            data = list(data) * t.element_count
        self.constants.append(Constant(vid, t, tuple(_convert_scalar(x, t.dtype) for x in data)))
        self.types[vid] = t
        return vid

    def op(self, op: str, *inputs: str, name: str | None = None, out: str | None = None, **attrs: Any) -> str:
        return self.op_multi(op, *inputs, name=name, outs=[out] if out else None, **attrs)[0]

    def op_multi(self, op: str, *inputs: str, name: str | None = None, outs=None, **attrs: Any) -> list[str]:
        from . import ops

        attrs = {k: v for k, v in attrs.items() if v is not None}
        out_types = ops.infer(op, [self.types[i] for i in inputs], attrs)
        nid = name or self.ids("n")
        self.ids.taken.add(nid)
        out_ids = outs or [self.ids("v") for _ in out_types]
        for o in out_ids:
            self.ids.taken.add(o)
        values = tuple(Value(o, t) for o, t in zip(out_ids, out_types))
        self.nodes.append(Node(nid, op, tuple(inputs), values, attrs))
        for v in values:
            self.types[v.id] = v.type
        return out_ids

    def output(self, *vids: str) -> None:
        self.outputs.extend(vids)

    def build(self) -> Graph:
        return Graph(tuple(self.inputs), tuple(self.constants), tuple(self.nodes), tuple(self.outputs))


def iter_values(graph: Graph) -> Iterator[tuple[str, TensorType]]:
    yield from graph.value_types.items()
