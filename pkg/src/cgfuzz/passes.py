"""The toy optimizing compiler under test.

Seven graph-to-graph passes, a pass manager with an instrumentation hook,
and a catalog of injectable defects ("mutants") selected per campaign via
:class:`CompileOptions`. Block-level passes only match nodes that share a
``block`` attribute (the empty string is the default block); mutants whose
defect depends on context only fire inside a named block.
"""

from __future__ import annotations

import contextvars
import json
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ops
from .graph import Constant, DType, Graph, IdAllocator, Node, Value, topo_order, validate
from .interp import constant_array

BLOCK = "Block"
SUBGRAPH = "Subgraph"
FOLD_LIMIT = 4096


@dataclass(frozen=True)
class PassDescriptor:
    name: str
    granularity: str
    description: str
    matches: str


@dataclass(frozen=True)
class PassTracePair:
    graph: Graph
    pass_name: str


@dataclass(frozen=True)
class Crash:
    pass_name: str
    message: str


@dataclass(frozen=True)
class Skipped:
    pass_name: str
    reason: str


@dataclass(frozen=True)
class PassResult:
    graph: Graph
    fired: bool
    crash: Crash | None = None
    skipped: Skipped | None = None


@dataclass(frozen=True)
class PipelineResult:
    graph: Graph
    fired: tuple[str, ...]
    crash: Crash | None = None
    crash_index: int | None = None
    skipped: tuple[Skipped, ...] = ()


@dataclass(frozen=True)
class MutantId:
    name: str
    pass_name: str
    index: int
    category: str
    symptom: str
    description: str


class UnknownMutant(KeyError):
    pass


class UnknownPass(KeyError):
    pass


class SkipPass(Exception):
    """Raised by a pass for inputs it does not handle; never a bug."""


class InternalError(Exception):
    """Internal compiler assertion failure."""


@dataclass(frozen=True)
class CompileOptions:
    mutant: str | None = None

    def __post_init__(self) -> None:
        if self.mutant is not None and self.mutant not in MUTANTS:
            raise UnknownMutant(self.mutant)


def activate(mutant: str | None) -> CompileOptions:
    return CompileOptions(mutant)


# ---------------------------------------------------------------------------
# instrumentation

_HOOKS: contextvars.ContextVar[tuple[Callable[[PassTracePair], None], ...]] = contextvars.ContextVar(
    "pass_hooks", default=()
)


def with_instrumentation(hook: Callable[[PassTracePair], None] | None, thunk: Callable[[], object]) -> list[PassTracePair]:
    """Run ``thunk``; every pass invocation inside it is recorded (and passed
    to ``hook`` if given) before the pass transforms the graph."""
    traces: list[PassTracePair] = []

    def record(pair: PassTracePair) -> None:
        traces.append(pair)
        if hook is not None:
            hook(pair)

    token = _HOOKS.set(_HOOKS.get() + (record,))
    try:
        thunk()
    finally:
        _HOOKS.reset(token)
    return traces


# ---------------------------------------------------------------------------
# rewrite helper


class _Edit:
    """Accumulates rewrites against one graph and builds the result."""

    def __init__(self, g: Graph):
        self.g = g
        self.subst: dict[str, str] = {}
        self.removed: set[str] = set()
        self.replaced: dict[str, list[Node]] = {}
        self.new_constants: list[Constant] = []
        self.ids = IdAllocator(g.all_ids())

    def alias(self, old: str, new: str) -> None:
        self.subst[old] = new

    def resolve(self, vid: str) -> str:
        seen = set()
        while vid in self.subst and vid not in seen:
            seen.add(vid)
            vid = self.subst[vid]
        return vid

    def remove(self, node_id: str) -> None:
        self.removed.add(node_id)

    def replace(self, node_id: str, nodes: list[Node]) -> None:
        self.replaced[node_id] = nodes

    @property
    def changed(self) -> bool:
        return bool(self.subst or self.removed or self.replaced or self.new_constants)

    def build(self, outputs: Sequence[str] | None = None) -> Graph:
        nodes = []
        for n in self.g.nodes:
            if n.id in self.replaced:
                group = self.replaced[n.id]
            elif n.id in self.removed:
                continue
            else:
                group = [n]
            for m in group:
                ins = tuple(self.resolve(i) for i in m.inputs)
                nodes.append(m if ins == m.inputs else m.replace(inputs=ins))
        outs = tuple(self.resolve(o) for o in (self.g.outputs if outputs is None else outputs))
        return self.g.replace(
            constants=self.g.constants + tuple(self.new_constants), nodes=tuple(nodes), outputs=outs
        )


def _single_user(g: Graph, vid: str) -> Node | None:
    uses = g.consumers.get(vid, [])
    if len(uses) != 1 or vid in g.outputs:
        return None
    return uses[0][0]


def _unused(g: Graph, vid: str, ignoring: Iterable[str] = ()) -> bool:
    skip = set(ignoring)
    return vid not in g.outputs and all(n.id in skip for n, _ in g.consumers.get(vid, []))


def _is_splat_const(g: Graph, vid: str, value: float) -> bool:
    c = g.constant_map.get(vid)
    return c is not None and c.is_splat() and c.data[0] == value


# ---------------------------------------------------------------------------
# passes


@dataclass
class _Ctx:
    options: CompileOptions

    def mutant(self, name: str) -> bool:
        return self.options.mutant == name


def constant_folding(g: Graph, ctx: _Ctx) -> Graph:
    edit = _Edit(g)
    known = {c.id: constant_array(c) for c in g.constants}
    for n in topo_order(g):
        if not n.inputs or not all(i in known for i in n.inputs):
            continue
        if any(v.type.element_count > FOLD_LIMIT for v in n.outputs):
            raise SkipPass(f"unsupported: folding tensors larger than {FOLD_LIMIT} elements")
        out_types = [v.type for v in n.outputs]
        with np.errstate(all="ignore"):
            results = ops.evaluate(n.op, [known[i] for i in n.inputs], n.attr_map, out_types)
        for v, arr in zip(n.outputs, results):
            if ctx.mutant("fold-via-i32") and v.type.dtype.is_float:
                arr = ops.cast_array(ops.cast_array(arr, DType.I32), v.type.dtype)
            known[v.id] = arr
            edit.new_constants.append(Constant(v.id, v.type, tuple(arr.reshape(-1).tolist())))
        edit.remove(n.id)
    return edit.build() if edit.changed else g


def algebraic_simplification(g: Graph, ctx: _Ctx) -> Graph:
    edit = _Edit(g)
    for n in g.nodes:
        passthrough = None
        if n.op == "Mul":
            a, b = n.inputs
            if _is_splat_const(g, b, 1):
                passthrough = a
            elif _is_splat_const(g, a, 1):
                passthrough = b
        elif n.op == "Add":
            a, b = n.inputs
            if _is_splat_const(g, b, 0):
                passthrough = a
            elif _is_splat_const(g, a, 0):
                passthrough = b
        elif n.op == "Sub":
            a, b = n.inputs
            if _is_splat_const(g, b, 0):
                passthrough = a
        elif n.op == "ReLU":
            inner = g.producers.get(n.inputs[0])
            if inner is not None and inner.op == "ReLU" and inner.block == n.block:
                if ctx.mutant("algsimp-double-relu-rank") and n.block and n.outputs[0].type.rank >= 3:
                    passthrough = inner.inputs[0]
                else:
                    passthrough = inner.outputs[0].id
        if passthrough is None:
            continue
        if n.op != "ReLU" and ctx.mutant("algsimp-int-identity") and n.block and n.outputs[0].type.dtype.is_int:
            raise InternalError(f"identity rewrite expected a float tensor at '{n.id}'")
        edit.alias(n.outputs[0].id, passthrough)
        edit.remove(n.id)
    return edit.build() if edit.changed else g


def elementwise_fusion(g: Graph, ctx: _Ctx) -> Graph:
    edit = _Edit(g)
    for n in g.nodes:
        if n.op != "Add" or n.id in edit.removed:
            continue
        user = _single_user(g, n.outputs[0].id)
        if user is None or user.op != "ReLU" or user.block != n.block:
            continue
        if ctx.mutant("fusion-null-deref") and n.block:
            # looks through the first operand to decide on layout
            producer = g.producers.get(n.inputs[0])
            _ = producer.op  # AttributeError when the operand has no producer
        if ctx.mutant("fusion-rank4-layout") and n.block and n.outputs[0].type.rank == 4:
            raise InternalError("fused kernel layout for rank-4 operands is not NCHW-compatible")
        attrs = {"block": n.block} if n.block else {}
        fused = Node(edit.ids("fused"), "FusedAddReLU", n.inputs, user.outputs, attrs)
        edit.remove(n.id)
        edit.replace(user.id, [fused])
    return edit.build() if edit.changed else g


def reorder_permute_dims_after_concat(g: Graph, ctx: _Ctx) -> Graph:
    edit = _Edit(g)
    for n in g.nodes:
        if n.op != "Concat" or len(n.inputs) < 2:
            continue
        perms = [g.producers.get(i) for i in n.inputs]
        if any(p is None or p.op != "PermuteDims" or p.block != n.block or p.id in edit.removed for p in perms):
            continue
        axes = tuple(perms[0].attr("axes"))
        if any(tuple(p.attr("axes")) != axes for p in perms):
            continue
        sources = [p.inputs[0] for p in perms]
        if ctx.mutant("reorder-shared-operand") and n.block and len(set(sources)) < len(sources):
            raise InternalError(f"operand '{sources[0]}' bound twice in concat rewrite")
        rank = len(axes)
        axis = n.attr("axis") % rank
        new_axis = axis if ctx.mutant("reorder-wrong-axis") else axes[axis]
        attrs = {"block": n.block} if n.block else {}
        concat_type = ops.infer("Concat", [g.type_of(s) for s in sources], {"axis": new_axis})[0]
        mid = Value(edit.ids("v"), concat_type)
        out_type = ops.infer("PermuteDims", [concat_type], {"axes": axes})[0]
        concat = Node(edit.ids("n"), "Concat", tuple(sources), (mid,), {"axis": new_axis, **attrs})
        permute = Node(
            edit.ids("n"), "PermuteDims", (mid.id,), (Value(n.outputs[0].id, out_type),), {"axes": axes, **attrs}
        )
        edit.replace(n.id, [concat, permute])
        for p in set(perms):
            if _unused(g, p.outputs[0].id, ignoring=[n.id]):
                edit.remove(p.id)
    return edit.build() if edit.changed else g


LOSSLESS = {
    DType.Bool: {DType.I32, DType.I64, DType.F32, DType.F64},
    DType.I32: {DType.I64, DType.F64},
    DType.F32: {DType.F64},
    DType.I64: set(),
    DType.F64: set(),
}


def _lossless(src: DType, mid: DType, ctx: _Ctx, block: str) -> bool:
    if ctx.mutant("castelim-bitwidth-lossless") and block:
        return mid.bits >= src.bits
    return mid in LOSSLESS[src]


def redundant_cast_elimination(g: Graph, ctx: _Ctx) -> Graph:
    edit = _Edit(g)
    for n in g.nodes:
        if n.op != "Cast" or n.id in edit.removed:
            continue
        src = n.inputs[0]
        to = DType(n.attr("to"))
        if g.type_of(src).dtype is to:
            edit.alias(n.outputs[0].id, src)
            edit.remove(n.id)
            continue
        inner = g.producers.get(src)
        if (
            inner is None
            or inner.op != "Cast"
            or inner.block != n.block
            or inner.id in edit.removed
            or inner.id in edit.replaced
        ):
            continue
        origin = inner.inputs[0]
        if not _lossless(g.type_of(origin).dtype, DType(inner.attr("to")), ctx, n.block):
            continue
        if g.type_of(origin).dtype is to:
            edit.alias(n.outputs[0].id, origin)
            edit.remove(n.id)
        else:
            edit.replace(n.id, [n.replace(inputs=(origin,))])
        if _unused(g, src, ignoring=[n.id]):
            edit.remove(inner.id)
    return edit.build() if edit.changed else g


def dead_code_elimination(g: Graph, ctx: _Ctx) -> Graph:
    if ctx.mutant("dce-drops-live-output"):
        # treats outputs that also feed a node as kept alive by that node
        roots = [o for o in g.outputs if o not in g.consumers]
    else:
        roots = list(g.outputs)
    live: set[str] = set()
    stack = list(roots)
    while stack:
        vid = stack.pop()
        if vid in live:
            continue
        live.add(vid)
        p = g.producers.get(vid)
        if p is not None:
            stack.extend(p.inputs)
    edit = _Edit(g)
    for n in g.nodes:
        if not any(v.id in live for v in n.outputs):
            edit.remove(n.id)
    if not edit.changed:
        used = {i for n in g.nodes for i in n.inputs} | set(g.outputs)
        if all(c.id in used for c in g.constants):
            return g
        return g.replace(constants=tuple(c for c in g.constants if c.id in used))
    kept_nodes = [n for n in g.nodes if n.id not in edit.removed]
    defined = set(g.input_ids) | {c.id for c in g.constants} | {v.id for n in kept_nodes for v in n.outputs}
    outputs = [o for o in g.outputs if o in defined]
    used = {i for n in kept_nodes for i in n.inputs} | set(outputs)
    out = edit.build(outputs)
    return out.replace(constants=tuple(c for c in out.constants if c.id in used))


def common_subexpression_elimination(g: Graph, ctx: _Ctx) -> Graph:
    edit = _Edit(g)
    seen: dict[tuple, Node] = {}
    for n in g.nodes:
        ins = tuple(edit.resolve(i) for i in n.inputs)
        if ops.get(n.op).commutative:
            key_ins = tuple(sorted(ins))
            if ctx.mutant("cse-fused-operand") and n.op == "FusedAddReLU" and n.block:
                key_ins = ins[:1]
        else:
            key_ins = ins
        attrs = tuple((k, v) for k, v in n.attrs if k != "block")
        key = (n.op, key_ins, attrs)
        first = seen.get(key)
        if first is None:
            seen[key] = n
            continue
        for old, new in zip(n.outputs, first.outputs):
            edit.alias(old.id, new.id)
        edit.remove(n.id)
    return edit.build() if edit.changed else g


PASSES: dict[str, tuple[PassDescriptor, Callable[[Graph, _Ctx], Graph]]] = {}


def _register(name: str, granularity: str, description: str, matches: str, fn) -> None:
    PASSES[name] = (PassDescriptor(name, granularity, description, matches), fn)


_register(
    "ConstantFolding",
    BLOCK,
    "Evaluates nodes whose inputs are all constants and replaces them with constants.",
    "op(const, ..., const)",
    constant_folding,
)
_register(
    "AlgebraicSimplification",
    BLOCK,
    "Removes arithmetic identities and collapses repeated ReLU.",
    "Mul(x, 1) | Add(x, 0) | Sub(x, 0) | ReLU(ReLU(x))",
    algebraic_simplification,
)
_register(
    "RedundantCastElimination",
    BLOCK,
    "Drops identity casts and collapses cast chains whose inner cast is lossless.",
    "Cast(x, dtype(x)) | Cast(Cast(x, T1), T2)",
    redundant_cast_elimination,
)
_register(
    "ReorderPermuteDimsAfterConcat",
    BLOCK,
    "Concatenates the sources of identically permuted operands and permutes once.",
    "Concat(PermuteDims(A, p), PermuteDims(B, p))",
    reorder_permute_dims_after_concat,
)
_register(
    "ElementwiseFusion",
    BLOCK,
    "Fuses an Add whose only user is a ReLU into FusedAddReLU.",
    "ReLU(Add(a, b))",
    elementwise_fusion,
)
_register(
    "CommonSubexpressionElimination",
    SUBGRAPH,
    "Merges nodes with identical op, inputs and attributes.",
    "op(x...) twice",
    common_subexpression_elimination,
)
_register(
    "DeadCodeElimination",
    SUBGRAPH,
    "Removes nodes that do not contribute to any graph output.",
    "node with no live output",
    dead_code_elimination,
)

PIPELINE = tuple(PASSES)


def descriptor(name: str) -> PassDescriptor:
    try:
        return PASSES[name][0]
    except KeyError:
        raise UnknownPass(name) from None


def canonical_order(names: Iterable[str]) -> list[str]:
    wanted = set(names)
    return [p for p in PIPELINE if p in wanted]


def run_pass(name: str, graph: Graph, options: CompileOptions | None = None) -> PassResult:
    if name not in PASSES:
        raise UnknownPass(name)
    options = options or CompileOptions()
    for hook in _HOOKS.get():
        hook(PassTracePair(graph, name))
    fn = PASSES[name][1]
    try:
        out = fn(graph, _Ctx(options))
    except SkipPass as e:
        return PassResult(graph, False, skipped=Skipped(name, str(e)))
    except Exception as e:  # noqa: BLE001 - any pass failure is a crash finding
        return PassResult(graph, False, crash=Crash(name, f"{name}: {type(e).__name__}: {e}"))
    if out is graph:
        return PassResult(graph, False)
    result = validate(out)
    if not result.ok:
        return PassResult(graph, False, crash=Crash(name, f"{name}: post-pass validation: {result.violations[0]}"))
    return PassResult(out, out.nodes != graph.nodes)


def run_pipeline(names: Sequence[str], graph: Graph, options: CompileOptions | None = None) -> PipelineResult:
    fired = []
    skipped = []
    g = graph
    for k, name in enumerate(names):
        r = run_pass(name, g, options)
        if r.crash is not None:
            return PipelineResult(g, tuple(fired), r.crash, k, tuple(skipped))
        if r.skipped is not None:
            skipped.append(r.skipped)
        if r.fired:
            fired.append(name)
        g = r.graph
    return PipelineResult(g, tuple(fired), skipped=tuple(skipped))


# ---------------------------------------------------------------------------
# mutant catalog

ICL = "Incorrect Code Logic"
TSP = "Tensor Shape Problem"
TP = "Type Problem"
IEH = "Incorrect Exception Handling"

_CATALOG = [
    ("fold-via-i32", "ConstantFolding", TP, "Inconsistency", "folded float results round-trip through I32"),
    ("algsimp-int-identity", "AlgebraicSimplification", IEH, "Crash",
     "identity rewrite on an integer tensor raises an internal assertion"),
    ("algsimp-double-relu-rank", "AlgebraicSimplification", ICL, "Inconsistency",
     "ReLU(ReLU(x)) rewritten to x for rank >= 3"),
    ("fusion-null-deref", "ElementwiseFusion", IEH, "Crash",
     "dereferences the producer of the first Add operand without a null check"),
    ("fusion-rank4-layout", "ElementwiseFusion", TSP, "Crash", "rejects rank-4 operands with an internal error"),
    ("reorder-wrong-axis", "ReorderPermuteDimsAfterConcat", TSP, "Inconsistency",
     "keeps the original concat axis instead of remapping it through the permutation"),
    ("reorder-shared-operand", "ReorderPermuteDimsAfterConcat", ICL, "Crash",
     "asserts that concat operands have distinct sources"),
    ("castelim-bitwidth-lossless", "RedundantCastElimination", TP, "Inconsistency",
     "treats an inner cast as lossless whenever it is at least as wide, ignoring float/int kind"),
    ("dce-drops-live-output", "DeadCodeElimination", ICL, "Inconsistency",
     "does not root liveness at graph outputs that also feed other nodes"),
    ("cse-fused-operand", "CommonSubexpressionElimination", ICL, "Inconsistency",
     "keys FusedAddReLU on its first operand only"),
]

MUTANTS: dict[str, MutantId] = {
    name: MutantId(name, pass_name, i, cat, symptom, desc)
    for i, (name, pass_name, cat, symptom, desc) in enumerate(_CATALOG)
}


def list_mutants() -> list[MutantId]:
    return list(MUTANTS.values())


def export_mutants(path) -> None:
    data = [m.__dict__ for m in list_mutants()]
    with open(path, "w") as f:
        json.dump(data, f, indent=1)
        f.write("\n")
