"""Pattern-into-context synthesis.

A pattern is spliced into a seed graph at a synthesis point. Each dangling
input is bound to a compatible value from the preceding context (exact type
first, then the same dtype with another shape, then anything satisfying the
op's intrinsic requirement); if nothing fits, a bridge chain of
Pad/Crop -> Reshape -> Cast converts some preceding value into the concrete
type. Each dangling output is wired into a compatible input slot of a
succeeding node, or appended to the graph outputs.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import ops
from .extract import AbstractPattern, Pattern, abstract
from .graph import (
    Constant,
    DType,
    Graph,
    IdAllocator,
    Node,
    TensorType,
    Value,
    topo_order,
    validate,
)

NO_BRIDGE_SOURCE = "no-bridge-source"
INFERENCE_CONFLICT = "inference-conflict"
SIZE_CAP = "size-cap"

REPAIR = "repair"
DIRECT_INSERT = "direct-insert"


class BridgeImpossible(Exception):
    pass


class _Conflict(Exception):
    pass


class _NoSource(Exception):
    pass


@dataclass(frozen=True)
class SynthesisPlan:
    seed_id: str
    pattern_id: str
    point: int
    rng_seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed_id, "pattern": self.pattern_id, "point": self.point, "rng_seed": self.rng_seed}

    @staticmethod
    def from_dict(d: Mapping) -> SynthesisPlan:
        return SynthesisPlan(d["seed"], d["pattern"], int(d["point"]), int(d["rng_seed"]))


@dataclass(frozen=True)
class SynthesisConfig:
    node_cap: int = 200
    bridge_cap: int = 3
    strategy: str = REPAIR


@dataclass
class SynthesisOutcome:
    graph: Graph | None
    discarded: str | None = None
    detail: str = ""
    reused: int = 0
    bridged: int = 0
    bridge_nodes: int = 0
    rewired: int = 0
    appended: int = 0
    fallback: bool = False
    pattern_nodes: dict[str, str] = field(default_factory=dict)  # pattern node id -> node id in result

    @property
    def ok(self) -> bool:
        return self.graph is not None


@dataclass(frozen=True)
class ContextPools:
    preceding: tuple[str, ...]
    succeeding: tuple[tuple[str, int], ...]  # (node id, input slot)


def context_pools(seed: Graph, point: int) -> ContextPools:
    order = topo_order(seed)
    if not 0 <= point <= len(order):
        raise ValueError(f"synthesis point {point} outside [0, {len(order)}]")
    pre = list(seed.input_ids) + [c.id for c in seed.constants]
    for n in order[:point]:
        pre.extend(v.id for v in n.outputs)
    succ = [(n.id, s) for n in order[point:] for s in range(len(n.inputs))]
    return ContextPools(tuple(pre), tuple(succ))


# ---------------------------------------------------------------------------
# bridge


def bridge(
    source: str, source_type: TensorType, target: TensorType, ids: IdAllocator
) -> tuple[list[Node], str]:
    """Nodes converting ``source`` into a value of exactly ``target``; the
    second element is the terminal value id."""
    n_src, n_dst = source_type.element_count, target.element_count
    if (n_src == 0) != (n_dst == 0):
        raise BridgeImpossible(f"cannot bridge {source_type} to {target}")
    nodes: list[Node] = []
    cur, cur_t = source, source_type

    def emit(op: str, **attrs) -> None:
        nonlocal cur, cur_t
        out_t = ops.infer(op, [cur_t], attrs)[0]
        v = Value(ids("bv"), out_t)
        nodes.append(Node(ids("bn"), op, (cur,), (v,), attrs))
        cur, cur_t = v.id, out_t

    if n_src != n_dst:
        if cur_t.rank != 1:
            emit("Reshape", target=[n_src])
        if n_src < n_dst:
            emit("Pad", amounts=[[0, n_dst - n_src]])
        else:
            emit("Crop", begin=[0], end=[n_dst])
    if cur_t.shape != target.shape:
        emit("Reshape", target=list(target.shape))
    if cur_t.dtype is not target.dtype:
        emit("Cast", to=target.dtype.value)
    return nodes, cur


def bridge_steps(nodes: Sequence[Node]) -> int:
    """Distinct conversion steps in a chain; the flattening Reshape in front
    of a Pad/Crop belongs to that step."""
    steps = 0
    for i, n in enumerate(nodes):
        if n.op == "Reshape" and i + 1 < len(nodes) and nodes[i + 1].op in ("Pad", "Crop"):
            continue
        steps += 1
    return steps


# ---------------------------------------------------------------------------
# splice


def _splat_value(c: Constant, dtype: DType):
    x = c.data[0]
    if dtype is DType.Bool:
        return bool(x)
    if dtype.is_int:
        return int(x)
    return float(x)


class _Splicer:
    def __init__(self, seed: Graph, ap: AbstractPattern, point: int, rng: random.Random, cfg: SynthesisConfig):
        self.seed = seed
        self.ap = ap
        self.p = ap.source
        self.rng = rng
        self.cfg = cfg
        self.order = topo_order(seed)
        self.pools = context_pools(seed, point)
        self.point = point
        self.req = dict(zip(self.p.graph.input_ids, ap.requirements))
        self.adaptable = self.p.adaptable_constants

    def run(self, concrete_only: bool) -> SynthesisOutcome:
        p, rng = self.p, self.rng
        ids = IdAllocator(self.seed.all_ids())
        types = dict(self.seed.value_types)
        bind: dict[str, str] = {}
        rename: dict[str, str] = {}
        new_consts: list[Constant] = []
        adapted: dict[tuple[str, TensorType], str] = {}
        new_nodes: list[Node] = []
        out = SynthesisOutcome(None, fallback=concrete_only)
        dangling = set(p.graph.input_ids)
        pconsts = p.graph.constant_map

        for c in p.graph.constants:
            cid = ids("pc")
            rename[c.id] = cid
            new_consts.append(Constant(cid, c.type, c.data))
            types[cid] = c.type

        def known_type(vid: str) -> TensorType | None:
            if vid in dangling:
                return types[bind[vid]] if vid in bind else None
            if vid in self.adaptable:
                return None
            return types[rename[vid]]

        def feasible(n: Node, slot: int, t: TensorType) -> bool:
            in_types = []
            for s, vid in enumerate(n.inputs):
                kt = t if s == slot else known_type(vid)
                if kt is None:
                    # unknown sibling: only intrinsic rules apply to this slot
                    req = ops.input_requirements(n.op, len(n.inputs), n.attr_map)[slot]
                    return ops.check_compatible(t, req)
                in_types.append(kt)
            try:
                ops.infer(n.op, in_types, n.attr_map)
                return True
            except ops.ConstraintViolation:
                return False

        def choose(vid: str, n: Node, slot: int) -> str:
            concrete = p.graph.type_of(vid)
            req = self.req[vid]
            pre = self.pools.preceding
            tiers = [[v for v in pre if types[v] == concrete]]
            if not concrete_only:
                tiers.append([v for v in pre if types[v].dtype is concrete.dtype and ops.check_compatible(types[v], req)])
                tiers.append([v for v in pre if ops.check_compatible(types[v], req)])
            for tier in tiers:
                cands = [v for v in tier if feasible(n, slot, types[v])]
                if cands:
                    out.reused += 1
                    return rng.choice(cands)
            targets = [concrete]
            for s, other in enumerate(n.inputs):
                kt = known_type(other) if s != slot else None
                if kt is not None and kt not in targets:
                    targets.append(kt)
            target = next((t for t in targets if feasible(n, slot, t)), None)
            if target is None:
                raise _Conflict(f"no bridge target for '{vid}' at node '{n.id}'")
            sources = [v for v in pre if (types[v].element_count == 0) == (target.element_count == 0)]
            if not sources:
                raise _NoSource(f"no preceding value can be bridged to {target}")
            src = rng.choice(sources)
            chain, term = bridge(src, types[src], target, ids)
            if bridge_steps(chain) > self.cfg.bridge_cap:
                raise _Conflict("bridge chain over cap")
            for b in chain:
                types[b.outputs[0].id] = b.outputs[0].type
            new_nodes.extend(chain)
            out.bridged += 1
            out.bridge_nodes += len(chain)
            return term

        for n in topo_order(p.graph):
            for slot, vid in enumerate(n.inputs):
                if vid in dangling and vid not in bind:
                    bind[vid] = choose(vid, n, slot)
            in_ids = []
            for s, vid in enumerate(n.inputs):
                if vid in dangling:
                    in_ids.append(bind[vid])
                elif vid in self.adaptable:
                    sib = [known_type(o) for k, o in enumerate(n.inputs) if k != s]
                    sib_t = next((t for t in sib if t is not None), None)
                    c = pconsts[vid]
                    if sib_t is None or sib_t == c.type:
                        in_ids.append(rename[vid])
                    else:
                        key = (vid, sib_t)
                        if key not in adapted:
                            cid = ids("pc")
                            adapted[key] = cid
                            value = _splat_value(c, sib_t.dtype)
                            new_consts.append(Constant(cid, sib_t, (value,) * sib_t.element_count))
                            types[cid] = sib_t
                        in_ids.append(adapted[key])
                else:
                    in_ids.append(rename[vid])
            try:
                out_types = ops.infer(n.op, [types[i] for i in in_ids], n.attr_map)
            except ops.ConstraintViolation as e:
                raise _Conflict(f"pattern node '{n.id}': {e}") from e
            outs = []
            for v, t in zip(n.outputs, out_types):
                nv = ids("pv")
                rename[v.id] = nv
                types[nv] = t
                outs.append(Value(nv, t))
            nid = ids("pn")
            out.pattern_nodes[n.id] = nid
            new_nodes.append(Node(nid, n.op, tuple(in_ids), tuple(outs), n.attrs))

        # wire dangling outputs into the succeeding context
        slot_of: dict[tuple[str, int], str] = {}
        appended: list[str] = []
        free = list(self.pools.succeeding)
        node_map = self.seed.node_map
        for o in p.graph.outputs:
            vid = rename[o]
            t = types[vid]
            cands = [(nid, s) for nid, s in free if types[node_map[nid].inputs[s]] == t]
            if cands:
                site = rng.choice(cands)
                free.remove(site)
                slot_of[site] = vid
                out.rewired += 1
            else:
                appended.append(vid)
                out.appended += 1

        after = []
        for n in self.order[self.point:]:
            ins = tuple(slot_of.get((n.id, s), v) for s, v in enumerate(n.inputs))
            after.append(n if ins == n.inputs else n.replace(inputs=ins))
        nodes = tuple(self.order[: self.point]) + tuple(new_nodes) + tuple(after)
        out.graph = Graph(
            self.seed.inputs,
            self.seed.constants + tuple(new_consts),
            nodes,
            self.seed.outputs + tuple(o for o in appended if o not in self.seed.outputs),
        )
        return out


def _finish(out: SynthesisOutcome, cfg: SynthesisConfig) -> SynthesisOutcome:
    g = out.graph
    assert g is not None
    if len(g.nodes) > cfg.node_cap:
        return SynthesisOutcome(None, SIZE_CAP, f"{len(g.nodes)} nodes > cap {cfg.node_cap}")
    result = validate(g)
    if not result.ok:
        return SynthesisOutcome(None, INFERENCE_CONFLICT, result.violations[0])
    return out


def synthesize(
    plan: SynthesisPlan,
    pattern: Pattern,
    seed: Graph,
    cfg: SynthesisConfig = SynthesisConfig(),
    abstract_pattern: AbstractPattern | None = None,
) -> SynthesisOutcome:
    if cfg.strategy == DIRECT_INSERT:
        return direct_insert(plan, pattern, seed, cfg)
    rng = random.Random(plan.rng_seed)
    sp = _Splicer(seed, abstract_pattern or abstract(pattern), plan.point, rng, cfg)
    for concrete_only in (False, True):
        try:
            return _finish(sp.run(concrete_only), cfg)
        except _Conflict as e:
            detail = str(e)
            continue
        except (_NoSource, BridgeImpossible) as e:
            return SynthesisOutcome(None, NO_BRIDGE_SOURCE, str(e))
    return SynthesisOutcome(None, INFERENCE_CONFLICT, detail)


def direct_insert(plan: SynthesisPlan, pattern: Pattern, seed: Graph, cfg: SynthesisConfig) -> SynthesisOutcome:
    """Baseline without either repair strategy: dangling edges are bound to
    random context values and pattern types are kept as extracted."""
    rng = random.Random(plan.rng_seed)
    pools = context_pools(seed, plan.point)
    order = topo_order(seed)
    ids = IdAllocator(seed.all_ids())
    p = pattern.graph
    rename = {v: rng.choice(pools.preceding) for v in p.input_ids}
    consts = []
    for c in p.constants:
        rename[c.id] = ids("pc")
        consts.append(Constant(rename[c.id], c.type, c.data))
    new_nodes = []
    for n in topo_order(p):
        outs = []
        for v in n.outputs:
            rename[v.id] = ids("pv")
            outs.append(Value(rename[v.id], v.type))
        new_nodes.append(Node(ids("pn"), n.op, tuple(rename[i] for i in n.inputs), tuple(outs), n.attrs))
    slot_of = {}
    appended = []
    free = list(pools.succeeding)
    for o in p.outputs:
        if free:
            site = free.pop(rng.randrange(len(free)))
            slot_of[site] = rename[o]
        else:
            appended.append(rename[o])
    after = []
    for n in order[plan.point:]:
        ins = tuple(slot_of.get((n.id, s), v) for s, v in enumerate(n.inputs))
        after.append(n if ins == n.inputs else n.replace(inputs=ins))
    g = Graph(
        seed.inputs,
        seed.constants + tuple(consts),
        tuple(order[: plan.point]) + tuple(new_nodes) + tuple(after),
        seed.outputs + tuple(appended),
    )
    return _finish(SynthesisOutcome(g, rewired=len(slot_of), appended=len(appended)), cfg)


# ---------------------------------------------------------------------------
# seed pool


class SeedPool:
    """Ordered seed graphs; admissions are appended by a single writer."""

    def __init__(self, seeds: Mapping[str, Graph] | None = None):
        self.graphs: dict[str, Graph] = dict(seeds or {})
        self.ids: list[str] = list(self.graphs)
        self.admitted: list[str] = []

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, seed_id: str) -> Graph:
        return self.graphs[seed_id]

    def __contains__(self, seed_id: str) -> bool:
        return seed_id in self.graphs

    def add(self, seed_id: str, g: Graph) -> None:
        self.graphs[seed_id] = g
        self.ids.append(seed_id)


def high_order_admit(
    graph: Graph, clean: bool, pool: SeedPool, node_cap: int = 200
) -> tuple[bool, str | None]:
    """Admit a bug-free graph under the size cap as a new seed."""
    if not clean:
        return False, "buggy"
    if len(graph.nodes) > node_cap:
        return False, SIZE_CAP
    seed_id = f"adm-{len(pool.admitted):05d}"
    pool.add(seed_id, graph)
    pool.admitted.append(seed_id)
    return True, seed_id


def provenance(plan: SynthesisPlan, strategy: str = REPAIR) -> dict:
    return {**plan.to_dict(), "strategy": strategy}

