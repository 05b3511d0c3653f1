import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgfuzz import passes
from cgfuzz.extract import cut
from cgfuzz.graph import DType, GraphBuilder, IdAllocator, TensorType, graph_hash, topo_order, validate
from cgfuzz.synth import (
    SIZE_CAP,
    BridgeImpossible,
    SeedPool,
    SynthesisConfig,
    SynthesisPlan,
    bridge,
    bridge_steps,
    context_pools,
    direct_insert,
    high_order_admit,
    synthesize,
)

from isomorphism import from_graph, isomorphic


def T(dtype, *shape):
    return TensorType(DType(dtype), tuple(shape))


def run_bridge(src, dst):
    nodes, terminal = bridge("s", src, dst, IdAllocator({"s"}))
    return nodes, terminal


def test_bridge_pad_reshape_cast():
    nodes, terminal = run_bridge(T("F32", 2, 32), T("I32", 4, 4, 5))
    assert [n.op for n in nodes] == ["Reshape", "Pad", "Reshape", "Cast"]
    assert nodes[1].attr("amounts") == ((0, 16),)
    assert bridge_steps(nodes) == 3
    assert nodes[-1].outputs[0].id == terminal
    assert nodes[-1].outputs[0].type == T("I32", 4, 4, 5)


def test_bridge_identity():
    nodes, terminal = run_bridge(T("F32", 4, 4, 5), T("F32", 4, 4, 5))
    assert nodes == [] and terminal == "s"


def test_bridge_reshape_only():
    nodes, _ = run_bridge(T("F32", 10), T("F32", 2, 5))
    assert [n.op for n in nodes] == ["Reshape"]


def test_bridge_crop_tail():
    nodes, _ = run_bridge(T("F64", 12), T("F64", 5))
    assert [n.op for n in nodes] == ["Crop"]
    assert nodes[0].attr("begin") == (0,) and nodes[0].attr("end") == (5,)


def test_bridge_impossible_on_empty():
    with pytest.raises(BridgeImpossible):
        run_bridge(T("F32", 0, 3), T("F32", 2))
    with pytest.raises(BridgeImpossible):
        run_bridge(T("F32", 2), T("F32", 0))


shapes = st.lists(st.integers(1, 5), min_size=0, max_size=4)
dtypes = st.sampled_from(list(DType))


@settings(max_examples=200, deadline=None)
@given(dtypes, shapes, dtypes, shapes)
def test_bridge_algebra(d1, s1, d2, s2):
    src, dst = TensorType(d1, tuple(s1)), TensorType(d2, tuple(s2))
    nodes, terminal = run_bridge(src, dst)
    cur = src
    for n in nodes:
        out = n.outputs[0].type
        if n.op in ("Pad", "Crop"):
            assert out.element_count == dst.element_count
        elif n.op == "Reshape":
            assert out.element_count == cur.element_count
        elif n.op == "Cast":
            assert out.shape == cur.shape
        cur = out
    assert cur == dst
    assert bridge_steps(nodes) <= 3


def conv_softmax_seed():
    b = GraphBuilder()
    x = b.input("F32", [1, 1, 6, 6], name="x")
    conv = b.op("Conv2D", x, b.const("F32", [2, 1, 3, 3], [0.1]), out="conv_output")
    ba = b.op("BiasAdd", conv, b.const("F32", [2], [0.2]), out="bias_add_output")
    b.output(b.op("Softmax", ba, axis=1, out="softmax_output"))
    return b.build()


def conv_add_pattern():
    b = GraphBuilder()
    x = b.input("F32", [1, 2, 4, 4])
    c = b.op("Conv2D", x, b.const("F32", [2, 2, 1, 1], [0.5]), block="df")
    b.output(b.op("Add", c, b.const("F32", [1, 2, 4, 4], [0.0]), block="df", out="add_output"))
    g = b.build()
    return cut(g, [n.id for n in g.nodes], "AlgebraicSimplification", passes.BLOCK, {})


def pattern_subgraph(outcome, pattern):
    ids = set(outcome.pattern_nodes.values())
    g = outcome.graph
    keep = [n for n in g.nodes if n.id in ids]
    return cut(g, [n.id for n in keep], None, passes.BLOCK, {}).graph


def test_splice_between_bias_add_and_softmax():
    seed, pat = conv_softmax_seed(), conv_add_pattern()
    bound = set()
    for r in range(20):
        o = synthesize(SynthesisPlan("s", pat.id, 2, r), pat, seed)
        assert o.ok and validate(o.graph).ok
        assert o.reused == 1 and o.bridged == 0
        conv = o.graph.node_map[o.pattern_nodes[pat.nodes[0].id]]
        bound.add(conv.inputs[0])
        softmax = next(n for n in o.graph.nodes if n.op == "Softmax")
        add = o.graph.node_map[o.pattern_nodes[pat.nodes[1].id]]
        assert softmax.inputs[0] == add.outputs[0].id
        assert isomorphic(from_graph(pattern_subgraph(o, pat)), from_graph(pat.graph))
    assert bound <= {"conv_output", "bias_add_output"}
    assert "bias_add_output" in bound


def test_zero_dangling_inputs_at_point_zero():
    b = GraphBuilder()
    b.output(b.op("ReLU", b.op("Sub", b.const("I64", [7], [3]), b.const("I64", [7], [1]), block="df"), block="df"))
    g = b.build()
    pat = cut(g, [n.id for n in g.nodes], "ConstantFolding", passes.BLOCK, {})
    assert pat.dangling_inputs == []
    seed = conv_softmax_seed()
    o = synthesize(SynthesisPlan("s", pat.id, 0, 1), pat, seed)
    assert o.ok and validate(o.graph).ok
    assert o.appended == 1
    assert set(seed.outputs) < set(o.graph.outputs)


def test_bridge_fallback_when_nothing_fits():
    b = GraphBuilder()
    x = b.input("Bool", [3], name="x")
    b.output(b.op("Cast", x, to="I32"))
    seed = b.build()
    o = synthesize(SynthesisPlan("s", "p", 1, 3), conv_add_pattern(), seed)
    assert o.ok and validate(o.graph).ok
    assert o.bridged == 1 and o.reused == 0 and o.bridge_nodes >= 1


def test_strategy_priority_reuses_when_possible(pool, seeds):
    rng = random.Random(5)
    for _ in range(200):
        sid = rng.choice(sorted(seeds))
        p = rng.choice(pool)
        seed = seeds[sid]
        plan = SynthesisPlan(sid, p.id, rng.randint(0, len(seed.nodes)), rng.getrandbits(32))
        o = synthesize(plan, p, seed)
        if not o.ok:
            continue
        pre = context_pools(seed, plan.point).preceding
        exact = {seed.type_of(v) for v in pre}
        if all(t in exact for _, _, t in p.dangling_inputs):
            assert o.bridged == 0


def test_synthesis_deterministic(pool, seeds):
    p = pool[0]
    plan = SynthesisPlan("seed-0003", p.id, 2, 99)
    a = synthesize(plan, p, seeds["seed-0003"])
    b = synthesize(plan, p, seeds["seed-0003"])
    assert graph_hash(a.graph) == graph_hash(b.graph)


def test_context_pools_partition():
    seed = conv_softmax_seed()
    order = topo_order(seed)
    for point in range(len(order) + 1):
        pools = context_pools(seed, point)
        after = {v.id for n in order[point:] for v in n.outputs}
        assert set(pools.preceding) | after == set(seed.value_types)
        assert not set(pools.preceding) & after
    with pytest.raises(ValueError):
        context_pools(seed, len(order) + 1)


def test_high_order_admit():
    pool = SeedPool({"s": conv_softmax_seed()})
    ok, sid = high_order_admit(conv_softmax_seed(), True, pool)
    assert ok and sid == "adm-00000" and sid in pool and len(pool) == 2
    assert high_order_admit(conv_softmax_seed(), False, pool)[0] is False
    assert high_order_admit(conv_softmax_seed(), True, pool, node_cap=2) == (False, SIZE_CAP)


def test_size_cap_discards():
    o = synthesize(SynthesisPlan("s", "p", 1, 0), conv_add_pattern(), conv_softmax_seed(), SynthesisConfig(node_cap=3))
    assert not o.ok and o.discarded == SIZE_CAP


def test_direct_insert_mostly_invalid(pool, seeds):
    rng = random.Random(1)
    ok = 0
    for _ in range(200):
        sid = rng.choice(sorted(seeds))
        p = rng.choice(pool)
        plan = SynthesisPlan(sid, p.id, rng.randint(0, len(seeds[sid].nodes)), rng.getrandbits(32))
        ok += direct_insert(plan, p, seeds[sid], SynthesisConfig()).ok
    assert ok < 40


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 199), st.integers(0, 10**6), st.data())
def test_valid_and_pattern_preserved(pool, seeds, i, r, data):
    sid = f"seed-{i:04d}"
    seed = seeds[sid]
    p = data.draw(st.sampled_from(pool))
    plan = SynthesisPlan(sid, p.id, data.draw(st.integers(0, len(seed.nodes))), r)
    o = synthesize(plan, p, seed)
    if not o.ok:
        return
    g = o.graph
    assert validate(g).ok
    assert len(o.pattern_nodes) == len(p.nodes)
    for n in p.nodes:
        spliced = g.node_map[o.pattern_nodes[n.id]]
        for slot, x in enumerate(n.inputs):
            src = p.graph.producers.get(x)
            if src is not None:
                port = src.output_ids.index(x)
                assert spliced.inputs[slot] == g.node_map[o.pattern_nodes[src.id]].outputs[port].id
    topo = [(n.op, tuple((k, v) for k, v in n.attrs)) for n in p.nodes]
    got = [(g.node_map[o.pattern_nodes[n.id]].op, g.node_map[o.pattern_nodes[n.id]].attrs) for n in p.nodes]
    assert topo == got
    outs = {v.id for nid in o.pattern_nodes.values() for v in g.node_map[nid].outputs}
    consumed = {i for n in g.nodes if n.id not in o.pattern_nodes.values() for i in n.inputs}
    assert outs & (consumed | set(g.outputs))
