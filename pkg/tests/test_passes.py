from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgfuzz import passes
from cgfuzz.corpus import gen_seed, opt_corpus, seed_rng
from cgfuzz.graph import GraphBuilder, graph_hash, parse, serialize, validate
from cgfuzz import harness
from cgfuzz.harness import chebyshev
from cgfuzz.interp import execute, gen_inputs
from cgfuzz.passes import CompileOptions, run_pass, run_pipeline

GOLDEN = Path(__file__).parent / "golden" / "pipeline"


def max_diff(g, h, seeds=range(3)):
    worst = 0.0
    for s in seeds:
        inputs = gen_inputs(g, s)
        a, b = execute(g, inputs), execute(h, inputs)
        assert [x.type for x in a] == [x.type for x in b]
        worst = max([worst] + [chebyshev(x.data, y.data) for x, y in zip(a, b)])
    return worst


def test_granularity_catalog():
    block = {n for n in passes.PIPELINE if passes.descriptor(n).granularity == passes.BLOCK}
    assert block == {
        "ConstantFolding",
        "AlgebraicSimplification",
        "ElementwiseFusion",
        "ReorderPermuteDimsAfterConcat",
        "RedundantCastElimination",
    }
    assert {n for n in passes.PIPELINE if n not in block} == {
        "DeadCodeElimination",
        "CommonSubexpressionElimination",
    }


def test_dce_removes_unreachable():
    b = GraphBuilder()
    x = b.input("F32", [3])
    y = b.op("ReLU", x)
    b.op("Sigmoid", x)
    b.output(y)
    g = b.build()
    r = run_pass("DeadCodeElimination", g)
    assert r.fired and len(r.graph.nodes) == 1 and r.graph.outputs == g.outputs


def test_mul_one_rewritten():
    b = GraphBuilder()
    x = b.input("F32", [2, 2], name="x")
    b.output(b.op("Sigmoid", b.op("Mul", x, b.const("F32", [2, 2], [1.0]))))
    r = run_pass("AlgebraicSimplification", b.build())
    assert r.fired
    assert [n.op for n in r.graph.nodes] == ["Sigmoid"]
    assert r.graph.nodes[0].inputs == ("x",)


def concat_permute_graph(block="", shapes=((2, 3, 4), (2, 3, 5)), axis=0):
    b = GraphBuilder()
    a = b.input("F32", shapes[0], name="a")
    c = b.input("F32", shapes[1], name="c")
    kw = {"block": block} if block else {}
    pa = b.op("PermuteDims", a, axes=[2, 1, 0], **kw)
    pc = b.op("PermuteDims", c, axes=[2, 1, 0], **kw)
    b.output(b.op("Concat", pa, pc, axis=axis, **kw))
    return b.build()


def test_reorder_equivalent():
    g = concat_permute_graph()
    r = run_pass("ReorderPermuteDimsAfterConcat", g)
    assert r.fired
    assert [n.op for n in r.graph.nodes] == ["Concat", "PermuteDims"]
    assert r.graph.nodes[0].attr("axis") == 2
    assert max_diff(g, r.graph) == 0.0


def test_empty_pipeline():
    g = concat_permute_graph()
    r = run_pipeline([], g)
    assert r.graph is g and r.fired == ()


def test_fold_then_dce_leaves_constant():
    b = GraphBuilder()
    c1, c2 = b.const("F32", [3], [1.0, 2.0, 3.0]), b.const("F32", [3], [0.5])
    b.output(b.op("Sigmoid", b.op("Sub", c1, c2)))
    g = b.build()
    r = run_pipeline(["ConstantFolding", "DeadCodeElimination"], g)
    assert r.graph.nodes == ()
    assert len(r.graph.constants) == 1 and r.graph.outputs == (r.graph.constants[0].id,)
    assert max_diff(g, r.graph) < 1e-6


def test_instrumentation_counts_and_order():
    g = concat_permute_graph()
    names = ["ConstantFolding", "ReorderPermuteDimsAfterConcat", "DeadCodeElimination"]
    traces = passes.with_instrumentation(None, lambda: run_pipeline(names, g))
    assert [t.pass_name for t in traces] == names
    assert traces[0].graph is g


def test_instrumentation_nested():
    g = concat_permute_graph()
    outer_seen = []

    def thunk():
        run_pass("ConstantFolding", g)
        inner = passes.with_instrumentation(None, lambda: run_pass("DeadCodeElimination", g))
        assert [t.pass_name for t in inner] == ["DeadCodeElimination"]
        run_pass("CommonSubexpressionElimination", g)

    traces = passes.with_instrumentation(outer_seen.append, thunk)
    assert [t.pass_name for t in traces] == [
        "ConstantFolding",
        "DeadCodeElimination",
        "CommonSubexpressionElimination",
    ]
    assert outer_seen == traces


def test_snapshot_unaffected_by_pass():
    g = concat_permute_graph()
    before = graph_hash(g)
    traces = passes.with_instrumentation(None, lambda: run_pass("ReorderPermuteDimsAfterConcat", g))
    assert graph_hash(traces[0].graph) == before


def test_skip_is_not_a_crash():
    b = GraphBuilder()
    big = b.const("F32", [5000], [0.25])
    b.output(b.op("ReLU", big))
    r = run_pass("ConstantFolding", b.build())
    assert r.crash is None and r.skipped is not None and r.skipped.reason.startswith("unsupported")


def test_unknown_pass_and_mutant():
    with pytest.raises(passes.UnknownPass):
        run_pass("Nope", concat_permute_graph())
    with pytest.raises(passes.UnknownMutant):
        passes.activate("nope")


def test_mutant_catalog():
    ms = passes.list_mutants()
    assert len(ms) >= 10
    assert {m.symptom for m in ms} == {"Crash", "Inconsistency"}
    assert {m.pass_name for m in ms} == set(passes.PIPELINE)
    assert len({m.name for m in ms}) == len(ms)


def test_dce_drops_live_output_witness():
    b = GraphBuilder()
    x, y = b.input("F32", [4]), b.input("F32", [4])
    a = b.op("Add", x, y)
    b.op("Sigmoid", a)
    b.output(a)
    g = b.build()
    assert harness.test_one(g, [["DeadCodeElimination"]]).kind == "clean"
    v = harness.test_one(g, [["DeadCodeElimination"]], options=CompileOptions("dce-drops-live-output"))
    assert v.kind == "inconsistency" and v.distance > 1e-3


def test_reorder_wrong_axis_witness():
    g = concat_permute_graph("df", shapes=((2, 3, 2), (2, 3, 2)))
    assert harness.test_one(g, [["ReorderPermuteDimsAfterConcat"]]).kind == "clean"
    v = harness.test_one(g, [["ReorderPermuteDimsAfterConcat"]], options=CompileOptions("reorder-wrong-axis"))
    assert v.kind == "inconsistency" and v.distance > 1e-3


def test_fusion_null_deref_witness():
    b = GraphBuilder()
    x, y = b.input("F32", [4]), b.input("F32", [4])
    b.output(b.op("ReLU", b.op("Add", x, y, block="df"), block="df"))
    g = b.build()
    opts = CompileOptions("fusion-null-deref")
    v1 = harness.test_one(g, [["ElementwiseFusion"]], options=opts)
    v2 = harness.test_one(g, [["ElementwiseFusion"]], options=opts)
    assert v1.kind == "crash" and v1.message == v2.message
    assert "0x" not in v1.message


@pytest.mark.parametrize("entry", opt_corpus(), ids=lambda e: e.name)
def test_documented_test_fires_and_is_sound(entry):
    assert validate(entry.graph).ok
    for p in entry.passes:
        r = run_pass(p, entry.graph)
        assert r.crash is None
        assert r.fired, p
        assert max_diff(entry.graph, r.graph) <= 1e-3
    full = run_pipeline(passes.PIPELINE, entry.graph)
    assert full.crash is None
    assert max_diff(entry.graph, full.graph) <= 1e-3


def test_documented_tests_per_pass():
    counts = {}
    for e in opt_corpus():
        for p in e.passes:
            counts[p] = counts.get(p, 0) + 1
    assert set(counts) == set(passes.PIPELINE)
    assert min(counts.values()) >= 5


@pytest.mark.parametrize("entry", opt_corpus(), ids=lambda e: e.name)
def test_pipeline_golden_and_idempotent(entry):
    once = run_pipeline(passes.PIPELINE, entry.graph).graph
    twice = run_pipeline(passes.PIPELINE, once).graph
    assert serialize(twice) == serialize(once)
    golden = GOLDEN / f"{entry.name}.cg.json"
    assert serialize(once) == serialize(parse(golden.read_text()))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from(passes.PIPELINE))
def test_pass_purity_and_soundness(i, name):
    g = gen_seed(seed_rng(11, i))
    before = serialize(g)
    r = run_pass(name, g)
    assert serialize(g) == before
    assert r.crash is None
    assert validate(r.graph).ok
    assert max_diff(g, r.graph) <= 1e-3
