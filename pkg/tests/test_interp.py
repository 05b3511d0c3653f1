import numpy as np
import pytest

from cgfuzz.graph import GraphBuilder
from cgfuzz.interp import MissingInput, execute, gen_inputs


def unary(op, values, dtype="F32"):
    b = GraphBuilder()
    x = b.input(dtype, [len(values)], name="x")
    b.output(b.op(op, x))
    return b.build(), {"x": np.array(values, dtype=np.float32)}


def test_add_zero_identity():
    b = GraphBuilder()
    x = b.input("F32", [3], name="x")
    b.output(b.op("Add", x, b.const("F32", [3], [0.0])))
    out = execute(b.build(), {"x": np.array([1, 2, 3], dtype=np.float32)})
    assert out[0].data.tolist() == [1.0, 2.0, 3.0]


def test_relu_definition():
    g, inputs = unary("ReLU", [-1, 0, 2])
    assert execute(g, inputs)[0].data.tolist() == [0, 0, 2]


def test_fused_add_relu_equals_relu_add():
    # independent oracle: elementwise max(0, a + b) in plain Python, rounded to F32
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 20))
        b = GraphBuilder()
        x, y = b.input("F32", [n], name="x"), b.input("F32", [n], name="y")
        b.output(b.op("FusedAddReLU", x, y), b.op("ReLU", b.op("Add", x, y)))
        a1, a2 = rng.uniform(-1, 1, n).astype(np.float32), rng.uniform(-1, 1, n).astype(np.float32)
        fused, ref = execute(b.build(), {"x": a1, "y": a2})
        oracle = [float(np.float32(max(0.0, float(p) + float(q)))) for p, q in zip(a1, a2)]
        assert fused.data.tolist() == oracle
        assert np.array_equal(fused.data, ref.data)


def test_missing_input():
    g, _ = unary("ReLU", [1.0])
    with pytest.raises(MissingInput):
        execute(g, {})


def test_output_types_match_declared():
    b = GraphBuilder()
    x = b.input("I32", [2, 3], name="x")
    b.output(b.op("Cast", x, to="F64"))
    g = b.build()
    out = execute(g, gen_inputs(g, 0))[0]
    assert out.type == g.type_of(g.outputs[0])
    assert out.data.dtype == np.float64 and out.data.shape == (2, 3)


def test_gen_inputs_deterministic_and_ranged():
    b = GraphBuilder()
    b.input("F32", [50], name="f")
    b.input("I64", [50], name="i")
    b.input("F32", [], name="s")
    g = b.build()
    a, c = gen_inputs(g, 3), gen_inputs(g, 3)
    for k in a:
        assert a[k].tobytes() == c[k].tobytes()
    assert not np.array_equal(gen_inputs(g, 4)["f"], a["f"])
    assert a["f"].min() >= -1 and a["f"].max() <= 1
    assert a["i"].min() >= -4 and a["i"].max() <= 4
    assert a["s"].shape == () and -1 <= float(a["s"]) <= 1


def test_nan_is_a_value_not_an_error():
    b = GraphBuilder()
    x = b.input("F32", [1], name="x")
    b.output(b.op("Mul", x, b.const("F32", [1], [float("inf")])))
    out = execute(b.build(), {"x": np.zeros(1, dtype=np.float32)})
    assert np.isnan(out[0].data[0])
