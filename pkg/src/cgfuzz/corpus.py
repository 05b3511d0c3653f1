"""Built-in corpora: documented optimization tests (one small graph per test,
tagged with the passes it exercises), a corpus of graphs that trigger no
pass, and a random seed-graph generator.

Block-level tests route every input through a "pre" block (flat F64 input,
Reshape, Cast) so that the whole test graph pins concrete shapes and dtypes;
only the pattern itself lives in the "df" block.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import passes
from .graph import DType, Graph, GraphBuilder, save_graph, validate

PRE = "pre"
DF = "df"


@dataclass(frozen=True)
class CorpusEntry:
    name: str
    graph: Graph
    passes: tuple[str, ...]


def _pinned(b: GraphBuilder, dtype: str, shape: list[int]) -> str:
    n = math.prod(shape)
    x = b.input(DType.F64, [n])
    h = b.op("Reshape", x, target=shape, block=PRE)
    if dtype != "F64":
        h = b.op("Cast", h, to=dtype, block=PRE)
    return h


def _consts(rng: random.Random, n: int) -> list[float]:
    # non-integral values so that any truncation is visible
    return [round(rng.uniform(-2, 2), 3) + 0.125 for _ in range(n)]


# ---------------------------------------------------------------------------
# documented tests, one builder per test


def _cf_tests(rng: random.Random) -> list[tuple[str, Graph]]:
    out = []

    b = GraphBuilder()
    h = _pinned(b, "F32", [2, 3])
    c1 = b.const("F32", [2, 3], _consts(rng, 6))
    c2 = b.const("F32", [2, 3], _consts(rng, 6))
    k = b.op("Add", c1, c2, block=DF)
    b.output(b.op("Mul", h, k, block=DF))
    out.append(("fold_add_then_mul", b.build()))

    b = GraphBuilder()
    h = _pinned(b, "F64", [4])
    c1 = b.const("F64", [4], _consts(rng, 4))
    c2 = b.const("F64", [4], _consts(rng, 4))
    k = b.op("Mul", c1, c2, block=DF)
    b.output(b.op("Sub", h, k, block=DF))
    out.append(("fold_mul_then_sub", b.build()))

    b = GraphBuilder()
    h = _pinned(b, "F32", [3, 2])
    c1 = b.const("F32", [3, 2], _consts(rng, 6))
    k = b.op("Sigmoid", c1, block=DF)
    b.output(b.op("Add", h, k, block=DF))
    out.append(("fold_sigmoid", b.build()))

    b = GraphBuilder()
    h = _pinned(b, "F32", [5])
    c1 = b.const("F32", [5], _consts(rng, 5))
    c2 = b.const("F32", [5], _consts(rng, 5))
    k = b.op("ReLU", b.op("Sub", c1, c2, block=DF), block=DF)
    b.output(b.op("Add", h, k, block=DF))
    out.append(("fold_chain", b.build()))

    b = GraphBuilder()
    h = _pinned(b, "F32", [2, 4])
    c1 = b.const("F32", [2, 4], _consts(rng, 8))
    k = b.op("Softmax", c1, axis=1, block=DF)
    b.output(b.op("Mul", h, k, block=DF))
    out.append(("fold_softmax", b.build()))

    b = GraphBuilder()
    h = _pinned(b, "F64", [3, 3])
    c1 = b.const("F64", [1, 3], _consts(rng, 3))
    c2 = b.const("F64", [2, 3], _consts(rng, 6))
    k = b.op("Concat", c1, c2, axis=0, block=DF)
    b.output(b.op("Add", h, k, block=DF))
    out.append(("fold_concat", b.build()))

    b = GraphBuilder()
    h = _pinned(b, "F32", [2, 2])
    c1 = b.const("F32", [2, 3], _consts(rng, 6))
    c2 = b.const("F32", [3, 2], _consts(rng, 6))
    k = b.op("MatMul", c1, c2, block=DF)
    b.output(b.op("Sub", h, k, block=DF))
    out.append(("fold_matmul", b.build()))
    return out


def _algsimp_tests(rng: random.Random) -> list[tuple[str, Graph]]:
    out = []

    b = GraphBuilder()
    h = _pinned(b, "F32", [2, 3])
    one = b.const("F32", [2, 3], [1.0])
    b.output(b.op("Sigmoid", b.op("Mul", h, one, block=DF), block=DF))
    out.append(("mul_by_one", b.build()))

    b = GraphBuilder()
    h = _pinned(b, "F64", [3])
    zero = b.const("F64", [3], [0.0])
    b.output(b.op("Sigmoid", b.op("Add", zero, h, block=DF), block=DF))
    out.append(("add_zero_left", b.build()))

    b = GraphBuilder()
    h = _pinned(b, "F32", [2, 2])
    zero = b.const("F32", [2, 2], [0.0])
    b.output(b.op("Sub", h, zero, block=DF))
    out.append(("sub_zero", b.build()))

    b = GraphBuilder()
    h = _pinned(b, "F32", [4])
    b.output(b.op("ReLU", b.op("ReLU", h, block=DF), block=DF))
    out.append(("double_relu", b.build()))

    b = GraphBuilder()
    h = _pinned(b, "F32", [2, 3])
    r = b.op("ReLU", b.op("ReLU", h, block=DF), block=DF)
    b.output(b.op("Sigmoid", r, block=DF))
    out.append(("double_relu_then_sigmoid", b.build()))

    b = GraphBuilder()
    h = _pinned(b, "F32", [3, 2])
    one = b.const("F32", [3, 2], [1.0])
    zero = b.const("F32", [3, 2], [0.0])
    y = b.op("Mul", one, h, block=DF)
    b.output(b.op("Add", y, zero, block=DF))
    out.append(("mul_one_add_zero", b.build()))
    return out


def _fusion_tests(rng: random.Random) -> list[tuple[str, Graph]]:
    out = []
    for name, dtype, shape, tail in [
        ("add_relu_2d", "F32", [2, 3], None),
        ("add_relu_1d_f64", "F64", [4], None),
        ("add_relu_3d", "F32", [2, 2, 2], None),
        ("add_relu_int", "I32", [2, 3], None),
        ("add_relu_sigmoid", "F32", [5], "Sigmoid"),
        ("add_relu_column", "F32", [3, 1], None),
    ]:
        b = GraphBuilder()
        h1 = _pinned(b, dtype, shape)
        h2 = _pinned(b, dtype, shape)
        y = b.op("ReLU", b.op("Add", h1, h2, block=DF), block=DF)
        if tail:
            y = b.op(tail, y, block=DF)
        b.output(y)
        out.append((name, b.build()))
    return out


def _reorder_tests(rng: random.Random) -> list[tuple[str, Graph]]:
    out = []
    for name, dtype, shapes, perm, axis, tail in [
        ("transpose_concat", "F32", [[2, 3], [2, 5]], [1, 0], 0, None),
        ("transpose_concat_f64", "F64", [[3, 2], [1, 2]], [1, 0], 1, None),
        ("rotate_concat_3d", "F32", [[2, 3, 4], [2, 3, 1]], [2, 0, 1], 0, None),
        ("transpose_concat_three", "F32", [[2, 1], [2, 2], [2, 3]], [1, 0], 0, None),
        ("transpose_concat_relu", "F32", [[4, 2], [4, 3]], [1, 0], 0, "ReLU"),
        ("rotate_concat_int", "I32", [[3, 2, 2], [1, 2, 2]], [1, 2, 0], 2, None),
    ]:
        b = GraphBuilder()
        ts = [b.op("PermuteDims", _pinned(b, dtype, s), axes=perm, block=DF) for s in shapes]
        y = b.op("Concat", *ts, axis=axis, block=DF)
        if tail:
            y = b.op(tail, y, block=DF)
        b.output(y)
        out.append((name, b.build()))
    return out


def _castelim_tests(rng: random.Random) -> list[tuple[str, Graph]]:
    out = []
    for name, src, mid, dst in [
        ("widen_int_then_float", "I32", "I64", "F32"),
        ("float_roundtrip", "F32", "F64", "F32"),
        ("bool_via_int", "Bool", "I32", "F64"),
        ("int_via_double", "I32", "F64", "I64"),
        ("widen_int_then_double", "I32", "I64", "F64"),
        ("identity_cast", "F32", None, "F32"),
    ]:
        b = GraphBuilder()
        h = _pinned(b, src, [2, 3])
        if mid is not None:
            h = b.op("Cast", h, to=mid, block=DF)
        y = b.op("Cast", h, to=dst, block=DF)
        b.output(y)
        out.append((name, b.build()))
    return out


def _dce_tests(rng: random.Random) -> list[tuple[str, Graph]]:
    out = []
    for name, dtype, shape, dead in [
        ("dead_sigmoid", "F32", [2, 3], ["Sigmoid"]),
        ("dead_chain", "F32", [4], ["Sigmoid", "ReLU"]),
        ("dead_relu_int", "I32", [3, 2], ["ReLU"]),
        ("dead_self_mul", "F64", [2, 2], ["Mul"]),
        ("dead_transpose", "F32", [2, 4], ["PermuteDims"]),
        ("dead_cast", "F32", [5], ["Cast"]),
    ]:
        b = GraphBuilder()
        x = b.input(dtype, shape)
        y = b.input(dtype, shape)
        a = b.op("Add", x, y, block="main")
        d = a
        for op in dead:
            if op == "Mul":
                d = b.op("Mul", d, d, block="cleanup")
            elif op == "PermuteDims":
                d = b.op("PermuteDims", d, axes=[1, 0], block="cleanup")
            elif op == "Cast":
                d = b.op("Cast", d, to="I64", block="cleanup")
            else:
                d = b.op(op, d, block="cleanup")
        b.output(a)
        out.append((name, b.build()))
    return out


def _cse_tests(rng: random.Random) -> list[tuple[str, Graph]]:
    out = []
    for name, dtype, shape in [("dup_add_relu", "F32", [2, 3]), ("dup_add_relu_int", "I32", [4])]:
        # these also exercise fusion, so inputs are pinned like block-level tests
        b = GraphBuilder()
        x, y, z = (_pinned(b, dtype, shape) for _ in range(3))
        r1 = b.op("ReLU", b.op("Add", x, y, block="b1"), block="b1")
        r2 = b.op("ReLU", b.op("Add", x, y, block="b2"), block="b2")
        r3 = b.op("ReLU", b.op("Add", x, z, block="b3"), block="b3")
        b.output(b.op("Sub", r1, r2), r3)
        out.append((name, b.build()))

    b = GraphBuilder()
    x, y = b.input("F32", [3, 2]), b.input("F32", [3, 2])
    b.output(b.op("Add", b.op("Mul", x, y), b.op("Mul", y, x)))
    out.append(("dup_commutative_mul", b.build()))

    b = GraphBuilder()
    x = b.input("F64", [2, 2])
    b.output(b.op("Sub", b.op("Sigmoid", x), b.op("Sigmoid", x)))
    out.append(("dup_sigmoid", b.build()))

    b = GraphBuilder()
    x = b.input("F32", [2, 3])
    b.output(b.op("Add", b.op("PermuteDims", x, axes=[1, 0]), b.op("PermuteDims", x, axes=[1, 0])))
    out.append(("dup_transpose", b.build()))

    b = GraphBuilder()
    x, y = b.input("I32", [4]), b.input("I32", [4])
    b.output(b.op("Mul", b.op("Cast", x, to="F64"), b.op("Cast", x, to="F64")), y)
    out.append(("dup_cast", b.build()))
    return out


OPT_TESTS: dict[str, Callable[[random.Random], list[tuple[str, Graph]]]] = {
    "ConstantFolding": _cf_tests,
    "AlgebraicSimplification": _algsimp_tests,
    "RedundantCastElimination": _castelim_tests,
    "ReorderPermuteDimsAfterConcat": _reorder_tests,
    "ElementwiseFusion": _fusion_tests,
    "CommonSubexpressionElimination": _cse_tests,
    "DeadCodeElimination": _dce_tests,
}


def opt_corpus(seed: int = 0) -> list[CorpusEntry]:
    rng = random.Random(f"opt:{seed}")
    entries = []
    for pass_name, make in OPT_TESTS.items():
        for name, g in make(rng):
            entries.append(CorpusEntry(f"{pass_name}__{name}", g, (pass_name,)))
    return entries


# ---------------------------------------------------------------------------
# random seed graphs

_DTYPE_WEIGHTS = [(DType.F32, 50), (DType.F64, 25), (DType.I32, 15), (DType.I64, 10)]
_OP_WEIGHTS = [
    ("Add", 10), ("Sub", 6), ("Mul", 8), ("ReLU", 8), ("Sigmoid", 6), ("Softmax", 4), ("MatMul", 5),
    ("Concat", 6), ("PermuteDims", 6), ("Reshape", 6), ("Pad", 4), ("Crop", 4), ("Cast", 6),
    ("Conv2D", 3), ("BiasAdd", 3),
]
MAX_SEED_ELEMENTS = 256


def _pick_dtype(rng: random.Random) -> DType:
    return rng.choices([d for d, _ in _DTYPE_WEIGHTS], [w for _, w in _DTYPE_WEIGHTS])[0]


def _random_shape(rng: random.Random, rank: int | None = None) -> list[int]:
    rank = rng.randint(1, 4) if rank is None else rank
    hi = 3 if rank == 4 else 5
    return [rng.randint(1, hi) for _ in range(rank)]


def _factor_shape(rng: random.Random, n: int) -> list[int]:
    rank = rng.randint(1, 4)
    shape = []
    rest = n
    for _ in range(rank - 1):
        divisors = [d for d in range(1, rest + 1) if rest % d == 0]
        d = rng.choice(divisors)
        shape.append(d)
        rest //= d
    shape.append(rest)
    rng.shuffle(shape)
    return shape


class _SeedBuilder:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.b = GraphBuilder()
        self.producer_op: dict[str, str] = {}

    def values(self, pred=lambda t: True) -> list[str]:
        return [v for v, t in self.b.types.items() if pred(t)]

    def pick(self, pred=lambda t: True) -> str | None:
        vs = self.values(pred)
        return self.rng.choice(vs) if vs else None

    def try_op(self, op: str) -> str | None:
        rng, b, T = self.rng, self.b, self.b.types
        numeric = lambda t: t.dtype is not DType.Bool  # noqa: E731
        if op in ("Add", "Sub", "Mul"):
            a = self.pick(numeric)
            if a is None:
                return None
            partners = self.values(lambda t: t == T[a])
            return b.op(op, a, rng.choice(partners))
        if op == "ReLU":
            a = self.pick(lambda t: numeric(t))
            if a is None or self.producer_op.get(a) == "ReLU":
                return None
            return b.op(op, a)
        if op == "Sigmoid":
            a = self.pick(lambda t: t.dtype.is_float)
            return None if a is None else b.op(op, a)
        if op == "Softmax":
            a = self.pick(lambda t: t.dtype.is_float and t.rank >= 1)
            return None if a is None else b.op(op, a, axis=rng.randrange(T[a].rank))
        if op == "MatMul":
            a = self.pick(lambda t: numeric(t) and t.rank == 2)
            if a is None:
                return None
            k = T[a].shape[1]
            other = self.pick(lambda t: t.rank == 2 and t.dtype == T[a].dtype and t.shape[0] == k)
            if other is None:
                other = b.input(T[a].dtype, [k, rng.randint(1, 4)])
            return b.op(op, a, other)
        if op == "Concat":
            a = self.pick(lambda t: t.rank >= 1)
            if a is None:
                return None
            axis = rng.randrange(T[a].rank)
            ta = T[a]
            fits = self.values(
                lambda t: t.dtype == ta.dtype
                and t.rank == ta.rank
                and all(i == axis or x == y for i, (x, y) in enumerate(zip(t.shape, ta.shape)))
            )
            return b.op(op, a, rng.choice(fits), axis=axis)
        if op == "PermuteDims":
            a = self.pick(lambda t: t.rank >= 2)
            if a is None:
                return None
            axes = list(range(T[a].rank))
            while axes == sorted(axes):
                rng.shuffle(axes)
            return b.op(op, a, axes=axes)
        if op == "Reshape":
            a = self.pick()
            target = _factor_shape(rng, T[a].element_count)
            if tuple(target) == T[a].shape:
                return None
            return b.op(op, a, target=target)
        if op == "Pad":
            a = self.pick(lambda t: t.rank >= 1)
            if a is None:
                return None
            amounts = [[rng.randint(0, 1), rng.randint(0, 1)] for _ in T[a].shape]
            if not any(x or y for x, y in amounts):
                amounts[0][1] = 1
            return b.op(op, a, amounts=amounts)
        if op == "Crop":
            a = self.pick(lambda t: any(d >= 2 for d in t.shape))
            if a is None:
                return None
            begin, end = [], []
            for d in T[a].shape:
                lo = rng.randint(0, d - 1)
                begin.append(lo)
                end.append(rng.randint(lo + 1, d))
            return b.op(op, a, begin=begin, end=end)
        if op == "Cast":
            a = self.pick()
            choices = [d for d in DType if d is not T[a].dtype]
            return b.op(op, a, to=rng.choice(choices).value)
        if op == "Conv2D":
            a = self.pick(lambda t: t.dtype.is_float and t.rank == 4)
            if a is None:
                return None
            n, c, h, w = T[a].shape
            wt = b.input(T[a].dtype, [rng.randint(1, 3), c, rng.randint(1, h), rng.randint(1, w)])
            return b.op(op, a, wt)
        if op == "BiasAdd":
            a = self.pick(lambda t: numeric(t) and t.rank >= 2)
            if a is None:
                return None
            ch = T[a].shape[1]
            bias = self.pick(lambda t: t.dtype == T[a].dtype and t.shape == (ch,)) or b.input(T[a].dtype, [ch])
            return b.op(op, a, bias)
        raise ValueError(op)


def _triggers_any_pass(g: Graph) -> bool:
    for name in passes.PIPELINE:
        r = passes.run_pass(name, g)
        if r.fired or r.crash is not None:
            return True
    return False


def gen_seed(rng: random.Random) -> Graph:
    """A random valid graph over the registry that no pass rewrites."""
    while True:
        sb = _SeedBuilder(rng)
        for _ in range(rng.randint(1, 3)):
            sb.b.input(_pick_dtype(rng), _random_shape(rng))
        target = rng.randint(3, 12)
        attempts = 0
        while len(sb.b.nodes) < target and attempts < 100:
            attempts += 1
            op = rng.choices([o for o, _ in _OP_WEIGHTS], [w for _, w in _OP_WEIGHTS])[0]
            v = sb.try_op(op)
            if v is None:
                continue
            if sb.b.types[v].element_count > MAX_SEED_ELEMENTS:
                sb.b.nodes.pop()
                continue
            sb.producer_op[v] = op
        if len(sb.b.nodes) < 3:
            continue
        consumed = {i for n in sb.b.nodes for i in n.inputs}
        sb.b.output(*[v.id for n in sb.b.nodes for v in n.outputs if v.id not in consumed])
        g = sb.b.build()
        if validate(g).ok and not _triggers_any_pass(g):
            return g


def seed_rng(master_seed: int, index: int, stream: str = "seed") -> random.Random:
    return random.Random(f"{stream}:{master_seed}:{index}")


def noopt_corpus(count: int = 40, seed: int = 0) -> list[CorpusEntry]:
    return [
        CorpusEntry(f"noopt_{i:03d}", gen_seed(seed_rng(seed, i, "noopt")), ())
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# on-disk layout


def write_entry(directory: Path, entry: CorpusEntry) -> None:
    save_graph(directory / f"{entry.name}.cg.json", entry.graph, {"test": entry.name})
    with open(directory / f"{entry.name}.manifest.json", "w") as f:
        json.dump({"passes": list(entry.passes)}, f)
        f.write("\n")


def write_corpus(root, seed_count: int = 4000, master_seed: int = 0, noopt_count: int = 40) -> dict:
    root = Path(root)
    opt_dir, noopt_dir, seed_dir = root / "corpus" / "opt", root / "corpus" / "noopt", root / "seeds"
    for d in (opt_dir, noopt_dir, seed_dir):
        d.mkdir(parents=True, exist_ok=True)
    opt = opt_corpus(master_seed)
    for e in opt:
        write_entry(opt_dir, e)
    for e in noopt_corpus(noopt_count, master_seed):
        write_entry(noopt_dir, e)
    for i in range(seed_count):
        save_graph(seed_dir / f"seed-{i:04d}.cg.json", gen_seed(seed_rng(master_seed, i)), {"seed": i})
    per_pass: dict[str, int] = {}
    for e in opt:
        for p in e.passes:
            per_pass[p] = per_pass.get(p, 0) + 1
    manifest = {
        "master_seed": master_seed,
        "opt_tests": len(opt),
        "opt_tests_per_pass": per_pass,
        "noopt_tests": noopt_count,
        "seeds": seed_count,
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    return manifest
