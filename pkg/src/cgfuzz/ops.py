"""Operator registry: arity, attribute schema, intrinsic input requirements,
shape/type inference and reference evaluation for every op kind.

Elementwise binary ops use exact same-shape semantics; there is no implicit
broadcasting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .graph import DType, TensorType

FLOAT = "float"
NUMERIC = "numeric"
ANY = "any"

_CLASS_MEMBERS = {
    FLOAT: {DType.F32, DType.F64},
    NUMERIC: {DType.F32, DType.F64, DType.I32, DType.I64},
    ANY: set(DType),
}

NP_DTYPES = {
    DType.F32: np.float32,
    DType.F64: np.float64,
    DType.I32: np.int32,
    DType.I64: np.int64,
    DType.Bool: np.bool_,
}


class ConstraintViolation(Exception):
    """Raised by :func:`infer`; ``rule`` names the failed check."""

    def __init__(self, rule: str, message: str):
        super().__init__(f"{rule}: {message}")
        self.rule = rule


@dataclass(frozen=True)
class Concrete:
    type: TensorType


@dataclass(frozen=True)
class Abstract:
    rank: int | None = None
    min_rank: int = 0
    dtype_class: str = ANY

    def __str__(self) -> str:
        r = f"rank={self.rank}" if self.rank is not None else f"rank>={self.min_rank}"
        return f"Abstract({r}, {self.dtype_class})"


InputRequirement = Concrete | Abstract


def dtype_in_class(dtype: DType, cls: str) -> bool:
    return dtype in _CLASS_MEMBERS[cls]


def narrower_class(a: str, b: str) -> str:
    order = [FLOAT, NUMERIC, ANY]
    return order[min(order.index(a), order.index(b))]


def merge_abstract(a: Abstract, b: Abstract) -> Abstract:
    rank = a.rank if a.rank is not None else b.rank
    return Abstract(rank, max(a.min_rank, b.min_rank), narrower_class(a.dtype_class, b.dtype_class))


def check_compatible(candidate: TensorType, requirement: InputRequirement) -> bool:
    if isinstance(requirement, Concrete):
        return candidate == requirement.type
    if requirement.rank is not None and candidate.rank != requirement.rank:
        return False
    if candidate.rank < requirement.min_rank:
        return False
    return dtype_in_class(candidate.dtype, requirement.dtype_class)


@dataclass(frozen=True)
class OpConstraint:
    op: str
    min_arity: int
    max_arity: int
    attrs: Mapping[str, str]  # name -> kind; kinds ending in "?" are optional
    requirements: Callable[[int, Mapping[str, Any]], list[Abstract]]
    rule: Callable[[list[TensorType], Mapping[str, Any]], list[TensorType]]
    evaluate: Callable[[list[np.ndarray], Mapping[str, Any], list[TensorType]], list[np.ndarray]]
    commutative: bool = False


REGISTRY: dict[str, OpConstraint] = {}


def register(c: OpConstraint) -> None:
    assert c.op not in REGISTRY, c.op
    REGISTRY[c.op] = c


def get(op: str) -> OpConstraint:
    try:
        return REGISTRY[op]
    except KeyError:
        raise ConstraintViolation("op", f"unknown op {op!r}") from None


def _check_attrs(c: OpConstraint, attrs: Mapping[str, Any]) -> None:
    for name in attrs:
        if name != "block" and name not in c.attrs:
            raise ConstraintViolation("attr", f"{c.op} has no attribute {name!r}")
    for name, kind in c.attrs.items():
        optional = kind.endswith("?")
        kind = kind.rstrip("?")
        if name not in attrs:
            if optional:
                continue
            raise ConstraintViolation("attr", f"{c.op} requires attribute {name!r}")
        v = attrs[name]
        if kind == "int" and not (isinstance(v, int) and not isinstance(v, bool)):
            raise ConstraintViolation("attr", f"{name} must be an int")
        if kind == "ints" and not (
            isinstance(v, (list, tuple)) and all(isinstance(x, int) and not isinstance(x, bool) for x in v)
        ):
            raise ConstraintViolation("attr", f"{name} must be a list of ints")
        if kind == "pairs" and not (
            isinstance(v, (list, tuple))
            and all(isinstance(p, (list, tuple)) and len(p) == 2 and all(isinstance(x, int) for x in p) for p in v)
        ):
            raise ConstraintViolation("attr", f"{name} must be a list of [before, after] pairs")
        if kind == "number" and not isinstance(v, (int, float)):
            raise ConstraintViolation("attr", f"{name} must be a number")
        if kind == "dtype":
            try:
                DType(v)
            except ValueError:
                raise ConstraintViolation("attr", f"{name} must be a dtype name") from None


def infer(op: str, inputs: Sequence[TensorType], attrs: Mapping[str, Any] | None = None) -> list[TensorType]:
    attrs = attrs or {}
    c = get(op)
    if not c.min_arity <= len(inputs) <= c.max_arity:
        raise ConstraintViolation(
            "arity", f"{op} takes {c.min_arity}..{c.max_arity} inputs, got {len(inputs)}"
        )
    _check_attrs(c, attrs)
    reqs = c.requirements(len(inputs), attrs)
    for i, (t, req) in enumerate(zip(inputs, reqs)):
        if req.rank is not None and t.rank != req.rank:
            raise ConstraintViolation("rank", f"{op} input {i}: rank {req.rank} required, got {t.rank}")
        if t.rank < req.min_rank:
            raise ConstraintViolation("rank", f"{op} input {i}: rank >= {req.min_rank} required, got {t.rank}")
        if not dtype_in_class(t.dtype, req.dtype_class):
            raise ConstraintViolation("dtype", f"{op} input {i}: {req.dtype_class} dtype required, got {t.dtype.value}")
    return c.rule(list(inputs), attrs)


def input_requirements(op: str, n_inputs: int, attrs: Mapping[str, Any] | None = None) -> list[Abstract]:
    return get(op).requirements(n_inputs, attrs or {})


# ---------------------------------------------------------------------------
# numeric helpers shared by evaluation rules


def cast_array(x: np.ndarray, to: DType) -> np.ndarray:
    """Deterministic cast: float->int truncates toward zero (NaN -> 0,
    saturating), bool casts through 0/1."""
    target = NP_DTYPES[to]
    if to is DType.Bool:
        return np.asarray(x != 0, dtype=np.bool_)
    if to.is_int and x.dtype.kind == "f":
        info = np.iinfo(target)
        y = np.trunc(np.nan_to_num(x, nan=0.0, posinf=info.max, neginf=info.min))
        return np.clip(y, info.min, info.max).astype(target)
    return x.astype(target)


def _wide(x: np.ndarray) -> np.ndarray:
    if x.dtype.kind == "f":
        return x.astype(np.float64, copy=False)
    return x.astype(np.int64, copy=False)


def _finish(y: np.ndarray, t: TensorType) -> np.ndarray:
    return cast_array(np.asarray(y), t.dtype).reshape(t.shape)


def _same_type_rule(name: str) -> Callable:
    def rule(ins: list[TensorType], attrs) -> list[TensorType]:
        a, b = ins
        if a.dtype != b.dtype:
            raise ConstraintViolation("dtype", f"{name} operands differ in dtype ({a.dtype.value} vs {b.dtype.value})")
        if a.shape != b.shape:
            raise ConstraintViolation("broadcast", f"{name} operands differ in shape ({list(a.shape)} vs {list(b.shape)})")
        return [a]

    return rule


def _unary_same(ins, attrs):
    return [ins[0]]


def _fixed(*reqs: Abstract) -> Callable:
    return lambda n, attrs: list(reqs)


def _binary_eval(fn: Callable) -> Callable:
    def ev(xs, attrs, outs):
        return [_finish(fn(_wide(xs[0]), _wide(xs[1])), outs[0])]

    return ev


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def _fused_add_relu_eval(xs, attrs, outs):
    t = outs[0]
    s = _finish(_wide(xs[0]) + _wide(xs[1]), t)
    return [_finish(_relu(_wide(s)), t)]


def _softmax_rule(ins, attrs):
    t = ins[0]
    axis = attrs["axis"]
    if not -t.rank <= axis < t.rank:
        raise ConstraintViolation("attr", f"softmax axis {axis} out of range for rank {t.rank}")
    return [t]


def _softmax_eval(xs, attrs, outs):
    x = _wide(xs[0])
    axis = attrs["axis"]
    if x.size == 0:
        return [_finish(x, outs[0])]
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return [_finish(e / np.sum(e, axis=axis, keepdims=True), outs[0])]


def _matmul_rule(ins, attrs):
    a, b = ins
    if a.dtype != b.dtype:
        raise ConstraintViolation("dtype", "MatMul operands differ in dtype")
    if a.shape[1] != b.shape[0]:
        raise ConstraintViolation("shape", f"MatMul inner extents differ ({a.shape[1]} vs {b.shape[0]})")
    return [TensorType(a.dtype, (a.shape[0], b.shape[1]))]


def _concat_req(n, attrs):
    axis = attrs.get("axis", 0)
    min_rank = axis + 1 if axis >= 0 else -axis
    return [Abstract(None, max(1, min_rank), ANY)] * n


def _concat_rule(ins, attrs):
    axis = attrs["axis"]
    first = ins[0]
    if not -first.rank <= axis < first.rank:
        raise ConstraintViolation("attr", f"concat axis {axis} out of range for rank {first.rank}")
    ax = axis % first.rank
    total = 0
    for t in ins:
        if t.dtype != first.dtype:
            raise ConstraintViolation("dtype", "Concat operands differ in dtype")
        if t.rank != first.rank:
            raise ConstraintViolation("rank", "Concat operands differ in rank")
        for i, (d0, d1) in enumerate(zip(first.shape, t.shape)):
            if i != ax and d0 != d1:
                raise ConstraintViolation("shape", f"Concat operands differ on axis {i}")
        total += t.shape[ax]
    shape = list(first.shape)
    shape[ax] = total
    return [first.with_shape(shape)]


def _concat_eval(xs, attrs, outs):
    return [np.concatenate(xs, axis=attrs["axis"]).reshape(outs[0].shape)]


def _permute_req(n, attrs):
    axes = attrs.get("axes", ())
    return [Abstract(len(axes), 0, ANY)]


def _permute_rule(ins, attrs):
    t = ins[0]
    axes = list(attrs["axes"])
    if sorted(axes) != list(range(t.rank)):
        raise ConstraintViolation("attr", f"axes {axes} is not a permutation of rank {t.rank}")
    return [t.with_shape(t.shape[a] for a in axes)]


def _permute_eval(xs, attrs, outs):
    return [np.ascontiguousarray(np.transpose(xs[0], attrs["axes"]))]


def _reshape_rule(ins, attrs):
    t = ins[0]
    target = list(attrs["target"])
    if any(d < 0 for d in target):
        raise ConstraintViolation("attr", "reshape target has negative extent")
    if math.prod(target) != t.element_count:
        raise ConstraintViolation(
            "shape", f"reshape changes element count ({t.element_count} -> {math.prod(target)})"
        )
    return [t.with_shape(target)]


def _reshape_eval(xs, attrs, outs):
    return [xs[0].reshape(outs[0].shape)]


def _pad_req(n, attrs):
    return [Abstract(len(attrs.get("amounts", ())), 0, ANY)]


def _pad_rule(ins, attrs):
    t = ins[0]
    amounts = attrs["amounts"]
    if len(amounts) != t.rank:
        raise ConstraintViolation("attr", f"pad amounts for rank {len(amounts)} applied to rank {t.rank}")
    if any(a < 0 or b < 0 for a, b in amounts):
        raise ConstraintViolation("attr", "negative pad amount")
    return [t.with_shape(d + a + b for d, (a, b) in zip(t.shape, amounts))]


def _pad_eval(xs, attrs, outs):
    value = attrs.get("value", 0)
    y = np.pad(xs[0], [tuple(p) for p in attrs["amounts"]], constant_values=value)
    return [_finish(_wide(y) if y.dtype != np.bool_ else y, outs[0])]


def _crop_req(n, attrs):
    return [Abstract(len(attrs.get("begin", ())), 0, ANY)]


def _crop_rule(ins, attrs):
    t = ins[0]
    begin, end = list(attrs["begin"]), list(attrs["end"])
    if len(begin) != t.rank or len(end) != t.rank:
        raise ConstraintViolation("attr", f"crop bounds do not match rank {t.rank}")
    for b, e, d in zip(begin, end, t.shape):
        if not 0 <= b <= e <= d:
            raise ConstraintViolation("attr", f"crop window [{b}, {e}) outside extent {d}")
    return [t.with_shape(e - b for b, e in zip(begin, end))]


def _crop_eval(xs, attrs, outs):
    sl = tuple(slice(b, e) for b, e in zip(attrs["begin"], attrs["end"]))
    return [np.ascontiguousarray(xs[0][sl])]


def _cast_rule(ins, attrs):
    return [ins[0].with_dtype(DType(attrs["to"]))]


def _cast_eval(xs, attrs, outs):
    return [cast_array(xs[0], DType(attrs["to"]))]


def _conv_rule(ins, attrs):
    x, w = ins
    if x.dtype != w.dtype:
        raise ConstraintViolation("dtype", "Conv2D input and weight differ in dtype")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ConstraintViolation("shape", f"Conv2D channel mismatch ({c} vs {c2})")
    if kh > h or kw > wd or kh == 0 or kw == 0:
        raise ConstraintViolation("shape", "Conv2D kernel larger than input or empty")
    return [TensorType(x.dtype, (n, o, h - kh + 1, wd - kw + 1))]


def _conv_eval(xs, attrs, outs):
    x, w = _wide(xs[0]), _wide(xs[1])
    kh, kw = w.shape[2], w.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    y = np.einsum("nchwij,ocij->nohw", win, w)
    return [_finish(y, outs[0])]


def _bias_rule(ins, attrs):
    x, b = ins
    if x.dtype != b.dtype:
        raise ConstraintViolation("dtype", "BiasAdd operands differ in dtype")
    if b.shape[0] != x.shape[1]:
        raise ConstraintViolation("shape", f"bias extent {b.shape[0]} != channel extent {x.shape[1]}")
    return [x]


def _bias_eval(xs, attrs, outs):
    x, b = _wide(xs[0]), _wide(xs[1])
    shape = [1] * x.ndim
    shape[1] = b.shape[0]
    return [_finish(x + b.reshape(shape), outs[0])]


def _unary_eval(fn: Callable) -> Callable:
    return lambda xs, attrs, outs: [_finish(fn(_wide(xs[0])), outs[0])]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


_num_any = Abstract(None, 0, NUMERIC)
_float_any = Abstract(None, 0, FLOAT)
_any_any = Abstract(None, 0, ANY)

register(OpConstraint("Add", 2, 2, {}, _fixed(_num_any, _num_any), _same_type_rule("Add"), _binary_eval(np.add), True))
register(OpConstraint("Sub", 2, 2, {}, _fixed(_num_any, _num_any), _same_type_rule("Sub"), _binary_eval(np.subtract)))
register(OpConstraint("Mul", 2, 2, {}, _fixed(_num_any, _num_any), _same_type_rule("Mul"), _binary_eval(np.multiply), True))
register(
    OpConstraint(
        "FusedAddReLU", 2, 2, {}, _fixed(_num_any, _num_any), _same_type_rule("FusedAddReLU"), _fused_add_relu_eval, True
    )
)
register(OpConstraint("ReLU", 1, 1, {}, _fixed(_num_any), _unary_same, _unary_eval(_relu)))
register(OpConstraint("Sigmoid", 1, 1, {}, _fixed(_float_any), _unary_same, _unary_eval(_sigmoid)))
register(
    OpConstraint(
        "Softmax",
        1,
        1,
        {"axis": "int"},
        lambda n, a: [Abstract(None, max(1, a.get("axis", 0) + 1 if a.get("axis", 0) >= 0 else -a.get("axis", 0)), FLOAT)],
        _softmax_rule,
        _softmax_eval,
    )
)
register(
    OpConstraint(
        "MatMul", 2, 2, {}, _fixed(Abstract(2, 0, NUMERIC), Abstract(2, 0, NUMERIC)), _matmul_rule, _binary_eval(np.matmul)
    )
)
register(OpConstraint("Concat", 1, 8, {"axis": "int"}, _concat_req, _concat_rule, _concat_eval))
register(OpConstraint("PermuteDims", 1, 1, {"axes": "ints"}, _permute_req, _permute_rule, _permute_eval))
register(OpConstraint("Reshape", 1, 1, {"target": "ints"}, _fixed(_any_any), _reshape_rule, _reshape_eval))
register(OpConstraint("Pad", 1, 1, {"amounts": "pairs", "value": "number?"}, _pad_req, _pad_rule, _pad_eval))
register(OpConstraint("Crop", 1, 1, {"begin": "ints", "end": "ints"}, _crop_req, _crop_rule, _crop_eval))
register(OpConstraint("Cast", 1, 1, {"to": "dtype"}, _fixed(_any_any), _cast_rule, _cast_eval))
register(
    OpConstraint(
        "Conv2D", 2, 2, {}, _fixed(Abstract(4, 0, FLOAT), Abstract(4, 0, FLOAT)), _conv_rule, _conv_eval
    )
)
register(
    OpConstraint(
        "BiasAdd", 2, 2, {}, _fixed(Abstract(None, 2, NUMERIC), Abstract(1, 0, NUMERIC)), _bias_rule, _bias_eval
    )
)

ELEMENTWISE_BINARY = frozenset({"Add", "Sub", "Mul", "FusedAddReLU"})


def evaluate(op: str, inputs: list[np.ndarray], attrs: Mapping[str, Any], out_types: list[TensorType]) -> list[np.ndarray]:
    return get(op).evaluate(inputs, attrs, out_types)
