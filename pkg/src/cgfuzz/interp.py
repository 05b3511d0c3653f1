"""Reference interpreter: executes a graph on concrete numpy tensors.

Floating-point ops are computed in float64 and rounded to the declared
dtype once per node; integer ops are computed in int64 and wrapped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import ops
from .graph import DType, Graph, TensorType, topo_order


class MissingInput(Exception):
    pass


class ExecError(Exception):
    """A node failed at runtime; carries the node id."""

    def __init__(self, node_id: str, message: str):
        super().__init__(f"node '{node_id}': {message}")
        self.node_id = node_id


@dataclass
class TensorValue:
    type: TensorType
    data: np.ndarray


def constant_array(c) -> np.ndarray:
    return np.array(c.data, dtype=ops.NP_DTYPES[c.type.dtype]).reshape(c.type.shape)


def execute(graph: Graph, inputs: Mapping[str, np.ndarray]) -> list[TensorValue]:
    env: dict[str, np.ndarray] = {}
    for v in graph.inputs:
        if v.id not in inputs:
            raise MissingInput(f"no value supplied for graph input '{v.id}'")
        arr = np.asarray(inputs[v.id])
        if arr.shape != v.type.shape:
            raise MissingInput(f"input '{v.id}' has shape {list(arr.shape)}, declared {list(v.type.shape)}")
        env[v.id] = ops.cast_array(arr, v.type.dtype)
    for c in graph.constants:
        env[c.id] = constant_array(c)
    with np.errstate(all="ignore"):
        for n in topo_order(graph):
            attrs = n.attr_map
            out_types = [v.type for v in n.outputs]
            try:
                results = ops.evaluate(n.op, [env[i] for i in n.inputs], attrs, out_types)
            except Exception as e:  # noqa: BLE001 - reported with node context
                raise ExecError(n.id, f"{type(e).__name__}: {e}") from e
            for v, r in zip(n.outputs, results):
                if r.shape != v.type.shape:
                    raise ExecError(n.id, f"produced shape {list(r.shape)}, declared {list(v.type.shape)}")
                env[v.id] = r
    return [TensorValue(graph.value_types[o], env[o]) for o in graph.outputs]


def gen_inputs(graph: Graph, seed: int) -> dict[str, np.ndarray]:
    """Deterministic random inputs: floats in [-1, 1], ints in [-4, 4]."""
    rng = np.random.default_rng(seed)
    out = {}
    for v in graph.inputs:
        t = v.type
        if t.dtype.is_float:
            arr = rng.uniform(-1.0, 1.0, size=t.shape)
        elif t.dtype is DType.Bool:
            arr = rng.integers(0, 2, size=t.shape).astype(bool)
        else:
            arr = rng.integers(-4, 5, size=t.shape)
        out[v.id] = ops.cast_array(np.asarray(arr), t.dtype)
    return out
