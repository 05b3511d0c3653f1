"""Independent topology oracle built on networkx isomorphism."""

import networkx as nx
from networkx.algorithms.isomorphism import DiGraphMatcher


def from_graph(g):
    d = nx.MultiDiGraph()
    producer = {}
    for i, v in enumerate(g.inputs):
        d.add_node(("in", v.id), label=("input",))
        producer[v.id] = (("in", v.id), 0)
    for c in g.constants:
        d.add_node(("c", c.id), label=("const",))
        producer[c.id] = (("c", c.id), 0)
    for n in g.nodes:
        d.add_node(n.id, label=(n.op, n.attrs))
        for j, o in enumerate(n.outputs):
            producer[o.id] = (n.id, j)
    for n in g.nodes:
        for slot, x in enumerate(n.inputs):
            src, port = producer[x]
            d.add_edge(src, n.id, label=(port, slot))
    return d


def from_rows(rows):
    """Rows are (op, input names, attrs) with names 'inK', 'cK' or 'nK.J'."""
    d = nx.MultiDiGraph()
    for k, (op, ins, attrs) in enumerate(rows):
        d.add_node(f"n{k}", label=(op, attrs))
        for slot, name in enumerate(ins):
            if name.startswith("n"):
                node, port = name.split(".")
                d.add_edge(node, f"n{k}", label=(int(port), slot))
            else:
                d.add_node(name, label=("input",) if name.startswith("in") else ("const",))
                d.add_edge(name, f"n{k}", label=(0, slot))
    return d


def _edges_match(a, b):
    return sorted(e["label"] for e in a.values()) == sorted(e["label"] for e in b.values())


def isomorphic(a, b):
    if a.number_of_nodes() != b.number_of_nodes() or a.number_of_edges() != b.number_of_edges():
        return False
    m = DiGraphMatcher(a, b, node_match=lambda x, y: x["label"] == y["label"], edge_match=_edges_match)
    return m.is_isomorphic()
