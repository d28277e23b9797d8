"""Scaled computational graphs.

A :class:`Graph` is a DAG of ops. Every op node carries a forward factor
``alpha`` and one backward factor per input slot (``betas``): the node computes
``alpha * f(x)`` and hands ``beta_i * grad_f(x, g)_i`` back along slot ``i``.
Unscaled ops simply have all factors equal to one.

Edges are ``(src, dst, slot)`` triples. Graph inputs are ``data``/``param``
nodes and every marked output feeds a dedicated ``output`` sink node, so input
and output edges are ordinary edges. A node whose value feeds several consumers
sums the gradients coming back (an implicit, unscaled copy).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import special

from unitscale import tensor as T

INPUT_KINDS = ("data", "param")


class GraphError(ValueError):
    pass


class ConstraintViolation(GraphError):
    pass


class Edge(NamedTuple):
    src: int
    dst: int
    slot: int


@dataclass(frozen=True)
class ScaleFactors:
    alpha: float = 1.0
    betas: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.alpha > 0 or any(not b > 0 for b in self.betas):
            raise ValueError(f"scaling factors must be positive: {self}")

    @classmethod
    def unit(cls, arity: int) -> "ScaleFactors":
        return cls(1.0, (1.0,) * arity)

    @classmethod
    def collapsed(cls, value: float, arity: int) -> "ScaleFactors":
        return cls(value, (value,) * arity)


# ---------------------------------------------------------------------------
# op registry


class _NoQuant:
    def activation(self, x):
        return x

    def gradient(self, g):
        return g


NO_QUANT = _NoQuant()


@dataclass(frozen=True)
class Op:
    name: str
    arity: int | None  # None: variadic
    forward: Callable
    vjp: Callable
    shape: Callable


OPS: dict[str, Op] = {}


def register(name, arity, shape):
    def deco(cls):
        OPS[name] = Op(name, arity, cls.forward, cls.vjp, shape)
        return cls

    return deco


def _same(shapes, attrs):
    if any(s != shapes[0] for s in shapes[1:]):
        raise GraphError(f"shape mismatch: {shapes}")
    return shapes[0]


def _matmul_shape(shapes, attrs):
    (a, w) = shapes
    if len(a) != 2 or len(w) != 2 or a[1] != w[0]:
        raise GraphError(f"matmul shape mismatch: {a} @ {w}")
    return (a[0], w[1])


def _scalar(shapes, attrs):
    return ()


def _xent_shape(shapes, attrs):
    if len(shapes[0]) != 2 or shapes[0] != shapes[1]:
        raise GraphError(f"softmax_xent wants [b, s] logits and targets, got {shapes}")
    if shapes[0][1] < 2:
        raise GraphError("softmax_xent needs s >= 2")
    return ()


def _ln_shape(shapes, attrs):
    x, w, c = shapes
    if len(x) != 2 or w != (x[1],) or c != (x[1],):
        raise GraphError(f"layer_norm shape mismatch: {shapes}")
    return x


@register("identity", 1, _same)
class _Identity:
    def forward(xs, attrs, q):
        return xs[0]

    def vjp(xs, out, g, attrs, q):
        return [g]


@register("matmul", 2, _matmul_shape)
class _Matmul:
    def forward(xs, attrs, q):
        return T.matmul(q.activation(xs[0]), q.activation(xs[1]))

    def vjp(xs, out, g, attrs, q):
        x, w = q.activation(xs[0]), q.activation(xs[1])
        g = q.gradient(g)
        return [g @ w.T, x.T @ g]


@register("add", None, _same)
class _Add:
    def forward(xs, attrs, q):
        return T.add(*xs)

    def vjp(xs, out, g, attrs, q):
        return [g] * len(xs)


@register("weighted_add", None, _same)
class _WeightedAdd:
    def forward(xs, attrs, q):
        return T.add(*(c * x for c, x in zip(attrs["gammas"], xs)))

    def vjp(xs, out, g, attrs, q):
        return [c * g for c in attrs["gammas"]]


@register("mul", 2, _same)
class _Mul:
    def forward(xs, attrs, q):
        return xs[0] * xs[1]

    def vjp(xs, out, g, attrs, q):
        return [g * xs[1], g * xs[0]]


@register("square", 1, _same)
class _Square:
    def forward(xs, attrs, q):
        return xs[0] ** 2

    def vjp(xs, out, g, attrs, q):
        return [2 * xs[0] * g]


@register("relu", 1, _same)
class _Relu:
    def forward(xs, attrs, q):
        return T.relu(xs[0])

    def vjp(xs, out, g, attrs, q):
        return [g * (xs[0] > 0)]


@register("gelu", 1, _same)
class _Gelu:
    def forward(xs, attrs, q):
        return T.gelu(xs[0])

    def vjp(xs, out, g, attrs, q):
        x = xs[0]
        return [g * (special.ndtr(x) + x * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi))]


@register("tanh", 1, _same)
class _Tanh:
    def forward(xs, attrs, q):
        return T.tanh(xs[0])

    def vjp(xs, out, g, attrs, q):
        return [g * (1 - out**2)]


@register("sigmoid", 1, _same)
class _Sigmoid:
    def forward(xs, attrs, q):
        return T.sigmoid(xs[0])

    def vjp(xs, out, g, attrs, q):
        return [g * out * (1 - out)]


@register("softmax", 1, _same)
class _Softmax:
    def forward(xs, attrs, q):
        return T.softmax(xs[0])

    def vjp(xs, out, g, attrs, q):
        return [out * (g - np.sum(g * out, axis=-1, keepdims=True))]


@register("softmax_xent", 2, _xent_shape)
class _SoftmaxXent:
    """Cross entropy of softmax(logits) against (one-hot) target rows.

    ``reduction`` is ``"sum"`` over rows (default) or ``"mean"``.
    """

    def forward(xs, attrs, q):
        logits, targets = xs
        rows = -np.sum(targets * T.log_softmax(logits), axis=-1)
        return rows.mean() if attrs.get("reduction") == "mean" else rows.sum()

    def vjp(xs, out, g, attrs, q):
        logits, targets = xs
        if attrs.get("reduction") == "mean":
            g = g / logits.shape[0]
        p = T.softmax(logits)
        dlogits = (p * targets.sum(axis=-1, keepdims=True) - targets) * g
        return [dlogits, -T.log_softmax(logits) * g]


@register("sum", 1, _scalar)
class _Sum:
    def forward(xs, attrs, q):
        return np.sum(xs[0])

    def vjp(xs, out, g, attrs, q):
        return [np.full(np.shape(xs[0]), g, dtype=np.float64)]


@register("layer_norm", 3, _ln_shape)
class _LayerNorm:
    def forward(xs, attrs, q):
        x, w, c = xs
        mu = x.mean(axis=-1, keepdims=True)
        sd = x.std(axis=-1, keepdims=True)
        if np.any(sd == 0):
            raise GraphError("layer_norm: a row has zero variance")
        return c + w * (x - mu) / sd

    def vjp(xs, out, g, attrs, q):
        x, w, c = xs
        mu = x.mean(axis=-1, keepdims=True)
        sd = x.std(axis=-1, keepdims=True)
        xhat = (x - mu) / sd
        dxhat = g * w
        dx = (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True)) / sd
        return [dx, np.sum(g * xhat, axis=0), np.sum(g, axis=0)]


# ---------------------------------------------------------------------------
# graph


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int, ...] = ()
    scale: ScaleFactors | None = None
    attrs: dict = field(default_factory=dict)
    shape: tuple[int, ...] | None = None
    name: str = ""

    @property
    def is_input(self) -> bool:
        return self.op in INPUT_KINDS

    @property
    def is_op(self) -> bool:
        return self.op in OPS


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.outputs: list[int] = []  # producer node ids, in output order
        self._sinks: dict[int, int] = {}  # producer -> sink node id
        self._names: dict[str, int] = {}
        self.frozen = False
        self._cut: frozenset[Edge] | None = None

    # -- construction --------------------------------------------------------

    def _add(self, node: Node) -> int:
        if self.frozen:
            raise GraphError("graph is frozen")
        if node.name:
            if node.name in self._names:
                raise GraphError(f"duplicate node name {node.name!r}")
            self._names[node.name] = node.id
        self.nodes.append(node)
        self._cut = None
        return node.id

    def add_input(self, shape: Sequence[int], kind: str = "data", name: str = "") -> int:
        if kind not in INPUT_KINDS:
            raise GraphError(f"input kind must be one of {INPUT_KINDS}")
        nid = len(self.nodes)
        return self._add(Node(nid, kind, shape=tuple(int(s) for s in shape), name=name or f"{kind}{nid}"))

    def apply_op(
        self,
        op: str,
        inputs: Sequence[int],
        scale: ScaleFactors | None = None,
        name: str = "",
        **attrs,
    ) -> int:
        if op not in OPS:
            raise GraphError(f"unknown op {op!r}; known: {sorted(OPS)}")
        spec = OPS[op]
        inputs = tuple(int(i) for i in inputs)
        if spec.arity is not None and len(inputs) != spec.arity:
            raise GraphError(f"{op} takes {spec.arity} inputs, got {len(inputs)}")
        if not inputs:
            raise GraphError(f"{op} needs at least one input")
        nid = len(self.nodes)
        for i in inputs:
            # only existing nodes can be consumed, so construction never closes a cycle
            if not 0 <= i < nid:
                raise GraphError(f"input {i} does not exist yet (would create a cycle)")
            if self.nodes[i].op == "output":
                raise GraphError("cannot consume an output sink")
        if op == "weighted_add" and len(attrs.get("gammas", ())) != len(inputs):
            raise GraphError("weighted_add needs one gamma per input")
        scale = scale or ScaleFactors.unit(len(inputs))
        if len(scale.betas) != len(inputs):
            raise GraphError(f"{op}: {len(inputs)} inputs but {len(scale.betas)} betas")
        shape = spec.shape([self.nodes[i].shape for i in inputs], attrs)
        return self._add(Node(nid, op, inputs, scale, dict(attrs), tuple(shape), name or f"{op}{nid}"))

    def mark_output(self, node: int) -> Edge:
        if node in self._sinks:
            return Edge(node, self._sinks[node], 0)
        if not 0 <= node < len(self.nodes) or self.nodes[node].op == "output":
            raise GraphError(f"cannot mark {node} as output")
        nid = len(self.nodes)
        self._add(Node(nid, "output", (node,), shape=self.nodes[node].shape, name=f"out{len(self.outputs)}"))
        self._sinks[node] = nid
        self.outputs.append(node)
        return Edge(node, nid, 0)

    def freeze(self, strict: bool = False) -> "Graph":
        """Stop further construction. ``strict`` also insists on constraint-scaling."""
        if not self.outputs:
            raise GraphError("graph has no outputs")
        self.frozen = True
        if strict:
            bad = constraint_violations(self)
            if bad:
                raise ConstraintViolation(f"not constraint-scaled: {bad}")
        return self

    # -- lookup --------------------------------------------------------------

    def node(self, ref: int | str) -> Node:
        if isinstance(ref, str):
            if ref not in self._names:
                raise KeyError(f"no node named {ref!r}")
            return self.nodes[self._names[ref]]
        return self.nodes[ref]

    @property
    def inputs(self) -> list[Node]:
        return [n for n in self.nodes if n.is_input]

    @property
    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "param"]

    @property
    def edges(self) -> list[Edge]:
        return [Edge(src, n.id, i) for n in self.nodes for i, src in enumerate(n.inputs)]

    def consumers(self) -> dict[int, list[Edge]]:
        out: dict[int, list[Edge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            out[e.src].append(e)
        return out

    def output_edge(self, k: int = 0) -> Edge:
        src = self.outputs[k]
        return Edge(src, self._sinks[src], 0)

    def factors(self) -> dict[int, ScaleFactors]:
        return {n.id: n.scale for n in self.nodes if n.is_op}

    def with_factors(self, factors: Mapping[int, ScaleFactors]) -> "Graph":
        """Copy of the graph with some op nodes' factors replaced."""
        g = Graph()
        for n in self.nodes:
            new = replace(n, attrs=dict(n.attrs))
            if n.id in factors:
                f = factors[n.id]
                if len(f.betas) != len(n.inputs):
                    raise GraphError(f"node {n.id}: wrong number of betas")
                new.scale = f
            g.nodes.append(new)
        g.outputs = list(self.outputs)
        g._sinks = dict(self._sinks)
        g._names = dict(self._names)
        g.frozen = self.frozen
        return g

    def true_gradient_graph(self) -> "Graph":
        """Same forward function; backward gives exact gradients (beta_i := alpha)."""
        return self.with_factors(
            {n.id: ScaleFactors.collapsed(n.scale.alpha, len(n.inputs)) for n in self.nodes if n.is_op}
        )

    def cut_edges(self) -> frozenset[Edge]:
        if self._cut is None or not self.frozen:
            self._cut = frozenset(find_cut_edges(self))
        return self._cut

    # -- execution -----------------------------------------------------------

    def forward(self, values: Mapping[int | str, np.ndarray], quantizer=None) -> tuple[list[np.ndarray], "Tape"]:
        if not self.outputs:
            raise GraphError("graph has no outputs")
        q = quantizer or NO_QUANT
        tape = Tape(self, q)
        given = {self.node(k).id: v for k, v in values.items()}
        for n in self.nodes:
            if n.is_input:
                if n.id not in given:
                    raise GraphError(f"missing value for input {n.name!r}")
                v = np.asarray(given[n.id], dtype=np.float64)
                if v.shape != n.shape:
                    raise GraphError(f"input {n.name!r}: expected shape {n.shape}, got {v.shape}")
                tape.z[n.id] = v
            elif n.is_op:
                xs = [tape.z[i] for i in n.inputs]
                raw = np.asarray(OPS[n.op].forward(xs, n.attrs, q), dtype=np.float64)
                tape.raw[n.id] = raw
                tape.z[n.id] = n.scale.alpha * raw if n.scale.alpha != 1.0 else raw
        tape.nonfinite = [self.nodes[i].name for i, v in tape.z.items() if not np.all(np.isfinite(v))]
        return [tape.z[i] for i in self.outputs], tape

    def backward(self, tape: "Tape", output_grads: Sequence) -> dict[int, np.ndarray]:
        """Gradient (backward value) for every input node, keyed by node id.

        Also fills ``tape.h`` (per edge) and ``tape.grads`` (per node output).
        """
        if tape is None or tape.graph is not self:
            raise GraphError("backward needs the tape from this graph's forward")
        if len(output_grads) != len(self.outputs):
            raise GraphError(f"need {len(self.outputs)} output gradients, got {len(output_grads)}")
        q = tape.quantizer
        acc: dict[int, np.ndarray] = {}

        def push(e: Edge, h):
            h = np.asarray(h, dtype=np.float64)
            if h.shape != self.nodes[e.src].shape:
                raise GraphError(f"gradient shape {h.shape} does not match {self.nodes[e.src].shape} on {e}")
            tape.h[e] = h
            acc[e.src] = acc[e.src] + h if e.src in acc else h

        for k, src in enumerate(self.outputs):
            push(Edge(src, self._sinks[src], 0), output_grads[k])
        for n in reversed(self.nodes):
            if not n.is_op or n.id not in acc:
                continue
            g = acc[n.id]
            tape.grads[n.id] = g
            xs = [tape.z[i] for i in n.inputs]
            raws = OPS[n.op].vjp(xs, tape.raw[n.id], g, n.attrs, q)
            for slot, (src, r, beta) in enumerate(zip(n.inputs, raws, n.scale.betas)):
                push(Edge(src, n.id, slot), beta * r if beta != 1.0 else r)
        out = {}
        for n in self.inputs:
            out[n.id] = acc.get(n.id, np.zeros(n.shape))
            tape.grads[n.id] = out[n.id]
        return out

    # -- serialisation -------------------------------------------------------

    def to_dict(self, annotate: bool = True) -> dict:
        nodes = []
        for n in self.nodes:
            if n.op == "output":
                continue
            d = {"id": n.id, "op": n.op, "name": n.name}
            if n.is_input:
                d["shape"] = list(n.shape)
            else:
                d["inputs"] = list(n.inputs)
                d["alpha"] = n.scale.alpha
                d["betas"] = list(n.scale.betas)
                if n.attrs:
                    d["attrs"] = n.attrs
            nodes.append(d)
        out = {"nodes": nodes, "outputs": list(self.outputs)}
        if annotate:
            out["cut_edges"] = sorted([list(e) for e in find_cut_edges(self)])
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=kw.pop("indent", 1), **kw)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Graph":
        try:
            g = cls()
            remap: dict[int, int] = {}
            for nd in d["nodes"]:
                if nd["op"] in INPUT_KINDS:
                    nid = g.add_input(nd["shape"], nd["op"], nd.get("name", ""))
                else:
                    ins = [remap[i] for i in nd["inputs"]]
                    betas = nd.get("betas", [1.0] * len(ins))
                    scale = ScaleFactors(nd.get("alpha", 1.0), tuple(betas))
                    nid = g.apply_op(nd["op"], ins, scale, nd.get("name", ""), **nd.get("attrs", {}))
                remap[nd["id"]] = nid
            for o in d["outputs"]:
                g.mark_output(remap[o])
        except (KeyError, TypeError) as exc:
            raise GraphError(f"malformed graph description: {exc!r}") from exc
        return g.freeze()

    @classmethod
    def from_json(cls, text: str) -> "Graph":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(d)


@dataclass
class Tape:
    graph: Graph
    quantizer: object
    z: dict[int, np.ndarray] = field(default_factory=dict)  # node output (forward value of its out-edges)
    raw: dict[int, np.ndarray] = field(default_factory=dict)  # op output before alpha
    h: dict[Edge, np.ndarray] = field(default_factory=dict)  # backward value per edge
    grads: dict[int, np.ndarray] = field(default_factory=dict)  # summed gradient per node output
    nonfinite: list[str] = field(default_factory=list)

    def forward_value(self, e: Edge) -> np.ndarray:
        return self.z[e.src]


# ---------------------------------------------------------------------------
# analysis


def find_cut_edges(g: Graph) -> set[Edge]:
    """Bridges of the undirected multigraph underlying ``g`` (Tarjan, O(V + E)).

    Parallel edges between the same pair of nodes are never bridges.
    """
    edges = g.edges
    adj: dict[int, list[tuple[int, int]]] = {n.id: [] for n in g.nodes}
    for k, (u, v, _) in enumerate(edges):
        adj[u].append((v, k))
        adj[v].append((u, k))
    for lst in adj.values():
        lst.sort()

    disc: dict[int, int] = {}
    low: dict[int, int] = {}
    bridges: set[Edge] = set()
    clock = 0
    for root in sorted(adj):
        if root in disc:
            continue
        disc[root] = low[root] = clock
        clock += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, parent_edge, it = stack[-1]
            for w, k in it:
                if k == parent_edge:
                    continue
                if w in disc:
                    low[v] = min(low[v], disc[w])
                else:
                    disc[w] = low[w] = clock
                    clock += 1
                    stack.append((w, k, iter(adj[w])))
                    break
            else:
                stack.pop()
                if stack:
                    u = stack[-1][0]
                    low[u] = min(low[u], low[v])
                    if low[v] > disc[u]:
                        bridges.add(edges[parent_edge])
    return bridges


def _close(a: float, b: float, rtol: float = 1e-12) -> bool:
    return abs(a - b) <= rtol * max(abs(a), abs(b))


def _rewrite_pairs(g: Graph) -> dict[int, int]:
    pairs: dict[str, dict[str, int]] = {}
    for n in g.nodes:
        if "rewrite" in n.attrs:
            pairs.setdefault(str(n.attrs["rewrite"]), {})[n.attrs["role"]] = n.id
    out = {}
    for p in pairs.values():
        if set(p) == {"enter", "exit"}:
            out[p["enter"]] = p["exit"]
            out[p["exit"]] = p["enter"]
    return out


def constraint_violations(g: Graph, cut: Iterable[Edge] | None = None) -> list[Edge]:
    """Non-cut edges whose consumer has alpha != beta for that slot.

    A residual rewrite pair (``id*(f(id*(x, 1, c)), c, 1)``) counts as one op
    whose combined factors are checked instead.
    """
    cut = frozenset(cut) if cut is not None else g.cut_edges()
    pairs = _rewrite_pairs(g)
    bad = []
    for e in g.edges:
        n = g.nodes[e.dst]
        if not n.is_op or e in cut:
            continue
        if n.id in pairs:
            other = g.nodes[pairs[n.id]]
            a = n.scale.alpha * other.scale.alpha
            b = n.scale.betas[0] * other.scale.betas[0]
            if _close(a, b):
                continue
        elif _close(n.scale.alpha, n.scale.betas[e.slot]):
            continue
        bad.append(e)
    return bad


@dataclass
class ConstraintGroup:
    node: int
    slots: tuple[int, ...]  # input slots on non-cut edges
    proposals: tuple[float, ...]  # alpha first, then one beta per slot
    resolved_value: float


def constraint_groups(
    g: Graph, proposals: Mapping[int, ScaleFactors], cut: Iterable[Edge] | None = None
) -> list[ConstraintGroup]:
    cut = frozenset(cut) if cut is not None else g.cut_edges()
    groups = []
    for n in g.nodes:
        if not n.is_op:
            continue
        slots = tuple(i for i, src in enumerate(n.inputs) if Edge(src, n.id, i) not in cut)
        if not slots:
            continue
        p = proposals[n.id]
        vals = (p.alpha,) + tuple(p.betas[i] for i in slots)
        if any(not v > 0 for v in vals):
            raise ValueError(f"non-positive proposal at node {n.id}")
        gm = math.exp(sum(math.log(v) for v in vals) / len(vals))
        groups.append(ConstraintGroup(n.id, slots, vals, gm))
    return groups


def resolve_constraints(
    g: Graph,
    proposals: Mapping[int, ScaleFactors] | None = None,
    cut: Iterable[Edge] | None = None,
    exempt: Iterable[int] = (),
) -> dict[int, ScaleFactors]:
    """Constraint-scaled factors from unconstrained proposals.

    For every op consuming a non-cut edge, alpha and the betas of its non-cut
    slots are replaced by the geometric mean of their proposals. Factors on cut
    edges keep their proposals. ``exempt`` nodes (and residual rewrite pairs)
    are passed through untouched. ``cut`` overrides the computed cut-edge set.
    """
    proposals = dict(proposals) if proposals is not None else g.factors()
    for n in g.nodes:
        if n.is_op and n.id not in proposals:
            raise ValueError(f"no proposal for node {n.id} ({n.name})")
    skip = set(exempt) | set(_rewrite_pairs(g))
    resolved = dict(proposals)
    for grp in constraint_groups(g, proposals, cut):
        if grp.node in skip:
            continue
        p = proposals[grp.node]
        betas = list(p.betas)
        for i in grp.slots:
            betas[i] = grp.resolved_value
        resolved[grp.node] = ScaleFactors(grp.resolved_value, tuple(betas))
    return resolved


def _ratios(g: Graph, output: int) -> tuple[dict[Edge, float], dict[int, float]]:
    """Constant h(e) / true-gradient(e) for every edge that reaches ``output``.

    Walks back from the output multiplying beta/alpha of each consumer. A node
    whose outgoing edges disagree has no constant ratio, which raises
    :class:`ConstraintViolation`. In a constraint-scaled graph only cut edges
    contribute, so this is the product over cut edges of beta/alpha.
    """
    out_edge = g.output_edge(output)
    cons = g.consumers()
    ratio: dict[Edge, float] = {out_edge: 1.0}
    node_ratio: dict[int, float] = {}
    for n in reversed(g.nodes):
        if n.op == "output":
            continue
        outs = [ratio[e] for e in cons[n.id] if e in ratio]
        if not outs:
            continue
        if any(not _close(r, outs[0], 1e-9) for r in outs[1:]):
            raise ConstraintViolation(
                f"node {n.name!r}: gradients arriving along its outputs carry different scales {outs}"
            )
        node_ratio[n.id] = outs[0]
        if n.is_op:
            for i, src in enumerate(n.inputs):
                ratio[Edge(src, n.id, i)] = n.scale.betas[i] / n.scale.alpha * outs[0]
    return ratio, node_ratio


def edge_ratios(g: Graph, output: int = 0) -> dict[Edge, float]:
    return _ratios(g, output)[0]


def gradient_scale_ratio(g: Graph, input_ref: int | str, output: int = 0) -> float:
    """The factor by which the graph's backward value at an input exceeds the true gradient."""
    n = g.node(input_ref)
    if not n.is_input:
        raise GraphError(f"{n.name!r} is not a graph input")
    _, per_node = _ratios(g, output)
    if n.id not in per_node:
        raise GraphError(f"input {n.name!r} does not reach output {output}")
    return per_node[n.id]


@dataclass
class VerifyReport:
    is_scaled_op: bool
    ratios: dict[str, float]
    residuals: dict[str, float]
    message: str = ""


def verify_scaled_op(
    g: Graph, trials: int = 4, seed: int = 0, tol: float = 1e-9, output: int | None = None
) -> VerifyReport:
    """Check numerically that the graph's backward equals c_i times the true gradient.

    Inputs and output gradients are drawn unit-normal. For each input the
    constant c_i is fitted by least squares over all elements of all trials;
    the graph passes if every relative residual is below ``tol``.
    """
    if output is None:
        if len(g.outputs) != 1:
            raise GraphError("verify_scaled_op checks single-output graphs; pass output= to pick one")
        output = 0
    rng = np.random.default_rng(seed)
    truth = g.true_gradient_graph()
    scaled_parts: dict[int, list] = {n.id: [] for n in g.inputs}
    true_parts: dict[int, list] = {n.id: [] for n in g.inputs}
    for _ in range(trials):
        vals = {n.id: rng.standard_normal(n.shape) for n in g.inputs}
        grads = [np.zeros(g.nodes[o].shape) for o in g.outputs]
        grads[output] = rng.standard_normal(g.nodes[g.outputs[output]].shape)
        _, tape = g.forward(vals)
        gs = g.backward(tape, grads)
        _, tape_t = truth.forward(vals)
        gt = truth.backward(tape_t, grads)
        for k in gs:
            scaled_parts[k].append(np.ravel(gs[k]))
            true_parts[k].append(np.ravel(gt[k]))
    ratios, residuals = {}, {}
    ok = True
    worst = ""
    for n in g.inputs:
        s = np.concatenate(scaled_parts[n.id])
        t = np.concatenate(true_parts[n.id])
        tt = float(t @ t)
        if tt == 0.0:
            if np.any(s != 0):
                ok, worst = False, f"{n.name}: nonzero gradient where the true gradient vanishes"
            continue
        c = float(s @ t) / tt
        res = float(np.linalg.norm(s - c * t) / max(np.linalg.norm(s), 1e-300))
        ratios[n.name] = c
        residuals[n.name] = res
        if not res < tol:
            ok = False
            worst = f"{n.name}: gradient is not a constant multiple of the true gradient (residual {res:.3g})"
    return VerifyReport(ok, ratios, residuals, worst or "scaled op: gradients are constant multiples")


# ---------------------------------------------------------------------------
# finite differences


def gradcheck(
    g: Graph,
    values: Mapping[int | str, np.ndarray],
    eps: float = 1e-6,
    seed: int = 0,
    max_elems: int = 64,
    floor: float = 1e-7,
) -> float:
    """Max relative deviation between backward and central finite differences.

    The scalar probed is <r, output> for a fixed random r. Up to ``max_elems``
    elements per input are perturbed. Differences are taken against the true
    gradient, so run this on graphs whose factors satisfy alpha == beta.
    """
    rng = np.random.default_rng(seed)
    vals = {g.node(k).id: np.array(v, dtype=np.float64) for k, v in values.items()}
    probe = rng.standard_normal(g.nodes[g.outputs[0]].shape)

    def scalar(vs):
        (out, *_), _ = g.forward(vs)
        return float(np.sum(probe * out))

    _, tape = g.forward(vals)
    grads = g.backward(tape, [probe] + [np.zeros(g.nodes[o].shape) for o in g.outputs[1:]])
    worst = 0.0
    for nid, v in vals.items():
        flat = v.ravel()
        idx = np.arange(flat.size)
        if flat.size > max_elems:
            idx = rng.choice(flat.size, max_elems, replace=False)
        ana = grads[nid].ravel()
        for k in idx:
            old = flat[k]
            flat[k] = old + eps
            up = scalar(vals)
            flat[k] = old - eps
            down = scalar(vals)
            flat[k] = old
            num = (up - down) / (2 * eps)
            dev = abs(num - ana[k]) / max(abs(num), abs(ana[k]), floor)
            worst = max(worst, dev)
    return worst


def single_op_graph(op: str, shapes: Sequence[Sequence[int]], scale: ScaleFactors | None = None, **attrs) -> Graph:
    """A graph holding one op applied to fresh data inputs x0, x1, ..."""
    g = Graph()
    ins = [g.add_input(s, "data", f"x{i}") for i, s in enumerate(shapes)]
    g.mark_output(g.apply_op(op, ins, scale, "op", **attrs))
    return g.freeze()
