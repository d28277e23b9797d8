"""Unit-scaled ops.

``COMPENDIUM`` lists the unconstrained scaling factors of each op as closed
forms in its dimensions. The ``scaled_*`` builders add the op to a
:class:`~unitscale.graph.Graph` with those factors; whether they survive as-is
or get merged by geometric mean is decided later by
:func:`~unitscale.graph.resolve_constraints`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from unitscale.graph import OPS, Graph, GraphError, ScaleFactors, single_op_graph

RELU_ALPHA = math.sqrt(2 / (1 - 1 / math.pi))
RELU_BETA = math.sqrt(2)

# fitted constants, four significant figures
ACTIVATION_FACTORS = {
    "relu": (RELU_ALPHA, RELU_BETA),
    "gelu": (1.701, 1.481),
    "tanh": (1.593, 1.467),
    "sigmoid": (4.802, 4.722),
}


@dataclass(frozen=True)
class CompendiumEntry:
    op: str
    formula: str
    dims: tuple[str, ...]
    factors: Callable[..., tuple[float | None, dict[str, float | None]]]

    def evaluate(self, **dims) -> dict:
        alpha, betas = self.factors(**dims)
        return {"op": self.op, "alpha": alpha, "betas": betas}

    def to_dict(self) -> dict:
        return {"op": self.op, "formula": self.formula, "dims": list(self.dims)}


def _pow(v, p):
    return None if v is None else float(v) ** p


def _matmul(b=None, m=None, n=None):
    return _pow(m, -0.5), {"x": _pow(n, -0.5), "w": _pow(b, -0.5)}


def _sum(n=None):
    return _pow(n, -0.5), {"x": 1.0}


def _weighted_add(gammas=None):
    if gammas is None:
        return None, {}
    gammas = [float(c) for c in gammas]
    if any(c <= 0 for c in gammas):
        raise ValueError("weighted_add needs positive weights")
    return sum(c * c for c in gammas) ** -0.5, {f"x{i}": 1 / c for i, c in enumerate(gammas)}


def _activation(name):
    a, b = ACTIVATION_FACTORS[name]
    return lambda: (a, {"x": b})


def _softmax(s=None):
    return (None if s is None else float(s)), {"x": None if s is None else float(s)}


def _softmax_xent(s=None):
    return 1.0, {"x": None if s is None else s / math.sqrt(s - 1)}


def _layer_norm(b=None):
    return 1.0, {"x": 1.0, "w": _pow(b, -0.5), "c": _pow(b, -0.5)}


COMPENDIUM: dict[str, CompendiumEntry] = {
    e.op: e
    for e in [
        CompendiumEntry("matmul", "alpha=m^-1/2, beta_x=n^-1/2, beta_w=b^-1/2", ("b", "m", "n"), _matmul),
        CompendiumEntry("sum", "alpha=n^-1/2, beta=1", ("n",), _sum),
        CompendiumEntry(
            "weighted_add", "alpha=(sum_i gamma_i^2)^-1/2, beta_i=1/gamma_i", ("gammas",), _weighted_add
        ),
        CompendiumEntry("relu", "alpha=sqrt(2/(1-1/pi)), beta=sqrt(2)", (), _activation("relu")),
        CompendiumEntry("gelu", "alpha=1.701, beta=1.481", (), _activation("gelu")),
        CompendiumEntry("tanh", "alpha=1.593, beta=1.467", (), _activation("tanh")),
        CompendiumEntry("sigmoid", "alpha=4.802, beta=4.722", (), _activation("sigmoid")),
        CompendiumEntry("softmax", "alpha=s, beta=s", ("s",), _softmax),
        CompendiumEntry("softmax_xent", "alpha=1, beta=s/sqrt(s-1)", ("s",), _softmax_xent),
        CompendiumEntry("layer_norm", "alpha=1, beta_x=1, beta_w=beta_c=b^-1/2", ("b",), _layer_norm),
    ]
}


def factors(op: str, **dims) -> dict:
    """Evaluate a compendium entry, e.g. ``factors("matmul", m=1024)``."""
    if op not in COMPENDIUM:
        raise KeyError(f"unknown op {op!r}; compendium has: {', '.join(COMPENDIUM)}")
    return COMPENDIUM[op].evaluate(**dims)


def compendium_json() -> list[dict]:
    return [e.to_dict() for e in COMPENDIUM.values()]


# ---------------------------------------------------------------------------
# graph builders


def _rows(shape) -> int:
    return int(np.prod(shape[:-1])) if len(shape) > 1 else 1


def matmul_factors(b: int, m: int, n: int, constrained: bool = False) -> ScaleFactors:
    if constrained:
        a = (m * n) ** -0.25
        return ScaleFactors(a, (a, b**-0.5))
    return ScaleFactors(m**-0.5, (n**-0.5, b**-0.5))


def scaled_matmul(g: Graph, x: int, w: int, constrained: bool = False, name: str = "") -> int:
    """``x[b, m] @ w[m, n]``; ``constrained`` forces alpha = beta_x = (mn)^-1/4 up front."""
    (b, m), (_, n) = g.nodes[x].shape, g.nodes[w].shape
    return g.apply_op("matmul", [x, w], matmul_factors(b, m, n, constrained), name)


def scaled_sum(g: Graph, x: int, name: str = "") -> int:
    n = int(np.prod(g.nodes[x].shape))
    return g.apply_op("sum", [x], ScaleFactors(n**-0.5, (1.0,)), name)


def weighted_add(g: Graph, xs: Sequence[int], gammas: Sequence[float] | None = None, name: str = "") -> int:
    """Sum of ``gamma_i * x_i`` normalised to unit output scale.

    Default weights are equal with squares summing to one.
    """
    if gammas is None:
        gammas = [len(xs) ** -0.5] * len(xs)
    gammas = [float(c) for c in gammas]
    if len(gammas) != len(xs):
        raise GraphError("one weight per input")
    if all(c == 0 for c in gammas):
        raise ValueError("weighted_add needs a nonzero weight")
    alpha, betas = _weighted_add(gammas)
    return g.apply_op(
        "weighted_add", xs, ScaleFactors(alpha, tuple(betas.values())), name, gammas=gammas
    )


def scaled_activation(g: Graph, op: str, x: int, name: str = "") -> int:
    a, b = ACTIVATION_FACTORS[op]
    return g.apply_op(op, [x], ScaleFactors(a, (b,)), name)


def scaled_relu(g: Graph, x: int, name: str = "") -> int:
    return scaled_activation(g, "relu", x, name)


def scaled_gelu(g: Graph, x: int, name: str = "") -> int:
    return scaled_activation(g, "gelu", x, name)


def scaled_tanh(g: Graph, x: int, name: str = "") -> int:
    return scaled_activation(g, "tanh", x, name)


def scaled_sigmoid(g: Graph, x: int, name: str = "") -> int:
    # applied as a pure multiplier: outputs keep a mean of about 0.5 * alpha
    return scaled_activation(g, "sigmoid", x, name)


def scaled_softmax(g: Graph, x: int, name: str = "") -> int:
    s = g.nodes[x].shape[-1]
    if s < 2:
        raise GraphError("softmax over fewer than two elements")
    return g.apply_op("softmax", [x], ScaleFactors(float(s), (float(s),)), name)


def scaled_softmax_xent(g: Graph, logits: int, targets: int, name: str = "") -> int:
    """Summed softmax cross entropy; logits gradient scaled by s/sqrt(s-1)."""
    s = g.nodes[logits].shape[-1]
    return g.apply_op(
        "softmax_xent", [logits, targets], ScaleFactors(1.0, (s / math.sqrt(s - 1), 1.0)), name, reduction="sum"
    )


def scaled_layer_norm(g: Graph, x: int, w: int, c: int, name: str = "") -> int:
    b = _rows(g.nodes[x].shape)
    return g.apply_op("layer_norm", [x, w, c], ScaleFactors(1.0, (1.0, b**-0.5, b**-0.5)), name)


def scaled_identity(g: Graph, x: int, alpha: float, beta: float, name: str = "", **attrs) -> int:
    return g.apply_op("identity", [x], ScaleFactors(alpha, (beta,)), name, **attrs)


_rewrite_ids = itertools.count()


def residual_rewrite(g: Graph, x: int, branch: Callable[[Graph, int], int], gamma: float, name: str = "") -> int:
    """Build ``gamma * branch(x)`` as ``id*(branch(id*(x, 1, gamma)), gamma, 1)``.

    The forward value is unchanged, but gradients inside the branch are not
    shrunk by gamma; the factor is applied once, where the branch is entered.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    tag = f"{name or 'rw'}#{next(_rewrite_ids)}"
    enter = scaled_identity(g, x, 1.0, gamma, f"{name}.enter" if name else "", rewrite=tag, role="enter")
    inner = branch(g, enter)
    return scaled_identity(g, inner, gamma, 1.0, f"{name}.exit" if name else "", rewrite=tag, role="exit")


# ---------------------------------------------------------------------------
# residual schemes


@dataclass(frozen=True)
class ResidualScheme:
    """How a residual block mixes skip and branch.

    kind: ``none`` (no skip), ``default`` (x + f(x)), ``fixed`` (tau) or
    ``running_mean``.
    """

    kind: str = "fixed"
    tau: float = 0.5

    def __post_init__(self):
        if self.kind not in ("none", "default", "fixed", "running_mean"):
            raise ValueError(f"unknown residual scheme {self.kind!r}")
        if self.kind == "fixed" and not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")

    @classmethod
    def fixed(cls, tau: float) -> "ResidualScheme":
        return cls("fixed", tau)

    def weights(self, layer: int = 1) -> tuple[float, float]:
        """(skip, branch) weights for block ``layer`` (blocks count from 1)."""
        if self.kind == "fixed":
            return math.sqrt(1 - self.tau), math.sqrt(self.tau)
        if self.kind == "running_mean":
            if layer < 1:
                raise ValueError("running-mean blocks are numbered from 1")
            return math.sqrt(layer / (layer + 1)), math.sqrt(1 / (layer + 1))
        if self.kind == "default":
            return 1.0, 1.0
        return 0.0, 1.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tau": self.tau}


def residual_block(
    g: Graph,
    x: int,
    branch: Callable[[Graph, int], int],
    scheme: ResidualScheme,
    layer: int = 1,
    unit_scaled: bool = True,
    name: str = "",
) -> int:
    if scheme.kind == "none":
        return branch(g, x)
    skip_w, branch_w = scheme.weights(layer)
    if not unit_scaled:
        f = branch(g, x)
        if scheme.kind == "default":
            return g.apply_op("add", [x, f], name=name)
        return g.apply_op("weighted_add", [x, f], name=name, gammas=[skip_w, branch_w])
    f = residual_rewrite(g, x, branch, branch_w, name=f"{name}.rw" if name else "")
    # the branch already carries its weight; this add only mixes in the skip
    return g.apply_op("weighted_add", [x, f], ScaleFactors(1.0, (1.0, 1.0)), name, gammas=[skip_w, 1.0])


# ---------------------------------------------------------------------------
# alignment and empirical scales


def _elementwise(f):
    """(forward, derivative) for an op name or a plain callable."""
    if isinstance(f, str):
        op = OPS[f]
        fwd = lambda x: op.forward([x], {}, None)  # noqa: E731
        der = lambda x: op.vjp([x], fwd(x), np.ones_like(x), {}, None)[0]  # noqa: E731
        return fwd, der
    h = 1e-5
    return f, lambda x: (f(x + h) - f(x - h)) / (2 * h)


def empirical_scale(f, n_samples: int = 10**6, seed: int = 0, sigma: float = 1.0) -> tuple[float, float]:
    """Std of f(X) and of f'(X) * G for X ~ N(0, sigma^2), G ~ N(0, 1)."""
    fwd, der = _elementwise(f)
    rng = np.random.default_rng(seed)
    x = sigma * rng.standard_normal(n_samples)
    g = rng.standard_normal(n_samples)
    return float(np.std(fwd(x))), float(np.std(der(x) * g))


def align_activation(
    f, sigma_in: float, sigma_out_base: float | None = None, n_samples: int = 10**6, seed: int = 0
) -> tuple[float, float]:
    """Pre/post factors so that f(s1 * x) * s2 matches a base model's activation.

    ``sigma_in`` is the activation's input scale in the base model and
    ``sigma_out_base`` its output scale there (estimated by Monte Carlo if omitted).
    """
    if not sigma_in > 0 or (sigma_out_base is not None and not sigma_out_base > 0):
        raise ValueError("scales must be positive")
    if sigma_out_base is None:
        sigma_out_base, _ = empirical_scale(f, n_samples, seed, sigma=sigma_in)
    return float(sigma_in), 1.0 / sigma_out_base


def aligned_activation(g: Graph, op: str, x: int, s1: float, s2: float, name: str = "") -> int:
    """f(s1 * x) * s2 as scaled identities around an unscaled op (all fully constrained)."""
    pre = scaled_identity(g, x, s1, s1)
    mid = g.apply_op(op, [pre])
    return scaled_identity(g, mid, s2, s2, name)


def residual_tau(sigma_x: float, sigma_fx: float) -> tuple[float, float]:
    """(tau, alpha) making a fixed(tau) residual reproduce x + f(x) up to alpha."""
    if not (sigma_x > 0 and sigma_fx > 0):
        raise ValueError("scales must be positive")
    total = sigma_x**2 + sigma_fx**2
    return sigma_fx**2 / total, 1 / math.sqrt(total)


def shared_param_weights(grad_scales: Sequence[float]) -> list[float]:
    """Weights for summing gradients of a reused parameter so their ratio matches a base model.

    Generalises the residual rule to any number of uses: weights are
    proportional to the base-model gradient scales and normalised to unit norm.
    """
    if not grad_scales or any(not s > 0 for s in grad_scales):
        raise ValueError("need positive gradient scales")
    norm = math.sqrt(sum(s * s for s in grad_scales))
    return [s / norm for s in grad_scales]


# ---------------------------------------------------------------------------
# eager helpers


def evaluate(
    build: Callable[..., int],
    arrays: Sequence[np.ndarray],
    grad: np.ndarray | None = None,
    kinds: Sequence[str] | None = None,
    **kw,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run a one-op graph eagerly: returns (output, gradients wrt each array).

    ``build(g, *input_ids, **kw)`` adds the op. ``grad`` defaults to ones.
    """
    g = Graph()
    kinds = kinds or ["data"] * len(arrays)
    ids = [g.add_input(np.shape(a), k, f"x{i}") for i, (a, k) in enumerate(zip(arrays, kinds))]
    g.mark_output(build(g, *ids, **kw))
    g.freeze()
    (out,), tape = g.forward({i: a for i, a in zip(ids, arrays)})
    grad = np.ones_like(out) if grad is None else grad
    grads = g.backward(tape, [grad])
    return out, [grads[i] for i in ids]


def collapsed_op_graph(op: str, shapes, value: float = 1.0, **attrs) -> Graph:
    """A single op with alpha == beta == value; its backward is the exact gradient of alpha * f."""
    arity = len(shapes)
    return single_op_graph(op, shapes, ScaleFactors.collapsed(value, arity), **attrs)


def compendium_scale_factors(op: str, shapes: Sequence[Sequence[int]], **attrs) -> ScaleFactors:
    """Unconstrained table factors for ``op`` given its input shapes."""
    if op == "matmul":
        (b, m), (_, n) = shapes
        return matmul_factors(b, m, n)
    if op == "sum":
        return ScaleFactors(int(np.prod(shapes[0])) ** -0.5, (1.0,))
    if op == "weighted_add":
        a, betas = _weighted_add(attrs["gammas"])
        return ScaleFactors(a, tuple(betas.values()))
    if op in ACTIVATION_FACTORS:
        a, b = ACTIVATION_FACTORS[op]
        return ScaleFactors(a, (b,))
    if op == "softmax":
        s = float(shapes[0][-1])
        return ScaleFactors(s, (s,))
    if op == "softmax_xent":
        s = shapes[0][-1]
        return ScaleFactors(1.0, (s / math.sqrt(s - 1), 1.0))
    if op == "layer_norm":
        b = _rows(shapes[0])
        return ScaleFactors(1.0, (1.0, b**-0.5, b**-0.5))
    raise KeyError(op)


def proposals_for(g: Graph, overrides: Mapping[int, ScaleFactors] | None = None) -> dict[int, ScaleFactors]:
    """Compendium proposals for every op node; nodes outside the table keep their factors."""
    out = {}
    for n in g.nodes:
        if not n.is_op:
            continue
        try:
            out[n.id] = compendium_scale_factors(n.op, [g.nodes[i].shape for i in n.inputs], **n.attrs)
        except KeyError:
            out[n.id] = n.scale
    out.update(overrides or {})
    return out
