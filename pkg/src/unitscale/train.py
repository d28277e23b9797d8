"""Desk-scale training harness.

Toy FFN models built as graphs, SGD/Adam with per-tensor step multipliers,
simulated low precision on matmul inputs, loss scaling, and the trajectory
checks showing that scaled ops can be trained as reparameterised unscaled ops.
"""

from __future__ import annotations

import math
import string
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from unitscale import floatsim as fs
from unitscale import opslib as O
from unitscale import tensor as T
from unitscale.graph import NO_QUANT, Graph, ScaleFactors, gradient_scale_ratio, resolve_constraints

DIVERGENCE_STEPS = 20


class NonFiniteGradient(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# optimisers


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimiser {self.kind!r}")
        if self.lr < 0 or self.eps < 0:
            raise ValueError("lr and eps must be non-negative")


@dataclass
class OptimState:
    config: OptimConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    multipliers: dict[str, float] = field(default_factory=dict)


def init_optim(config: OptimConfig, params: Mapping[str, np.ndarray], multipliers=None) -> OptimState:
    st = OptimState(config, multipliers=dict(multipliers or {}))
    for k, p in params.items():
        st.m[k] = np.zeros_like(p)
        if config.kind == "adam":
            st.v[k] = np.zeros_like(p)
    return st


def _check(params, grads):
    for k, p in params.items():
        g = grads[k]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"{k}: gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(k)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState) -> dict:
    _check(params, grads)
    c = state.config
    out = {}
    for k, p in params.items():
        d = grads[k]
        if c.momentum:
            state.m[k] = c.momentum * state.m[k] + d
            d = state.m[k]
        out[k] = p - c.lr * state.multipliers.get(k, 1.0) * d
    state.step += 1
    return out


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState) -> dict:
    _check(params, grads)
    c = state.config
    state.step += 1
    t = state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        state.m[k] = c.beta1 * state.m[k] + (1 - c.beta1) * g
        state.v[k] = c.beta2 * state.v[k] + (1 - c.beta2) * g * g
        mhat = state.m[k] / (1 - c.beta1**t)
        den = np.sqrt(state.v[k] / (1 - c.beta2**t)) + c.eps
        # with eps = 0 an all-zero history gives a zero step rather than 0/0
        upd = np.divide(mhat, den, out=np.zeros_like(mhat), where=den > 0)
        out[k] = p - c.lr * state.multipliers.get(k, 1.0) * upd
    return out


def optim_step(params, grads, state: OptimState) -> dict:
    return (adam_step if state.config.kind == "adam" else sgd_step)(params, grads, state)


def lr_compensation(param_tags: Mapping[str, str], hidden_size: int, unit_scaled: bool = True) -> dict[str, float]:
    """Step-size multipliers: 1/sqrt(hidden) for non-projection parameters of unit-scaled models."""
    if hidden_size < 1:
        raise ValueError("hidden_size must be positive")
    low = hidden_size**-0.5 if unit_scaled else 1.0
    return {k: 1.0 if tag == "projection" else low for k, tag in param_tags.items()}


def flop_overhead(hidden_size: int, ops_per_matmul: float) -> float:
    """Extra FLOPs of applying scale factors, relative to an unscaled matmul."""
    if hidden_size <= 0 or ops_per_matmul < 0:
        raise ValueError("need hidden_size > 0 and ops_per_matmul >= 0")
    return ops_per_matmul / (2 * hidden_size)


# ---------------------------------------------------------------------------
# precision


@dataclass(frozen=True)
class PrecisionConfig:
    """Formats for matmul inputs; ``None`` keeps reference precision.

    Overflow goes to infinity so that it shows up as a non-finite gradient.
    Master weights always stay in reference precision.
    """

    activations: str | None = None  # activations and weights
    gradients: str | None = None
    loss_scale: float = 1.0

    def __post_init__(self):
        for f in (self.activations, self.gradients):
            if f is not None:
                fs.get_format(f)
        if not self.loss_scale > 0:
            raise ValueError("loss_scale must be positive")

    @classmethod
    def preset(cls, name: str, loss_scale: float = 1.0) -> "PrecisionConfig":
        presets = {
            "reference": (None, None),
            "fp32": ("FP32", "FP32"),
            "fp16": ("FP16", "FP16"),
            "fp8": ("FP8 E4 (a)", "FP8 E5 (a)"),
        }
        if name not in presets:
            raise ValueError(f"unknown precision {name!r}; choose from {sorted(presets)}")
        return cls(*presets[name], loss_scale=loss_scale)

    def quantizer(self):
        if self.activations is None and self.gradients is None:
            return NO_QUANT
        return MatmulQuantizer(self.activations, self.gradients)

    def to_dict(self) -> dict:
        return asdict(self)


class MatmulQuantizer:
    def __init__(self, activations: str | None, gradients: str | None):
        self.fa = fs.get_format(activations).with_overflow(fs.TO_INFINITY) if activations else None
        self.fg = fs.get_format(gradients).with_overflow(fs.TO_INFINITY) if gradients else None

    def activation(self, x):
        return x if self.fa is None else fs.quantize(x, self.fa)

    def gradient(self, g):
        return g if self.fg is None else fs.quantize(g, self.fg)


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    ffn_size: int = 256
    depth: int = 2
    in_dim: int | None = None  # None: inputs enter the residual stream directly
    classes: int = 16
    batch: int = 128
    scheme: O.ResidualScheme = O.ResidualScheme.fixed(0.5)
    norm: str = "none"  # none, pre, post
    unit_scaled: bool = True
    init: str | None = None  # unit, fan_in, 0.02; default unit / fan_in

    def __post_init__(self):
        if min(self.hidden, self.ffn_size, self.classes) < 2 or self.depth < 1 or self.batch < 1:
            raise ValueError("sizes must be >= 2 and depth >= 1")
        if self.norm not in ("none", "pre", "post"):
            raise ValueError(f"norm must be none, pre or post, got {self.norm!r}")
        if self.init not in (None, "unit", "fan_in", "0.02"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def init_scheme(self) -> str:
        return self.init or ("unit" if self.unit_scaled else "fan_in")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("scheme"), Mapping):
            d["scheme"] = O.ResidualScheme(**d["scheme"])
        return cls(**d)


@dataclass
class ToyModel:
    config: ModelConfig
    graph: Graph
    params: dict[str, np.ndarray]
    tags: dict[str, str]  # parameter name -> projection / norm
    data: str = "x"
    targets: str = "t"

    @property
    def in_dim(self) -> int:
        return self.graph.node(self.data).shape[1]

    def loss_and_grads(self, x, t, quantizer=None, loss_scale: float = 1.0, params=None):
        """Per-example loss and weight gradients (already divided by ``loss_scale``)."""
        values = dict(params or self.params)
        values[self.data], values[self.targets] = x, t
        (loss,), tape = self.graph.forward(values, quantizer)
        grads = self.graph.backward(tape, [np.asarray(loss_scale, dtype=np.float64)])
        wg = {k: grads[self.graph.node(k).id] / loss_scale for k in self.params}
        per_example = float(loss) / x.shape[0] if self.graph.nodes[self.graph.outputs[0]].attrs.get(
            "reduction", "sum"
        ) == "sum" else float(loss)
        return per_example, wg, tape

    def named_tensors(self, tape, include_grads: bool = True) -> dict[str, np.ndarray]:
        """Forward values, backward values and weight gradients by name (scalars left out)."""
        g = self.graph
        out = {}
        for n in g.nodes:
            if n.op in ("output",) or n.id not in tape.z or np.ndim(tape.z[n.id]) == 0:
                continue
            if n.name == self.targets:
                continue
            out[n.name] = tape.z[n.id]
            if include_grads and n.id in tape.grads and n.name != self.data:
                key = f"gradw:{n.name}" if n.op == "param" else f"grad:{n.name}"
                out[key] = tape.grads[n.id]
        return out


def _init(shape, scheme, rng):
    if scheme == "unit":
        return rng.standard_normal(shape)
    if scheme == "0.02":
        return 0.02 * rng.standard_normal(shape)
    return rng.standard_normal(shape) / math.sqrt(shape[0])


def build_unit_ffn(
    hidden: int = 64,
    ffn_size: int = 256,
    depth: int = 2,
    scheme: O.ResidualScheme | None = None,
    unit_scaled: bool = True,
    seed: int = 0,
    config: ModelConfig | None = None,
    **kw,
) -> ToyModel:
    """A residual stack of matmul -> gelu -> matmul blocks with a softmax cross-entropy head.

    Unit-scaled models use unit-variance init, compendium factors, the
    residual rewrite and cut-edge constraint resolution. Baselines use plain
    ops, fan-in (or 0.02) init and a mean-reduced loss.
    """
    if config is None:
        config = ModelConfig(
            hidden, ffn_size, depth, scheme=scheme or O.ResidualScheme.fixed(0.5), unit_scaled=unit_scaled, **kw
        )
    c = config
    unit = c.unit_scaled
    rng = np.random.default_rng(seed)
    g = Graph()
    params: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}

    def param(name, shape, tag="projection", fill=None):
        params[name] = np.full(shape, fill, dtype=np.float64) if fill is not None else _init(shape, c.init_scheme, rng)
        tags[name] = tag
        return g.add_input(shape, "param", name)

    def mm(x, w, name):
        return O.scaled_matmul(g, x, w, name=name) if unit else g.apply_op("matmul", [x, w], name=name)

    def norm(x, name):
        w = param(f"{name}.w", (c.hidden,), "norm", 1.0)
        b = param(f"{name}.c", (c.hidden,), "norm", 0.0)
        if unit:
            return O.scaled_layer_norm(g, x, w, b, name=name)
        return g.apply_op("layer_norm", [x, w, b], name=name)

    x = g.add_input((c.batch, c.in_dim or c.hidden), "data", "x")
    t = g.add_input((c.batch, c.classes), "data", "t")
    h = mm(x, param("enc.w", (c.in_dim, c.hidden)), "enc") if c.in_dim else x
    for layer in range(1, c.depth + 1):
        p = f"block{layer}"
        w1 = param(f"{p}.w1", (c.hidden, c.ffn_size))
        w2 = param(f"{p}.w2", (c.ffn_size, c.hidden))

        def branch(g, u, p=p, w1=w1, w2=w2):
            if c.norm == "pre":
                u = norm(u, f"{p}.norm")
            a = mm(u, w1, f"{p}.up")
            a = O.scaled_gelu(g, a, f"{p}.gelu") if unit else g.apply_op("gelu", [a], name=f"{p}.gelu")
            return mm(a, w2, f"{p}.down")

        h = O.residual_block(g, h, branch, c.scheme, layer, unit, name=f"{p}.res" if c.scheme.kind != "none" else "")
        if c.norm == "post":
            h = norm(h, f"{p}.postnorm")
    logits = mm(h, param("head.w", (c.hidden, c.classes)), "head")
    if unit:
        loss = O.scaled_softmax_xent(g, logits, t, "loss")
    else:
        loss = g.apply_op("softmax_xent", [logits, t], name="loss", reduction="mean")
    g.mark_output(loss)
    g.freeze()
    if unit:
        g = g.with_factors(resolve_constraints(g))
        g.freeze(strict=True)
    return ToyModel(c, g, params, tags)


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray  # one-hot targets
    name: str = ""

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y differ in length")

    @property
    def classes(self) -> int:
        return self.y.shape[1]

    def batches(self, batch: int, seed: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Endless shuffled batches, deterministic per seed."""
        if batch > len(self.x):
            raise ValueError("batch larger than dataset")
        rng = np.random.default_rng(seed)
        while True:
            order = rng.permutation(len(self.x))
            for i in range(0, len(order) - batch + 1, batch):
                idx = order[i : i + batch]
                yield self.x[idx], self.y[idx]


def _onehot(labels, k):
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def gaussian_mixture(n: int = 4096, dim: int = 64, classes: int = 16, separation: float = 3.0, seed: int = 0) -> Dataset:
    """Unit-variance Gaussian clusters around random centres ``separation`` apart on average."""
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((classes, dim)) * separation / math.sqrt(2 * dim)
    labels = rng.integers(0, classes, n)
    x = centres[labels] + rng.standard_normal((n, dim))
    x /= x.std()
    return Dataset(x, _onehot(labels, classes), "gaussian_mixture")


_WORDS = "the a unit scale model train float point loss grad weight small large sum of and to in is".split()


def byte_corpus(n_chars: int = 20000, seed: int = 0) -> str:
    """Deterministic pseudo-text over a small vocabulary of words."""
    rng = np.random.default_rng(seed)
    words = rng.choice(_WORDS, size=n_chars // 4)
    return " ".join(words)[:n_chars]


def byte_lm(context: int = 3, n_chars: int = 20000, seed: int = 0) -> Dataset:
    """Next-character prediction from the previous ``context`` characters (one-hot, unit RMS)."""
    text = byte_corpus(n_chars, seed)
    alphabet = sorted(set(text) | set(string.ascii_lowercase) | {" "})
    index = {ch: i for i, ch in enumerate(alphabet)}
    ids = np.array([index[ch] for ch in text])
    v = len(alphabet)
    rows = len(ids) - context
    x = np.zeros((rows, context * v))
    for j in range(context):
        x[np.arange(rows), j * v + ids[j : j + rows]] = 1.0
    x *= math.sqrt(v)
    return Dataset(x, _onehot(ids[context:], v), "byte_lm")


def make_dataset(name: str, **kw) -> Dataset:
    makers = {"gaussian_mixture": gaussian_mixture, "byte_lm": byte_lm}
    if name not in makers:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(makers)}")
    return makers[name](**kw)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    losses: list[tuple[int, float, bool]] = field(default_factory=list)  # (step, loss, skipped)
    stats: list[tuple[int, str, float, float]] = field(default_factory=list)
    histograms: dict[tuple[int, str], T.ExponentHistogram] = field(default_factory=dict)
    skipped: int = 0
    diverged: bool = False
    report: str = ""
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def final_loss(self, window: int = 10) -> float:
        vals = [l for _, l, s in self.losses if not s and math.isfinite(l)]
        if not vals:
            return math.nan
        return float(np.mean(vals[-window:]))

    def losses_csv(self) -> str:
        lines = ["step,loss,skipped"]
        lines += [f"{s},{l!r},{int(k)}" for s, l, k in self.losses]
        return "\n".join(lines) + "\n"

    def stats_csv(self) -> str:
        lines = ["step,tensor,mean,std"]
        lines += [f"{s},{n},{m!r},{d!r}" for s, n, m, d in self.stats]
        return "\n".join(lines) + "\n"

    def zero_fraction(self, prefix: str = "gradw:", step: int | None = None) -> float:
        """Fraction of elements that are exactly zero among recorded histograms of ``prefix`` tensors."""
        hs = [h for (s, n), h in self.histograms.items() if n.startswith(prefix) and (step is None or s == step)]
        tot = sum(h.total for h in hs)
        return sum(h.zero for h in hs) / tot if tot else 0.0


def _record(result, step, model, tape, grads, hist):
    tensors = model.named_tensors(tape)
    # weight gradients as seen by the optimiser (after any loss-scale division)
    tensors.update({f"gradw:{k}": v for k, v in grads.items()})
    for name, v in tensors.items():
        st = T.stats(v)
        result.stats.append((step, name, st.mean, st.std))
        if hist:
            result.histograms[(step, name)] = T.exponent_histogram(v)


def train_loop(
    model: ToyModel,
    dataset: Dataset,
    optim: OptimConfig,
    precision: PrecisionConfig | None = None,
    steps: int = 100,
    seed: int = 0,
    stats_every: int = 0,
    hist_every: int = 0,
    multipliers: Mapping[str, float] | None = None,
) -> TrainResult:
    """Train in place on a copy of the model's parameters; returns the loss curve and traces.

    Steps whose gradients are not finite are skipped. Training stops with
    ``diverged`` after DIVERGENCE_STEPS consecutive non-finite losses.
    """
    precision = precision or PrecisionConfig()
    q = precision.quantizer()
    params = {k: v.copy() for k, v in model.params.items()}
    state = init_optim(optim, params, multipliers)
    res = TrainResult()
    batches = dataset.batches(model.config.batch, seed)
    bad_run = 0
    for step in range(steps):
        x, t = next(batches)
        loss, grads, tape = model.loss_and_grads(x, t, q, precision.loss_scale, params)
        record_stats = stats_every and step % stats_every == 0
        record_hist = hist_every and step % hist_every == 0
        if record_stats or record_hist:
            _record(res, step, model, tape, grads, record_hist)
        bad_run = 0 if math.isfinite(loss) else bad_run + 1
        skipped = False
        try:
            params = optim_step(params, grads, state)
        except NonFiniteGradient as exc:
            skipped = True
            res.skipped += 1
            if not res.report:
                res.report = f"step {step}: non-finite gradient in {exc}"
        res.losses.append((step, loss, skipped))
        if bad_run >= DIVERGENCE_STEPS:
            res.diverged = True
            res.report = f"diverged: loss non-finite for {bad_run} consecutive steps (last step {step})"
            break
    res.params = params
    return res


# ---------------------------------------------------------------------------
# reparameterisation checks


def _probe_inputs(g: Graph, rng) -> dict[int, np.ndarray]:
    """Unit-normal data for every input; one-hot rows for softmax_xent targets."""
    targets = {n.inputs[1] for n in g.nodes if n.op == "softmax_xent"}
    vals = {}
    for n in g.inputs:
        if n.id in targets:
            b, s = n.shape
            vals[n.id] = _onehot(rng.integers(0, s, b), s)
        else:
            vals[n.id] = rng.standard_normal(n.shape)
    return vals


def _objective(g: Graph, rng):
    out_shape = g.nodes[g.outputs[0]].shape
    return np.ones(()) if out_shape == () else rng.standard_normal(out_shape)


def _grads(g: Graph, values, probe, params):
    vals = dict(values)
    vals.update(params)
    _, tape = g.forward(vals)
    gr = g.backward(tape, [probe])
    return {k: gr[k] for k in params}


def sgd_reparam_check(g: Graph, steps: int = 100, lr: float = 0.01, seed: int = 0) -> float:
    """Max |theta_t - theta*_t / sqrt(c)| between a scaled op under SGD and its unscaled equivalent.

    theta* trains the scaled graph. theta trains f_hat(theta) = F(sqrt(c) * theta),
    where F is the graph's forward function with exact gradients and c the
    per-parameter gradient ratio, starting from theta*_0 / sqrt(c).
    """
    rng = np.random.default_rng(seed)
    values = _probe_inputs(g, rng)
    probe = _objective(g, rng)
    pids = [n.id for n in g.params]
    if not pids:
        raise ValueError("graph has no parameters")
    c = {p: gradient_scale_ratio(g, p) for p in pids}
    root = {p: math.sqrt(c[p]) for p in pids}
    truth = g.true_gradient_graph()
    star = {p: values[p] for p in pids}
    theta = {p: values[p] / root[p] for p in pids}
    worst = 0.0
    for _ in range(steps):
        gs = _grads(g, values, probe, star)
        # gradient of F(sqrt(c) theta) is sqrt(c) * F'(sqrt(c) theta)
        gt = _grads(truth, values, probe, {p: root[p] * theta[p] for p in pids})
        star = {p: star[p] - lr * gs[p] for p in pids}
        theta = {p: theta[p] - lr * root[p] * gt[p] for p in pids}
        worst = max(worst, max(float(np.max(np.abs(theta[p] - star[p] / root[p]))) for p in pids))
    return worst


def adam_equivalence_check(
    g: Graph, steps: int = 100, lr: float = 1e-3, seed: int = 0, eps: float = 0.0, allow_eps: bool = False
) -> float:
    """Max |theta_t - theta*_t| between the scaled op and alpha * f, both under Adam from the same start.

    The equivalence needs eps = 0; other values raise unless ``allow_eps``.
    """
    if eps != 0 and not allow_eps:
        raise ValueError("Adam equivalence only holds with eps = 0 (pass allow_eps=True to measure the gap)")
    rng = np.random.default_rng(seed)
    values = _probe_inputs(g, rng)
    probe = _objective(g, rng)
    pids = [n.id for n in g.params]
    if not pids:
        raise ValueError("graph has no parameters")
    truth = g.true_gradient_graph()
    cfg = OptimConfig("adam", lr, eps=eps)
    keys = {p: str(p) for p in pids}
    a = {keys[p]: values[p] for p in pids}
    b = dict(a)
    sa, sb = init_optim(cfg, a), init_optim(cfg, b)
    worst = 0.0
    for _ in range(steps):
        ga = _grads(g, values, probe, {p: a[keys[p]] for p in pids})
        gb = _grads(truth, values, probe, {p: b[keys[p]] for p in pids})
        a = adam_step(a, {keys[p]: ga[p] for p in pids}, sa)
        b = adam_step(b, {keys[p]: gb[p] for p in pids}, sb)
        worst = max(worst, max(float(np.max(np.abs(a[k] - b[k]))) for k in a))
    return worst


def two_layer_scaled_model(
    b: int = 32, m: int = 16, h: int = 32, s: int = 8, seed: int = 0, random_factors: bool = False
) -> Graph:
    """matmul -> gelu -> matmul -> softmax_xent, unit-scaled and constraint-resolved.

    With ``random_factors`` the compendium proposals are replaced by random
    positive values before resolution, so the factors are arbitrary but the
    graph stays constraint-scaled.
    """
    rng = np.random.default_rng(seed)
    g = Graph()
    x = g.add_input((b, m), "data", "x")
    t = g.add_input((b, s), "data", "t")
    w1 = g.add_input((m, h), "param", "w1")
    w2 = g.add_input((h, s), "param", "w2")
    a = O.scaled_gelu(g, O.scaled_matmul(g, x, w1, name="up"), "gelu")
    out = O.scaled_softmax_xent(g, O.scaled_matmul(g, a, w2, name="head"), t, "loss")
    g.mark_output(out)
    g.freeze()
    props = g.factors()
    if random_factors:
        props = {
            k: ScaleFactors(float(np.exp(rng.uniform(-1, 1))), tuple(float(np.exp(rng.uniform(-1, 1))) for _ in f.betas))
            for k, f in props.items()
        }
    return g.with_factors(resolve_constraints(g, props)).freeze(strict=True)


def loss_scale_equivalence(
    model: ToyModel, dataset: Dataset, loss_scale: float, steps: int = 20, lr: float = 0.1, seed: int = 0
) -> float:
    """Max parameter difference between SGD runs with and without loss scaling, in reference precision."""
    cfg = OptimConfig("sgd", lr)
    a = train_loop(model, dataset, cfg, PrecisionConfig(), steps, seed)
    b = train_loop(model, dataset, cfg, PrecisionConfig(loss_scale=loss_scale), steps, seed)
    return max(float(np.max(np.abs(a.params[k] - b.params[k]))) for k in a.params)


def range_fraction(tensors: Sequence[np.ndarray], lo: float, hi: float) -> float:
    """Fraction of nonzero finite elements with lo <= |x| <= hi."""
    inside = total = 0
    for t in tensors:
        a = np.abs(np.asarray(t)).ravel()
        a = a[np.isfinite(a) & (a > 0)]
        inside += int(np.count_nonzero((a >= lo) & (a <= hi)))
        total += a.size
    return inside / total if total else 0.0


# ---------------------------------------------------------------------------
# run configurations


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    dataset: str = "gaussian_mixture"
    dataset_args: dict = field(default_factory=dict)
    optim: OptimConfig = OptimConfig()
    precision: PrecisionConfig = PrecisionConfig()
    steps: int = 100
    seed: int = 0
    stats_every: int = 0
    hist_every: int = 0
    lr_compensation: bool = False

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "dataset": self.dataset,
            "dataset_args": dict(self.dataset_args),
            "optim": asdict(self.optim),
            "precision": self.precision.to_dict(),
            "steps": self.steps,
            "seed": self.seed,
            "stats_every": self.stats_every,
            "hist_every": self.hist_every,
            "lr_compensation": self.lr_compensation,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        """Parse a run configuration; unknown keys raise ValueError naming the key."""
        _known(d, cls.__dataclass_fields__, "config")
        kw = dict(d)
        if "model" in kw:
            m = dict(kw["model"])
            _known(m, ModelConfig.__dataclass_fields__, "model")
            if isinstance(m.get("scheme"), Mapping):
                _known(m["scheme"], {"kind", "tau"}, "model.scheme")
            kw["model"] = ModelConfig.from_dict(m)
        if "optim" in kw:
            _known(kw["optim"], OptimConfig.__dataclass_fields__, "optim")
            kw["optim"] = OptimConfig(**kw["optim"])
        if "precision" in kw:
            p = kw["precision"]
            if isinstance(p, str):
                kw["precision"] = PrecisionConfig.preset(p)
            else:
                _known(p, PrecisionConfig.__dataclass_fields__, "precision")
                kw["precision"] = PrecisionConfig(**p)
        return cls(**kw)


def _known(d: Mapping, fields, where: str) -> None:
    if not isinstance(d, Mapping):
        raise ValueError(f"{where} must be an object")
    for k in d:
        if k not in fields:
            raise ValueError(f"unknown {where} key {k!r}; expected one of {sorted(fields)}")


def run(cfg: TrainConfig) -> tuple[ToyModel, TrainResult]:
    model = build_unit_ffn(config=cfg.model, seed=cfg.seed)
    ds_args = dict(cfg.dataset_args)
    if cfg.dataset == "gaussian_mixture":
        ds_args.setdefault("dim", cfg.model.in_dim or cfg.model.hidden)
        ds_args.setdefault("classes", cfg.model.classes)
    ds = make_dataset(cfg.dataset, **ds_args)
    if ds.x.shape[1] != model.in_dim or ds.classes != cfg.model.classes:
        raise ValueError(
            f"dataset gives {ds.x.shape[1]} features / {ds.classes} classes; "
            f"model expects {model.in_dim} / {cfg.model.classes}"
        )
    mult = lr_compensation(model.tags, cfg.model.hidden, cfg.model.unit_scaled) if cfg.lr_compensation else None
    res = train_loop(
        model, ds, cfg.optim, cfg.precision, cfg.steps, cfg.seed, cfg.stats_every, cfg.hist_every, mult
    )
    return model, res


def parity_configs(steps: int = 300, seed: int = 0) -> dict[str, TrainConfig]:
    """The FP16 parity experiment: a deep no-residual stack, unit-scaled vs 0.02-init baseline.

    Mean-reduced loss over 1024 rows and 0.02 init push the baseline's early
    gradients below the FP16 subnormal range; loss scaling by 2048 lifts them back.
    """
    arch = dict(hidden=64, ffn_size=256, depth=5, classes=16, batch=1024, scheme=O.ResidualScheme("none"))
    unit = ModelConfig(unit_scaled=True, **arch)
    base = ModelConfig(unit_scaled=False, init="0.02", **arch)
    data = {"n": 16384, "dim": 64, "classes": 16, "separation": 3.0, "seed": 0}
    opt = OptimConfig("adam", 1e-3)

    def cfg(model, prec, ls=1.0):
        return TrainConfig(
            model, "gaussian_mixture", data, opt, PrecisionConfig.preset(prec, ls), steps, seed, 0, steps // 5
        )

    return {
        "unit_fp32": cfg(unit, "fp32"),
        "unit_fp16": cfg(unit, "fp16"),
        "base_fp32": cfg(base, "fp32"),
        "base_fp16": cfg(base, "fp16"),
        "base_fp16_ls2048": cfg(base, "fp16", 2048.0),
    }
