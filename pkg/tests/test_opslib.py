from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy import stats as sps

from unitscale import opslib as O
from unitscale.graph import Graph, GraphError, ScaleFactors, constraint_violations, gradcheck, verify_scaled_op

# ---------------------------------------------------------------------------
# compendium


def test_compendium_closed_forms():
    f = O.factors("matmul", b=16, m=1024, n=256)
    assert f["alpha"] == pytest.approx(1 / 32)
    assert f["betas"] == pytest.approx({"x": 1 / 16, "w": 1 / 4})
    assert O.factors("sum", n=100)["alpha"] == pytest.approx(0.1)
    f = O.factors("weighted_add", gammas=[3.0, 4.0])
    assert f["alpha"] == pytest.approx(0.2)
    assert f["betas"] == pytest.approx({"x0": 1 / 3, "x1": 1 / 4})
    assert O.factors("softmax_xent", s=5)["betas"]["x"] == pytest.approx(2.5)
    assert O.factors("layer_norm", b=64)["betas"]["w"] == pytest.approx(1 / 8)
    # missing dims stay symbolic
    assert O.factors("matmul", m=4)["betas"]["x"] is None


def test_compendium_unknown_and_json():
    with pytest.raises(KeyError):
        O.factors("conv")
    names = {d["op"] for d in O.compendium_json()}
    assert names == set(O.COMPENDIUM)
    assert {"matmul", "relu", "gelu", "softmax_xent", "layer_norm"} <= names


def test_relu_constants_closed_form():
    # oracle: numeric integration over the standard normal
    m2, _ = integrate.quad(lambda x: x * x * sps.norm.pdf(x), 0, np.inf)
    m1, _ = integrate.quad(lambda x: x * sps.norm.pdf(x), 0, np.inf)
    assert O.RELU_ALPHA == pytest.approx(1 / math.sqrt(m2 - m1**2), rel=1e-9)
    assert O.RELU_BETA == pytest.approx(math.sqrt(2))


@pytest.mark.parametrize("op", ["relu", "gelu", "tanh", "sigmoid"])
def test_activation_constants_match_empirical(op):
    sf, sg = O.empirical_scale(op, 2 * 10**6, seed=1)
    a, b = O.ACTIVATION_FACTORS[op]
    # the fitted constants carry four significant figures
    assert a * sf == pytest.approx(1, abs=3e-3)
    assert b * sg == pytest.approx(1, abs=3e-3)


def test_empirical_scale_callable_matches_name():
    a = O.empirical_scale("tanh", 10**5, seed=3)
    b = O.empirical_scale(np.tanh, 10**5, seed=3)
    assert a == pytest.approx(b, rel=1e-6)


# ---------------------------------------------------------------------------
# builders


def test_scaled_softmax_is_roughly_unit():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((512, 256))
    out, (gx,) = O.evaluate(O.scaled_softmax, [x], grad=rng.standard_normal(x.shape))
    np.testing.assert_allclose(out.sum(-1), 256, rtol=1e-12)
    # lognormal tails keep these off 1 but inside the unit band
    assert 0.5 < out.std() < 2 and 0.5 < gx.std() < 2


def test_scaled_softmax_rejects_singleton():
    g = Graph()
    x = g.add_input((4, 1))
    with pytest.raises(GraphError):
        O.scaled_softmax(g, x)


@pytest.mark.parametrize("s", [2, 10, 1000])
def test_scaled_xent_unit_grad_at_uniform_logits(s):
    b = 64
    rng = np.random.default_rng(s)
    t = np.eye(s)[rng.integers(0, s, b)]
    loss, (gx, _) = O.evaluate(O.scaled_softmax_xent, [np.zeros((b, s)), t])
    assert loss == pytest.approx(b * math.log(s))
    assert gx.std() == pytest.approx(1.0, rel=1e-9)


def test_scaled_layer_norm_grads():
    b, d = 4096, 64
    rng = np.random.default_rng(1)
    x = 3 + 5 * rng.standard_normal((b, d))
    out, (gx, gw, gc) = O.evaluate(
        O.scaled_layer_norm, [x, np.ones(d), np.zeros(d)], grad=rng.standard_normal((b, d)),
        kinds=["data", "param", "param"],
    )
    assert out.std() == pytest.approx(1, rel=1e-6)
    assert gw.std() == pytest.approx(1, rel=0.2)
    assert gc.std() == pytest.approx(1, rel=0.2)
    assert gx.std() == pytest.approx(1 / 5, rel=0.05)  # 1/sigma of the input


def test_scaled_sum_and_weighted_add():
    x = np.random.default_rng(2).standard_normal(10**4)
    out, (gx,) = O.evaluate(O.scaled_sum, [x])
    assert out == pytest.approx(x.sum() / 100)
    np.testing.assert_array_equal(gx, np.ones_like(x))
    a, b = np.ones(3), 2 * np.ones(3)
    out, (ga, gb) = O.evaluate(lambda g, p, q: O.weighted_add(g, [p, q], [3.0, 4.0]), [a, b])
    np.testing.assert_allclose(out, (3 * a + 4 * b) / 5)
    np.testing.assert_allclose(ga, np.ones(3) * 3 / 3)
    np.testing.assert_allclose(gb, np.ones(3))


def test_weighted_add_default_and_errors():
    g = Graph()
    xs = [g.add_input((2,)) for _ in range(4)]
    y = O.weighted_add(g, xs)
    assert g.nodes[y].attrs["gammas"] == pytest.approx([0.5] * 4)
    with pytest.raises(GraphError):
        O.weighted_add(g, xs, [1.0])
    with pytest.raises(ValueError):
        O.weighted_add(g, xs[:2], [1.0, -1.0])


@pytest.mark.parametrize("constrained", [False, True])
def test_scaled_matmul_factors(constrained):
    g = Graph()
    x = g.add_input((16, 64))
    w = g.add_input((64, 256), "param")
    y = O.scaled_matmul(g, x, w, constrained)
    sf = g.nodes[y].scale
    if constrained:
        assert sf.alpha == sf.betas[0] == pytest.approx((64 * 256) ** -0.25)
    else:
        assert (sf.alpha, sf.betas[0]) == pytest.approx((1 / 8, 1 / 16))
    assert sf.betas[1] == pytest.approx(1 / 4)


# ---------------------------------------------------------------------------
# residuals


def test_residual_rewrite_preserves_forward():
    def branch(g, h):
        return g.apply_op("tanh", [h])

    x = np.linspace(-2, 2, 7)
    out, (gx,) = O.evaluate(lambda g, i: O.residual_rewrite(g, i, branch, 0.3), [x])
    np.testing.assert_allclose(out, 0.3 * np.tanh(x), rtol=1e-15)
    # gradient reaches x scaled by gamma only once, at the entry
    np.testing.assert_allclose(gx, 0.3 * (1 - np.tanh(x) ** 2), rtol=1e-14)


def test_residual_rewrite_pair_not_a_violation():
    g = Graph()
    x = g.add_input((4, 8), "data", "x")
    y = O.residual_block(g, x, lambda gg, h: gg.apply_op("relu", [h]), O.ResidualScheme.fixed(0.3))
    g.mark_output(y)
    assert constraint_violations(g) == []
    g.freeze(strict=True)
    assert verify_scaled_op(g).is_scaled_op
    with pytest.raises(ValueError):
        O.residual_rewrite(g, x, lambda gg, h: h, 0.0)


def test_residual_scheme_weights():
    sk, br = O.ResidualScheme.fixed(0.2).weights()
    assert (sk**2, br**2) == pytest.approx((0.8, 0.2))
    rm = O.ResidualScheme("running_mean")
    assert [rm.weights(layer)[1] ** 2 for layer in (1, 2, 3)] == pytest.approx([1 / 2, 1 / 3, 1 / 4])
    with pytest.raises(ValueError):
        rm.weights(0)
    with pytest.raises(ValueError):
        O.ResidualScheme("fixed", 1.5)
    with pytest.raises(ValueError):
        O.ResidualScheme("sometimes")
    assert O.ResidualScheme("default").weights() == (1.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.99))
def test_fixed_weights_unit_norm(tau):
    sk, br = O.ResidualScheme.fixed(tau).weights()
    assert sk**2 + br**2 == pytest.approx(1)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_residual_tau_reproduces_plain_residual(sx, sf):
    tau, alpha = O.residual_tau(sx, sf)
    sk, br = O.ResidualScheme.fixed(tau).weights()
    # unit-scaled x/sx and f/sf mixed by (sk, br) equals alpha * (x + f)
    assert sk / sx == pytest.approx(alpha)
    assert br / sf == pytest.approx(alpha)


def test_residual_tau_errors():
    with pytest.raises(ValueError):
        O.residual_tau(0, 1)


def test_shared_param_weights():
    w = O.shared_param_weights([3.0, 4.0])
    assert w == pytest.approx([0.6, 0.8])
    with pytest.raises(ValueError):
        O.shared_param_weights([])


# ---------------------------------------------------------------------------
# alignment


def test_align_activation_matches_base():
    sigma = 0.1
    s1, s2 = O.align_activation("gelu", sigma, n_samples=10**6)
    rng = np.random.default_rng(9)
    u = rng.standard_normal(10**6)  # unit-scaled input
    g = Graph()
    x = g.add_input(u.shape, "data", "x")
    g.mark_output(O.aligned_activation(g, "gelu", x, s1, s2))
    g.freeze()
    (out,), _ = g.forward({"x": u})
    assert out.std() == pytest.approx(1, rel=0.01)
    # same shape of nonlinearity as the base model: a rescaled gelu(sigma * u)
    ref = sps.norm.cdf(sigma * u) * sigma * u
    np.testing.assert_allclose(out, s2 * ref, rtol=1e-12)


def test_align_activation_errors():
    with pytest.raises(ValueError):
        O.align_activation("gelu", 0.0)
    assert O.align_activation("gelu", 2.0, 4.0) == (2.0, 0.25)


# ---------------------------------------------------------------------------
# end to end


def test_unit_ffn_propagation():
    b, d, f = 2048, 256, 1024
    g = Graph()
    x = g.add_input((b, d), "data", "x")
    ws = []

    def branch(gg, h, k):
        w1 = gg.add_input((d, f), "param", f"w1_{k}")
        w2 = gg.add_input((f, d), "param", f"w2_{k}")
        ws.extend([w1, w2])
        return O.scaled_matmul(gg, O.scaled_gelu(gg, O.scaled_matmul(gg, h, w1)), w2)

    h = x
    for k in range(3):
        h = O.residual_block(g, h, lambda gg, hh, k=k: branch(gg, hh, k), O.ResidualScheme.fixed(0.5))
    g.mark_output(h)
    g.freeze()
    rng = np.random.default_rng(0)
    vals = {n.name: rng.standard_normal(n.shape) for n in g.inputs}
    (out,), tape = g.forward(vals)
    grads = g.backward(tape, [rng.standard_normal(out.shape)])
    assert 0.75 < out.std() < 1.33
    assert 0.75 < grads[x].std() < 1.33
    for w in ws:
        assert 0.5 < grads[w].std() < 2


OP_SHAPES = {
    "identity": [(3, 4)],
    "matmul": [(3, 4), (4, 5)],
    "add": [(3, 4), (3, 4)],
    "weighted_add": [(3, 4), (3, 4)],
    "mul": [(3, 4), (3, 4)],
    "square": [(3, 4)],
    "relu": [(3, 4)],
    "gelu": [(3, 4)],
    "tanh": [(3, 4)],
    "sigmoid": [(3, 4)],
    "softmax": [(3, 4)],
    "sum": [(3, 4)],
    "layer_norm": [(3, 4), (4,), (4,)],
}


@pytest.mark.parametrize("op", sorted(OP_SHAPES))
def test_collapsed_ops_exact_gradients(op):
    attrs = {"gammas": [0.6, 1.3]} if op == "weighted_add" else {}
    g = O.collapsed_op_graph(op, OP_SHAPES[op], 1.7, **attrs)
    rng = np.random.default_rng(3)
    vals = {f"x{i}": rng.standard_normal(s) + (0.3 if op == "relu" else 0) for i, s in enumerate(OP_SHAPES[op])}
    assert gradcheck(g, vals) < 1e-5


def test_collapsed_xent_exact_gradient():
    g = O.collapsed_op_graph("softmax_xent", [(3, 5), (3, 5)], 1.7, reduction="sum")
    rng = np.random.default_rng(4)
    vals = {"x0": rng.standard_normal((3, 5)), "x1": np.eye(5)[[0, 2, 4]]}
    assert gradcheck(g, vals) < 1e-5


def test_proposals_for_uses_compendium():
    g = Graph()
    x = g.add_input((8, 16))
    w = g.add_input((16, 4), "param")
    y = g.apply_op("matmul", [x, w])
    z = g.apply_op("mul", [y, y], ScaleFactors(2.0, (3.0, 3.0)))
    g.mark_output(z)
    p = O.proposals_for(g)
    assert p[y] == O.matmul_factors(8, 16, 4)
    assert p[z] == ScaleFactors(2.0, (3.0, 3.0))
    with pytest.raises(KeyError):
        O.compendium_scale_factors("mul", [(2,), (2,)])
