import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vpl import autodiff as ad
from vpl.autodiff import (ContractError, DegenerateVectorError, EmptyInputError, Graph, ShapeError,
                          backward, finite_diff_check)

from conftest import numgrad

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def grad_of(build, **inputs):
    g = Graph()
    leaves = {k: g.leaf(v, name=k) for k, v in inputs.items()}
    return backward(g, build(leaves))


def value_of(build, **inputs):
    g = Graph()
    return build({k: g.leaf(v, name=k) for k, v in inputs.items()}).value


# ----------------------------------------------------------------- matmul

def test_matmul_identity():
    M = np.arange(12.0).reshape(3, 4)
    g = Graph()
    np.testing.assert_array_equal((g.const(np.eye(3)) @ g.const(M)).value, M)


def test_matmul_hand_example():
    g = Graph()
    out = g.const([[1.0, 2.0], [3.0, 4.0]]) @ g.const([[1.0], [1.0]])
    np.testing.assert_array_equal(out.value, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    g = Graph()
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(g.const(np.ones((2, 3))), g.const(np.ones((2, 3))))


def test_matmul_backward_matches_numeric():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    W = rng.standard_normal((4, 3))
    grads = grad_of(lambda L: ad.sum((L["a"] @ L["b"]) * W), a=a, b=b)
    np.testing.assert_allclose(grads["a"], numgrad(lambda x: np.sum((x @ b) * W), a), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(grads["b"], numgrad(lambda x: np.sum((a @ x) * W), b), rtol=1e-6, atol=1e-8)


# ------------------------------------------------------------ elementwise

def test_hadamard_with_ones_is_identity():
    g = Graph()
    v = np.array([1.5, -2.0, 3.0])
    np.testing.assert_array_equal(ad.elementwise("hadamard", g.const(v), g.const(np.ones(3))).value, v)


def test_safe_log_clamps_zero():
    g = Graph()
    assert ad.elementwise("safe-log", g.const(0.0)).value == pytest.approx(np.log(1e-8))


def test_binary_tags_require_identical_shapes():
    g = Graph()
    with pytest.raises(ShapeError):
        ad.elementwise("add", g.const(np.ones(3)), g.const(np.ones((3, 1))))
    with pytest.raises(ContractError):
        ad.elementwise("hadamard", g.const(np.ones(3)))
    with pytest.raises(ContractError):
        ad.elementwise("tanh", g.const(np.ones(3)))


def test_scale_tag():
    g = Graph()
    np.testing.assert_array_equal(ad.elementwise("scale", g.const([1.0, -2.0]), 3).value, [3.0, -6.0])


def test_relu_gradient_mixed_signs():
    v = np.array([-2.0, -0.5, 0.3, 1.7, -1.1, 2.4])
    grads = grad_of(lambda L: ad.sum(ad.relu(L["v"]) * L["v"]), v=v)
    np.testing.assert_allclose(grads["v"], numgrad(lambda x: np.sum(np.maximum(x, 0) * x), v), atol=1e-7)


def test_relu_subgradient_at_zero_is_zero():
    grads = grad_of(lambda L: ad.sum(ad.relu(L["v"])), v=np.array([0.0, 1.0]))
    np.testing.assert_array_equal(grads["v"], [0.0, 1.0])


@pytest.mark.parametrize("tag,ref", [("sigmoid", lambda x: 1 / (1 + np.exp(-x))), ("exp", np.exp),
                                     ("safe-log", lambda x: np.log(np.maximum(x, 1e-8)))])
def test_unary_gradients(tag, ref):
    v = np.array([0.3, 1.2, 2.5, 0.05])
    grads = grad_of(lambda L: ad.sum(ad.elementwise(tag, L["v"])), v=v)
    np.testing.assert_allclose(grads["v"], numgrad(lambda x: ref(x).sum(), v), rtol=1e-6)


def test_safe_log_gradient_zero_below_clamp():
    grads = grad_of(lambda L: ad.sum(ad.log(L["v"])), v=np.array([1e-12, 0.5]))
    assert grads["v"][0] == 0.0
    assert grads["v"][1] == pytest.approx(2.0)


def test_sigmoid_stable_for_large_inputs():
    g = Graph()
    out = ad.sigmoid(g.const([-800.0, 800.0])).value
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 1.0])


# ----------------------------------------------------------------- softmax

def test_softmax_zeros_uniform():
    g = Graph()
    np.testing.assert_allclose(ad.softmax(g.const(np.zeros(4))).value, [0.25] * 4)


def test_softmax_closed_form():
    g = Graph()
    np.testing.assert_allclose(ad.softmax(g.const([0.0, np.log(3.0)])).value, [0.25, 0.75], rtol=1e-12)


@given(arrays(np.float64, 6, elements=finite), st.floats(-100, 100))
def test_softmax_shift_invariance(v, c):
    g = Graph()
    np.testing.assert_allclose(ad.softmax(g.const(v + c)).value, ad.softmax(g.const(v)).value, atol=1e-12)


@given(arrays(np.float64, (3, 7), elements=st.floats(-1e3, 1e3)))
def test_softmax_is_probability_vector(v):
    g = Graph()
    p = ad.softmax(g.const(v)).value
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_gradient():
    rng = np.random.default_rng(1)
    v, w = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))

    def ref(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return np.sum(e / e.sum(axis=-1, keepdims=True) * w)

    grads = grad_of(lambda L: ad.sum(ad.softmax(L["v"]) * w), v=v)
    np.testing.assert_allclose(grads["v"], numgrad(ref, v), rtol=1e-6, atol=1e-9)


# ------------------------------------------------------------------ cosine

def test_cosine_examples():
    g = Graph()
    u = g.const([0.3, -1.2, 2.0])
    assert ad.cosine(u, u).value == pytest.approx(1.0)
    assert ad.cosine(u, g.const([-0.3, 1.2, -2.0])).value == pytest.approx(-1.0)
    assert float(ad.cosine(g.const([1.0, 0.0]), g.const([1.0, 1.0])).value) == pytest.approx(0.7071, abs=1e-4)


def test_cosine_degenerate():
    g = Graph()
    with pytest.raises(DegenerateVectorError):
        ad.cosine(g.const([0.0, 0.0]), g.const([1.0, 1.0]))


@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_cosine_bounded(u, v):
    if min(np.linalg.norm(u), np.linalg.norm(v)) < 1e-6:
        return
    g = Graph()
    c = float(ad.cosine(g.const(u), g.const(v)).value)
    assert -1.0 <= c <= 1.0


def test_cosine_gradient_both_inputs():
    rng = np.random.default_rng(2)
    u, v = rng.standard_normal(5), rng.standard_normal(5)

    def cos(a, b):
        return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))

    grads = grad_of(lambda L: ad.cosine(L["u"], L["v"]), u=u, v=v)
    np.testing.assert_allclose(grads["u"], numgrad(lambda x: cos(x, v), u), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(grads["v"], numgrad(lambda x: cos(u, x), v), rtol=1e-6, atol=1e-9)


# --------------------------------------------------------------- mean_pool

def test_mean_pool_examples():
    g = Graph()
    col = np.array([[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(ad.mean_pool(g.const(col)).value, [1.0, 2.0, 3.0])
    v = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(ad.mean_pool(g.const(np.stack([v, -v], axis=1))).value, np.zeros(3))


def test_mean_pool_empty():
    g = Graph()
    with pytest.raises(EmptyInputError):
        ad.mean_pool(g.const(np.zeros((3, 0))))


def test_mean_pool_gradient_spreads_evenly():
    m = np.random.default_rng(3).standard_normal((3, 4))
    grads = grad_of(lambda L: ad.sum(ad.mean_pool(L["m"])), m=m)
    np.testing.assert_allclose(grads["m"], np.full((3, 4), 0.25))
    np.testing.assert_allclose(grads["m"], numgrad(lambda x: x.mean(axis=-1).sum(), m), rtol=1e-7)


# ----------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    grads = grad_of(lambda L: ad.sum(L["v"]), v=np.arange(5.0))
    np.testing.assert_array_equal(grads["v"], np.ones(5))


def test_unreachable_leaf_gets_exact_zero():
    g = Graph()
    v = g.leaf(np.ones(3), name="v")
    g.leaf(np.full((2, 2), 7.0), name="w")
    grads = backward(g, ad.sum(v * v))
    assert np.array_equal(grads["w"], np.zeros((2, 2)))


def test_backward_requires_scalar():
    g = Graph()
    v = g.leaf(np.ones(3), name="v")
    with pytest.raises(ContractError):
        backward(g, v * v)


def test_duplicate_leaf_name_rejected():
    g = Graph()
    g.leaf(np.ones(2), name="a")
    with pytest.raises(ContractError):
        g.leaf(np.ones(2), name="a")


def test_graph_insertion_order_is_topological():
    g = Graph()
    a = g.leaf(np.ones(2), name="a")
    out = ad.sum(ad.relu(a * a) + a)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in n.parents:
            assert pos[id(p)] < pos[id(n)]
    assert g.nodes[-1] is out


def test_reused_node_accumulates_gradient():
    grads = grad_of(lambda L: ad.sum(L["x"] * L["x"] * L["x"]), x=np.array([2.0, -1.0]))
    np.testing.assert_allclose(grads["x"], [12.0, 3.0])


def test_take_and_embed_scatter_add():
    table = np.arange(12.0).reshape(4, 3)
    grads = grad_of(lambda L: ad.sum(ad.embed(L["t"], np.array([1, 1, 3]))), t=table)
    np.testing.assert_array_equal(grads["t"], [[0] * 3, [2] * 3, [0] * 3, [1] * 3])
    g = Graph()
    with pytest.raises(ShapeError):
        ad.embed(g.const(table), np.array([4]))


def test_operations_deterministic():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))

    def build(L):
        return ad.sum(ad.log(ad.softmax(ad.relu(L["a"] @ L["b"]))))

    g1, g2 = grad_of(build, a=a, b=b), grad_of(build, a=a, b=b)
    assert value_of(build, a=a, b=b) == value_of(build, a=a, b=b)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


# ------------------------------------------------------- finite_diff_check

def test_fdc_quadratic():
    w = np.random.default_rng(5).standard_normal(6)
    assert finite_diff_check(lambda g, L: ad.sum(L["w"] * L["w"]), {"w": w}) < 1e-8


def test_fdc_eps_range():
    with pytest.raises(ContractError):
        finite_diff_check(lambda g, L: ad.sum(L["w"]), {"w": np.ones(2)}, eps=1e-2)


def test_fdc_nonfinite_propagates():
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda g, L: ad.sum(L["w"]) * np.inf, {"w": np.ones(2)})


def test_fdc_skips_kinks():
    # pre-activations within 10 eps of zero are excluded; elsewhere relu is exact
    w = np.array([1e-6, -3e-6, 0.8, -0.9])
    assert finite_diff_check(lambda g, L: ad.sum(ad.relu(L["w"]) * 3.0), {"w": w}) < 1e-8


def test_fdc_detects_wrong_gradient():
    def bad(g, L):
        w = L["w"]
        # detach hides the second factor from backward, so analytic != numeric
        return ad.sum(w * ad.detach(w))
    assert finite_diff_check(bad, {"w": np.array([1.0, 2.0])}) > 0.3


def test_relation_loss_alone_fdc():
    from vpl.discriminators import relation_loss
    rng = np.random.default_rng(6)
    params = {k: rng.standard_normal((3, 5)) for k in ("h", "hs", "hh")}
    assert finite_diff_check(lambda g, L: relation_loss(L["h"], L["hs"], L["hh"]), params) < 1e-5


@pytest.mark.parametrize("seed", range(100))
def test_composite_ops_gradcheck_randomized(seed):
    rng = np.random.default_rng(seed)
    params = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((3, 4)), "c": rng.standard_normal(4)}

    def f(g, L):
        h = ad.relu(L["a"] @ L["b"]) + ad.sigmoid(L["a"] @ L["b"]) * ad.softplus(L["c"])
        p = ad.softmax(h + ad.exp(ad.scale(L["c"], 0.2)))
        return ad.sum(ad.log(p)) + ad.sum(ad.cosine(h, ad.concat([L["c"][None], L["c"][None]], axis=0))) \
            + ad.sum(ad.mean_pool(L["b"]))

    assert finite_diff_check(f, params) < 1e-4
