import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dldmf import autodiff
from dldmf.autodiff import Dual2, TapeError, forward_dual, grad_weights, record
from dldmf.errors import ConfigurationError
from dldmf.networks import NetworkWeights, eval_net, init_network

from conftest import dense, polynomial_net, rel_err


def test_seed_and_constant():
    s = Dual2.seed(2.0)
    c = Dual2.constant(2.0)
    assert (float(s.d1), float(s.d2)) == (1.0, 0.0)
    assert (float(c.d1), float(c.d2)) == (0.0, 0.0)


def test_square_of_seed_is_exact():
    x = Dual2.seed(3.0)
    assert tuple(float(v) for v in x * x) == (9.0, 6.0, 2.0)
    assert tuple(float(v) for v in x**2) == (9.0, 6.0, 2.0)


def test_sin_at_origin():
    assert tuple(float(v) for v in Dual2.seed(0.0).sin()) == (0.0, 1.0, -0.0)


def test_product_rule_second_order():
    a = Dual2(jnp.float64(1.5), jnp.float64(-0.3), jnp.float64(0.7))
    b = Dual2(jnp.float64(-2.0), jnp.float64(0.4), jnp.float64(1.1))
    p = a * b
    assert float(p.d2) == pytest.approx(0.7 * -2.0 + 2 * -0.3 * 0.4 + 1.5 * 1.1, rel=1e-15)


UNARY = {
    "tanh": (lambda d: d.tanh(), np.tanh),
    "sin": (lambda d: d.sin(), np.sin),
    "cos": (lambda d: d.cos(), np.cos),
    "exp": (lambda d: d.exp(), np.exp),
    "recip": (lambda d: d.reciprocal(), lambda x: 1.0 / x),
    "cube": (lambda d: d**3, lambda x: x**3),
    "quot": (lambda d: (d * d + 1.0) / (d + 3.0), lambda x: (x * x + 1.0) / (x + 3.0)),
    "mix": (lambda d: 2.0 - d * autodiff.exp(d) + d.sin() * d.cos(), lambda x: 2.0 - x * np.exp(x) + np.sin(x) * np.cos(x)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitives_match_finite_differences(name, rng):
    dual_fn, plain = UNARY[name]
    xs = rng.uniform(0.3, 1.5, 100) * rng.choice([-1.0, 1.0], 100)  # away from the pole of 1/x
    out = dual_fn(Dual2.seed(jnp.asarray(xs)))
    # fourth-order central stencils
    h = 1e-3
    f = [plain(xs + k * h) for k in (-2, -1, 0, 1, 2)]
    fd1 = (f[0] - 8 * f[1] + 8 * f[3] - f[4]) / (12 * h)
    fd2 = (-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * h * h)
    np.testing.assert_allclose(np.asarray(out.value), plain(xs), rtol=1e-14, atol=1e-15)
    assert rel_err(out.d1, fd1, floor=1e-2) < 1e-5
    assert rel_err(out.d2, fd2, floor=1e-2) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_chain_rule_composition(x, a, b):
    # f(x) = tanh(a x + b)^2 by hand
    d = (Dual2.seed(x) * a + b).tanh()
    sq = d * d
    t = math.tanh(a * x + b)
    s = 1 - t * t
    assert float(sq.d1) == pytest.approx(2 * t * s * a, abs=1e-12)
    assert float(sq.d2) == pytest.approx(2 * a * a * (s * s - 2 * t * t * s), abs=1e-12)


def test_forward_dual_square_network():
    net = polynomial_net(0.0, 1.0, extra_inputs=0, name="sq")
    out = forward_dual(net, [3.0], 0)
    assert float(out.value[0]) == pytest.approx(9.0, rel=1e-4)
    assert float(out.d1[0]) == pytest.approx(6.0, rel=1e-4)
    assert float(out.d2[0]) == pytest.approx(2.0, rel=1e-4)


def test_forward_dual_odd_network_at_origin():
    # a single tanh unit has the same 2-jet as sin at 0
    net = NetworkWeights("odd", [dense([[1.0]], [0.0], "tanh"), dense([[1.0]], [0.0])])
    out = forward_dual(net, [0.0], 0)
    assert tuple(float(v[0]) for v in out) == (0.0, 1.0, 0.0)


def test_forward_dual_random_net_against_fd():
    net = init_network("probe", [3, 16, 16, 2], seed=7)
    x = np.array([0.7, -0.2, 0.4])
    out = forward_dual(net, x, 0)

    def f(v):
        y = x.copy()
        y[0] = v
        return np.asarray(eval_net(net, y))

    h = 1e-4
    fd1 = (f(0.7 + h) - f(0.7 - h)) / (2 * h)
    fd2 = (f(0.7 + h) - 2 * f(0.7) + f(0.7 - h)) / (h * h)
    assert rel_err(out.d1, fd1) < 1e-5
    assert rel_err(out.d2, fd2, floor=1e-3) < 1e-4
    np.testing.assert_array_equal(np.asarray(out.value), np.asarray(eval_net(net, x)))


def test_forward_dual_width_mismatch():
    net = init_network("probe", [3, 4, 1], seed=0)
    with pytest.raises(ConfigurationError):
        forward_dual(net, [1.0, 2.0], 0)
    with pytest.raises(ConfigurationError):
        forward_dual(net, [1.0, 2.0, 3.0], 5)


def test_grad_quadratic_and_dead_variable():
    w = {"w": jnp.float64(3.0), "unused": jnp.float64(1.0)}
    g = grad_weights(lambda p: p["w"] ** 2, w)
    assert float(g["w"]) == 6.0
    assert float(g["unused"]) == 0.0
    g = grad_weights(lambda p: jnp.float64(4.0) + 0.0 * p["w"], w)
    assert float(g["w"]) == 0.0


def test_grad_rejects_non_scalar_root():
    with pytest.raises(TapeError):
        grad_weights(lambda p: p * 2.0, jnp.ones(3))


def test_grad_linearity(rng):
    net = init_network("lin", [2, 8, 1], seed=1)
    xs = jnp.asarray(rng.normal(size=(10, 2)))

    def l1(n):
        return jnp.sum(eval_net(n, xs) ** 2)

    def l2(n):
        return jnp.sum(jnp.sin(eval_net(n, xs)))

    g_sum = grad_weights(lambda n: l1(n) + l2(n), net)
    g1, g2 = grad_weights(l1, net), grad_weights(l2, net)
    for a, b, c in zip(jax.tree.leaves(g_sum), jax.tree.leaves(g1), jax.tree.leaves(g2)):
        np.testing.assert_allclose(np.asarray(a), np.asarray(b) + np.asarray(c), rtol=1e-12, atol=1e-12)


def test_reverse_over_forward_matches_fd(rng):
    # loss built from second-order jets, differentiated w.r.t. weights
    net = init_network("rof", [1, 6, 6, 1], seed=2)
    xs = jnp.asarray(rng.uniform(-1, 1, 8))

    def loss(n):
        jet = autodiff.push_dual(n, Dual2.seed(xs)[..., None])
        return jnp.mean((jet.d2 + jet.d1 * jet.value) ** 2)

    g = grad_weights(loss, net)
    leaves, treedef = jax.tree.flatten(net)
    gl = jax.tree.leaves(g)
    for _ in range(5):
        li = int(rng.integers(len(leaves)))
        idx = tuple(int(rng.integers(s)) for s in leaves[li].shape)
        h = 1e-6

        def at(delta):
            mod = list(leaves)
            mod[li] = leaves[li].at[idx].add(delta)
            return float(loss(jax.tree.unflatten(treedef, mod)))

        fd = (at(h) - at(-h)) / (2 * h)
        assert abs(float(gl[li][idx]) - fd) <= 1e-4 * max(abs(fd), 1e-6)


def test_tape_is_topologically_ordered():
    net = init_network("tape", [2, 4, 1], seed=0)
    tape = record(lambda n: jnp.sum(jnp.tanh(eval_net(n, jnp.ones(2)))), net)
    assert tape[0].op == "input"
    assert sum(node.op == "input" for node in tape) == len(jax.tree.leaves(net))
    for i, node in enumerate(tape):
        assert all(p < i for p in node.parents)
