import dataclasses

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from dldmf.latent_dynamics import IntegratorConfig
from dldmf.model import Model, build_model
from dldmf.networks import DenseLayer, ModelConfig, NetworkWeights

SMALL = ModelConfig(
    d_x=4, d_p=3, d_z=3,
    encoder_hidden=(6,), latent_init_hidden=(6,), dynamics_hidden=(6, 6),
    time_encoder_hidden=(6,), decoder_width=6, decoder_depth=4, seed=3,
)


def jitter_biases(model: Model, scale=0.3, seed=0) -> Model:
    """Glorot init leaves biases at zero; random biases make derivative checks less special."""
    rng = np.random.default_rng(seed)
    nets = {}
    for name, net in model.nets.items():
        layers = [dataclasses.replace(l, bias=jnp.asarray(rng.normal(0, scale, np.shape(l.bias))))
                  for l in net.layers]
        nets[name] = NetworkWeights(name, layers)
    return model.with_nets(nets)


def small_model(kind="dldmf", seed=0, config=SMALL, step=1e-2) -> Model:
    m = build_model(dataclasses.replace(config, seed=seed), kind, (1.0, 0.0, 0.0), (5.0, 0.0, 0.0),
                    IntegratorConfig(step=step, max_steps=2000))
    return jitter_biases(m, seed=seed)


def dense(w, b, act="identity"):
    return DenseLayer(jnp.asarray(w, dtype=jnp.float64), jnp.asarray(b, dtype=jnp.float64), act)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), floor))


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def static_model():
    return small_model("static_fusion")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def flat(tree):
    return np.concatenate([np.ravel(np.asarray(x)) for x in jax.tree.leaves(tree)])


def polynomial_net(lin, quad, eps=1e-3, a=0.5, extra_inputs=0, name="dynamics"):
    """Two-layer tanh net approximating lin*x + quad*x**2 in its first input.

    Central combinations of tanh cancel odd/even terms, leaving O(eps^2) model error.
    Extra inputs are wired with zero weights.
    """
    t = np.tanh(a)
    t2 = -2.0 * t * (1.0 - t * t)  # tanh''(a)
    w1 = np.zeros((3, 1 + extra_inputs))
    w1[:, 0] = [eps, -eps, eps]
    b1 = [a, a, 0.0]
    c = quad / (eps * eps * t2)
    w2 = [[c, c, lin / eps]]
    b2 = [-2.0 * c * t]
    return NetworkWeights(name, [dense(w1, b1, "tanh"), dense(w2, b2)])


# acceptance lines collected by tests/test_acceptance.py and echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
