import dataclasses

import jax
import numpy as np
import pytest

from dldmf.errors import CheckpointError, ConfigurationError
from dldmf.model import build_model, load_model, save_model
from dldmf.networks import (
    DLDMF_NETWORKS,
    MAGIC,
    ModelConfig,
    NetworkWeights,
    eval_net,
    init_model,
    load_checkpoint,
    save_checkpoint,
)

from conftest import SMALL, dense, flat


def test_init_is_deterministic():
    a, b = init_model(SMALL), init_model(SMALL)
    np.testing.assert_array_equal(flat(a), flat(b))
    c = init_model(dataclasses.replace(SMALL, seed=SMALL.seed + 1))
    assert not np.array_equal(flat(a), flat(c))


def test_glorot_bounds_and_zero_bias():
    nets = init_model(ModelConfig())
    for net in nets.values():
        for layer in net.layers:
            fan_out, fan_in = layer.matrix.shape
            assert np.max(np.abs(layer.matrix)) <= np.sqrt(6.0 / (fan_in + fan_out))
            assert not np.any(np.asarray(layer.bias))


def test_decoder_depth_two_rejected():
    with pytest.raises(ConfigurationError, match="decoder_depth"):
        ModelConfig(decoder_depth=2)


def test_decoder_input_width_must_match_fusion():
    with pytest.raises(ConfigurationError):
        ModelConfig(decoder_input_width=10)
    ModelConfig(decoder_input_width=32 + 16 + 32)


def test_default_param_count_closed_form():
    # hand count for the default sizes, input lifted to (sin x, cos x)
    def mlp(*sizes):
        return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))

    expected = (
        mlp(2, 64, 64, 32)  # spatial encoder
        + mlp(3, 64, 64, 32)  # parameter encoder
        + mlp(32, 64, 64, 16)  # latent init
        + mlp(48, 64, 64, 64, 16)  # dynamics
        + mlp(80, 64, 64, 64, 64, 1)  # decoder
    )
    assert expected == 50465
    cfg = ModelConfig()
    assert cfg.param_count() == expected
    assert sum(n.param_count() for n in init_model(cfg).values()) == expected


def test_layer_chain_validation():
    with pytest.raises(ConfigurationError, match="outputs 3"):
        NetworkWeights("bad", [dense(np.ones((3, 2)), np.zeros(3), "tanh"), dense(np.ones((1, 4)), [0.0])])
    with pytest.raises(ConfigurationError, match="identity"):
        NetworkWeights("bad", [dense(np.ones((1, 2)), [0.0], "tanh")])


def test_zero_weight_network_returns_last_bias():
    net = NetworkWeights("z", [dense(np.zeros((4, 3)), np.ones(4), "tanh"), dense(np.zeros((2, 4)), [0.5, -2.0])])
    np.testing.assert_array_equal(np.asarray(eval_net(net, [9.0, -1.0, 3.0])), [0.5, -2.0])


def test_identity_layer():
    net = NetworkWeights("id", [dense(np.eye(3), np.zeros(3))])
    v = np.array([0.1, -4.0, 2.5])
    np.testing.assert_array_equal(np.asarray(eval_net(net, v)), v)


def test_eval_is_pure(rng):
    net = init_model(SMALL)["decoder"]
    v = rng.normal(size=net.in_width)
    a, b = np.asarray(eval_net(net, v)), np.asarray(eval_net(net, v))
    np.testing.assert_array_equal(a, b)


def test_eval_width_mismatch():
    net = init_model(SMALL)["decoder"]
    with pytest.raises(ConfigurationError, match="expects input width"):
        eval_net(net, np.zeros(net.in_width + 1))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    nets = init_model(ModelConfig())
    path = tmp_path / "m.ckpt"
    save_checkpoint(nets, path)
    assert path.read_bytes().startswith(MAGIC)
    back = load_checkpoint(path, like=nets)
    for name in DLDMF_NETWORKS:
        for a, b in zip(jax.tree.leaves(nets[name]), jax.tree.leaves(back[name])):
            assert np.asarray(a).tobytes() == np.asarray(b).tobytes()


def test_model_round_trip(tmp_path):
    m = build_model(SMALL, "dldmf", (1, 0, 0), (5, 0, 0))
    save_model(m, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(flat(m.nets), flat(back.nets))
    np.testing.assert_array_equal(np.asarray(back.mu_hi), [5, 0, 0])
    assert back.config.d_z == SMALL.d_z
    assert back.kind.value == "dldmf"
    s = build_model(SMALL, "static_fusion")
    save_model(s, tmp_path / "s.ckpt")
    assert load_model(tmp_path / "s.ckpt").kind.value == "static_fusion"


def test_corrupted_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_model(SMALL), path)
    data = bytearray(path.read_bytes())
    data[0:5] = b"XXXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="header"):
        load_checkpoint(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_model(SMALL), path)
    path.write_bytes(path.read_bytes()[:-12])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_shape_mismatch_on_different_latent_width(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(build_model(SMALL), path)
    other = dataclasses.replace(SMALL, d_z=SMALL.d_z + 2)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_model(path, config=other)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(path, like=init_model(other))
