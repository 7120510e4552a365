"""Dense sub-networks: definition, initialization, evaluation and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import jax
import jax.numpy as jnp
import numpy as np

from dldmf.errors import CheckpointError, ConfigurationError

ACTIVATIONS = ("tanh", "identity")

DLDMF_NETWORKS = ("spatial_encoder", "param_encoder", "latent_init", "dynamics", "decoder")
STATIC_NETWORKS = ("spatial_encoder", "param_encoder", "time_encoder", "decoder")
NETWORK_NAMES = DLDMF_NETWORKS + ("time_encoder",)

MAGIC = b"DLDMF\x01"


@dataclasses.dataclass
class DenseLayer:
    matrix: Any  # (out, in)
    bias: Any  # (out,)
    activation: str = "tanh"

    @property
    def in_width(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def out_width(self) -> int:
        return int(self.matrix.shape[0])

    def linear(self, v):
        return v @ self.matrix.T

    def dense_matrix(self):
        return self.matrix

    def tensors(self) -> dict[str, Any]:
        return {"weight": self.matrix, "bias": self.bias}


@dataclasses.dataclass
class SvdFactoredLayer:
    """Dense layer stored as psi @ diag(alpha) @ phi.T; only alpha is meant to move."""

    psi: Any  # (out, r)
    alpha: Any  # (r,)
    phi: Any  # (in, r)
    bias: Any
    activation: str = "tanh"

    @property
    def in_width(self) -> int:
        return int(self.phi.shape[0])

    @property
    def out_width(self) -> int:
        return int(self.psi.shape[0])

    @property
    def rank(self) -> int:
        return int(self.alpha.shape[0])

    def linear(self, v):
        return ((v @ self.phi) * self.alpha) @ self.psi.T

    def dense_matrix(self):
        return (self.psi * self.alpha) @ self.phi.T

    def tensors(self) -> dict[str, Any]:
        return {"psi": self.psi, "alpha": self.alpha, "phi": self.phi, "bias": self.bias}


jax.tree_util.register_dataclass(
    DenseLayer, data_fields=["matrix", "bias"], meta_fields=["activation"]
)
jax.tree_util.register_dataclass(
    SvdFactoredLayer, data_fields=["psi", "alpha", "phi", "bias"], meta_fields=["activation"]
)


@dataclasses.dataclass
class NetworkWeights:
    name: str
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError(f"network {self.name!r} has no layers")
        for i, (a, b) in enumerate(zip(self.layers[:-1], self.layers[1:])):
            if a.out_width != b.in_width:
                raise ConfigurationError(
                    f"network {self.name!r}: layer {i} outputs {a.out_width} "
                    f"but layer {i + 1} expects {b.in_width}"
                )
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {layer.activation!r}")
        if self.layers[-1].activation != "identity":
            raise ConfigurationError(f"network {self.name!r}: final layer must be identity")

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    def param_count(self) -> int:
        return sum(int(np.size(t)) for layer in self.layers for t in layer.tensors().values())


jax.tree_util.register_dataclass(NetworkWeights, data_fields=["layers"], meta_fields=["name"])


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Widths and depths of every sub-network.

    ``decoder_depth`` counts dense layers in the decoder including the input and output
    layers; it must be at least 3 so that one hidden layer can be modulated.
    """

    d_x: int = 32
    d_p: int = 32
    d_z: int = 16
    encoder_hidden: tuple[int, ...] = (64, 64)
    latent_init_hidden: tuple[int, ...] = (64, 64)
    dynamics_hidden: tuple[int, ...] = (64, 64, 64)
    time_encoder_hidden: tuple[int, ...] = (95, 95, 95)  # matches latent_init + dynamics in size
    decoder_width: int = 64
    decoder_depth: int = 5
    periodic_features: bool = True
    decoder_input_width: int | None = None
    seed: int = 0

    def __post_init__(self):
        widths = {"d_x": self.d_x, "d_p": self.d_p, "d_z": self.d_z, "decoder_width": self.decoder_width}
        for key, value in widths.items():
            if value <= 0:
                raise ConfigurationError(f"{key} must be positive, got {value}")
        for key in ("encoder_hidden", "latent_init_hidden", "dynamics_hidden", "time_encoder_hidden"):
            if any(w <= 0 for w in getattr(self, key)):
                raise ConfigurationError(f"{key} must contain positive widths")
        if self.decoder_depth < 3:
            raise ConfigurationError(
                f"decoder_depth={self.decoder_depth}: at least 3 layers are needed so that "
                "one hidden layer remains between the first and last"
            )
        fused = self.d_x + self.d_z + self.d_p
        if self.decoder_input_width is not None and self.decoder_input_width != fused:
            raise ConfigurationError(
                f"decoder input width {self.decoder_input_width} does not match "
                f"d_x + d_z + d_p = {fused}"
            )

    @property
    def spatial_input_width(self) -> int:
        return 2 if self.periodic_features else 1

    def layout(self, name: str) -> list[int]:
        fused = self.d_x + self.d_z + self.d_p
        layouts = {
            "spatial_encoder": [self.spatial_input_width, *self.encoder_hidden, self.d_x],
            "param_encoder": [3, *self.encoder_hidden, self.d_p],
            "latent_init": [self.d_p, *self.latent_init_hidden, self.d_z],
            "dynamics": [self.d_z + self.d_p, *self.dynamics_hidden, self.d_z],
            "time_encoder": [1, *self.time_encoder_hidden, self.d_z],
            "decoder": [fused] + [self.decoder_width] * (self.decoder_depth - 1) + [1],
        }
        if name not in layouts:
            raise ConfigurationError(f"unknown network {name!r}")
        return layouts[name]

    def param_count(self, names=DLDMF_NETWORKS) -> int:
        total = 0
        for name in names:
            sizes = self.layout(name)
            total += sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
        return total


def _network_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_network(name: str, sizes: list[int], seed: int) -> NetworkWeights:
    rng = _network_rng(seed, name)
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = "identity" if k == len(sizes) - 2 else "tanh"
        layers.append(DenseLayer(jnp.asarray(w), jnp.zeros(fan_out), act))
    return NetworkWeights(name, layers)


def init_model(config: ModelConfig, names=DLDMF_NETWORKS) -> dict[str, NetworkWeights]:
    """Glorot-uniform matrices and zero biases, deterministic in ``config.seed``."""
    return {name: init_network(name, config.layout(name), config.seed) for name in names}


def eval_net(net: NetworkWeights, inputs):
    """Plain forward pass; ``inputs`` is a vector or a batch of row vectors."""
    v = jnp.asarray(inputs)
    if v.shape[-1] != net.in_width:
        raise ConfigurationError(
            f"network {net.name!r} expects input width {net.in_width}, got {v.shape[-1]}"
        )
    for layer in net.layers:
        v = layer.linear(v) + layer.bias
        if layer.activation == "tanh":
            v = jnp.tanh(v)
    return v


# ---------------------------------------------------------------------------
# checkpoint format


def nets_to_tensors(nets: Mapping[str, NetworkWeights]) -> dict[str, np.ndarray]:
    out = {}
    for name, net in nets.items():
        for i, layer in enumerate(net.layers):
            for key, value in layer.tensors().items():
                out[f"{name}.{i}.{key}"] = np.asarray(value, dtype=np.float64)
    return out


def nets_from_tensors(tensors: Mapping[str, np.ndarray]) -> dict[str, NetworkWeights]:
    grouped: dict[str, dict[int, dict[str, np.ndarray]]] = {}
    for full, value in tensors.items():
        parts = full.split(".")
        if len(parts) != 3 or not parts[1].isdigit():
            continue
        name, idx, key = parts
        grouped.setdefault(name, {}).setdefault(int(idx), {})[key] = value
    nets = {}
    for name, by_index in grouped.items():
        count = len(by_index)
        if sorted(by_index) != list(range(count)):
            raise CheckpointError(f"network {name!r} has non-contiguous layer indices")
        layers = []
        for i in range(count):
            t = by_index[i]
            act = "identity" if i == count - 1 else "tanh"
            if "alpha" in t:
                layer = SvdFactoredLayer(
                    jnp.asarray(t["psi"]), jnp.asarray(t["alpha"]), jnp.asarray(t["phi"]),
                    jnp.asarray(t["bias"]), act,
                )
            else:
                layer = DenseLayer(jnp.asarray(t["weight"]), jnp.asarray(t["bias"]), act)
            layers.append(layer)
        nets[name] = NetworkWeights(name, layers)
    return nets


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad header magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        count = int(np.prod(dims)) if rank else 1
        raw = take(8 * count, f"tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    return out


def check_shapes(found: Mapping[str, np.ndarray], expected: Mapping[str, np.ndarray], source="") -> None:
    missing = sorted(set(expected) - set(found))
    if missing:
        raise CheckpointError(f"{source}: missing tensors {missing}")
    for name, ref in expected.items():
        if tuple(found[name].shape) != tuple(np.shape(ref)):
            raise CheckpointError(
                f"{source}: shape mismatch for {name!r}: file has {tuple(found[name].shape)}, "
                f"model expects {tuple(np.shape(ref))}"
            )


def save_checkpoint(nets: Mapping[str, NetworkWeights], path, extra: Mapping[str, Any] | None = None) -> None:
    tensors = nets_to_tensors(nets)
    for key, value in (extra or {}).items():
        tensors[key] = np.asarray(value, dtype=np.float64)
    write_tensors(path, tensors)


def load_checkpoint(path, like: Mapping[str, NetworkWeights] | None = None) -> dict[str, NetworkWeights]:
    """Load networks; with ``like`` given, every tensor shape must match it."""
    tensors = read_tensors(path)
    if like is not None:
        check_shapes(tensors, nets_to_tensors(like), source=str(path))
    return nets_from_tensors(tensors)
