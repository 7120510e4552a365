"""Fused surrogate u(x, t; mu) and its two ablations.

Three kinds share the spatial encoder, parameter encoder and decoder:

* ``dldmf``: time enters through a latent state z_t integrated from z_0 = g_0(h_param).
* ``static_fusion``: time is a coordinate fed through a small time encoder into the
  decoder slot that otherwise holds z_t.
* ``autodecode_init``: same networks as ``dldmf`` but z_0 is found by gradient descent
  on a reconstruction loss against an observed initial snapshot.
"""

from __future__ import annotations

import dataclasses
import enum
import functools
import math
import time
from typing import Any, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from dldmf import autodiff
from dldmf.autodiff import Dual2
from dldmf.errors import AutodecodeDiverged, ConfigurationError
from dldmf.latent_dynamics import (
    IntegratorConfig,
    LatentState,
    latent_velocity,
    query,
    trajectory,
)
from dldmf.networks import (
    DLDMF_NETWORKS,
    STATIC_NETWORKS,
    ModelConfig,
    check_shapes,
    eval_net,
    init_model,
    nets_from_tensors,
    nets_to_tensors,
    read_tensors,
    write_tensors,
)


class AblationKind(str, enum.Enum):
    DLDMF = "dldmf"
    STATIC_FUSION = "static_fusion"
    AUTODECODE_INIT = "autodecode_init"


@dataclasses.dataclass(frozen=True)
class PdeParams:
    beta: float = 0.0
    nu: float = 0.0
    rho: float = 0.0

    def __post_init__(self):
        for key in ("beta", "nu", "rho"):
            if not math.isfinite(getattr(self, key)):
                raise ConfigurationError(f"{key} must be finite")
        if self.nu < 0:
            raise ConfigurationError(f"diffusion coefficient must be non-negative, got nu={self.nu}")

    def as_array(self) -> np.ndarray:
        return np.array([self.beta, self.nu, self.rho], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "PdeParams":
        b, n, r = (float(v) for v in arr)
        return cls(b, n, r)

    def label(self) -> str:
        return f"b{self.beta:g}_n{self.nu:g}_r{self.rho:g}"


@dataclasses.dataclass(frozen=True)
class FusedQuery:
    x: float
    t: float
    mu: PdeParams

    def __post_init__(self):
        if self.t < 0:
            raise ConfigurationError(f"query time must be non-negative, got {self.t}")


@dataclasses.dataclass
class Model:
    nets: dict
    mu_lo: Any
    mu_hi: Any
    kind: AblationKind = AblationKind.DLDMF
    config: ModelConfig = ModelConfig()
    integrator: IntegratorConfig = IntegratorConfig()

    @property
    def uses_latent_dynamics(self) -> bool:
        return self.kind is not AblationKind.STATIC_FUSION

    def param_count(self) -> int:
        return sum(net.param_count() for net in self.nets.values())

    def with_nets(self, nets) -> "Model":
        return dataclasses.replace(self, nets=nets)


jax.tree_util.register_dataclass(
    Model, data_fields=["nets", "mu_lo", "mu_hi"], meta_fields=["kind", "config", "integrator"]
)


class Fields(NamedTuple):
    u: Any
    u_t: Any
    u_x: Any
    u_xx: Any


class LatentContext(NamedTuple):
    """Per-instance embeddings and (for latent kinds) the RK4 grid trajectory."""

    h_param: Any  # (B, d_p)
    grid: Any  # (n+1, B, d_z) or None


def build_model(
    config: ModelConfig = ModelConfig(),
    kind: AblationKind | str = AblationKind.DLDMF,
    mu_lo=(0.0, 0.0, 0.0),
    mu_hi=(1.0, 1.0, 1.0),
    integrator: IntegratorConfig = IntegratorConfig(),
) -> Model:
    kind = AblationKind(kind)
    names = STATIC_NETWORKS if kind is AblationKind.STATIC_FUSION else DLDMF_NETWORKS
    return Model(
        init_model(config, names),
        jnp.asarray(mu_lo, dtype=jnp.float64),
        jnp.asarray(mu_hi, dtype=jnp.float64),
        kind,
        config,
        integrator,
    )


# ---------------------------------------------------------------------------
# embeddings


def normalize_mu(model: Model, mu):
    span = model.mu_hi - model.mu_lo
    safe = jnp.where(span > 0, span, 1.0)
    return jnp.where(span > 0, (jnp.asarray(mu) - model.mu_lo) / safe, 0.0)


def param_embedding(model: Model, mu):
    return eval_net(model.nets["param_encoder"], normalize_mu(model, mu))


def _spatial_lift(model: Model, x):
    if model.config.periodic_features:
        if isinstance(x, Dual2):
            return autodiff.concat([autodiff.sin(x[..., None]), autodiff.cos(x[..., None])])
        x = jnp.asarray(x)
        return jnp.stack([jnp.sin(x), jnp.cos(x)], axis=-1)
    return x[..., None]


def spatial_embedding(model: Model, x):
    return eval_net(model.nets["spatial_encoder"], _spatial_lift(model, jnp.asarray(x)))


def spatial_jet(model: Model, x) -> Dual2:
    """h_x with first and second derivatives w.r.t. x, seeded before the periodic lift."""
    return autodiff.push_dual(model.nets["spatial_encoder"], _spatial_lift(model, Dual2.seed(x)))


def horizon_steps(model: Model, horizon: float) -> int:
    return model.integrator.steps_for(horizon)


def prepare(model: Model, mu, n_steps: int, z0=None) -> LatentContext:
    """Encode a batch of parameters ``mu`` (B, 3) and integrate latents ``n_steps`` ahead."""
    h_param = param_embedding(model, jnp.atleast_2d(mu))
    if not model.uses_latent_dynamics:
        return LatentContext(h_param, None)
    if z0 is None:
        z0 = eval_net(model.nets["latent_init"], h_param)
    z0 = jnp.broadcast_to(jnp.asarray(z0), h_param.shape[:-1] + (model.config.d_z,))
    grid = trajectory(model.nets["dynamics"], z0, h_param, n_steps, model.integrator.step)
    return LatentContext(h_param, grid)


def time_code(model: Model, ctx: LatentContext, t, inst):
    """Decoder time slot and its time derivative for each query."""
    t = jnp.asarray(t)
    if model.uses_latent_dynamics:
        dyn = model.nets["dynamics"]
        z = query(dyn, ctx.grid, ctx.h_param, t, model.integrator.step, inst)
        return z, latent_velocity(z, ctx.h_param[inst], dyn)
    jet = autodiff.push_dual(model.nets["time_encoder"], Dual2.seed(t)[..., None])
    return jet.value, jet.d1


def time_code_value(model: Model, ctx: LatentContext, t, inst):
    t = jnp.asarray(t)
    if model.uses_latent_dynamics:
        return query(model.nets["dynamics"], ctx.grid, ctx.h_param, t, model.integrator.step, inst)
    return eval_net(model.nets["time_encoder"], t[..., None])


def fields(model: Model, ctx: LatentContext, x, t, inst) -> Fields:
    """u, u_t, u_x, u_xx at points (x, t) of instances ``inst``.

    For latent kinds u_t is the decoder's directional derivative along the latent
    velocity f(z_t, h_param); spatial derivatives are exact second-order jets.
    """
    code, code_dot = time_code(model, ctx, t, inst)
    hp = ctx.h_param[inst]
    hx = spatial_jet(model, x)
    inp = autodiff.concat([hx, code, hp])
    tangent = jnp.concatenate([jnp.zeros_like(hx.value), code_dot, jnp.zeros_like(hp)], axis=-1)
    out, u_t = autodiff.push_dual_tangent(model.nets["decoder"], inp, tangent)
    return Fields(out.value[..., 0], u_t[..., 0], out.d1[..., 0], out.d2[..., 0])


def decode_values(model: Model, x, code, h_param):
    inp = jnp.concatenate([spatial_embedding(model, x), code, h_param], axis=-1)
    return eval_net(model.nets["decoder"], inp)[..., 0]


def values(model: Model, ctx: LatentContext, x, t, inst):
    return decode_values(model, x, time_code_value(model, ctx, t, inst), ctx.h_param[inst])


def initial_values(model: Model, ctx: LatentContext, x, inst):
    """û(x, 0) without a zero-length RK4 substep for latent kinds."""
    if model.uses_latent_dynamics:
        return decode_values(model, x, ctx.grid[0, inst], ctx.h_param[inst])
    return values(model, ctx, x, jnp.zeros_like(x), inst)


@functools.partial(jax.jit, static_argnames=("n_steps",))
def _point_fields(model, mu, x, t, n_steps, z0=None):
    ctx = prepare(model, mu[None], n_steps, z0)
    inst = jnp.zeros(jnp.shape(x), dtype=jnp.int32)
    return fields(model, ctx, x, t, inst)


def _steps_to(model: Model, t_max: float) -> int:
    return horizon_steps(model, t_max) if model.uses_latent_dynamics else 0


def _bucketed_steps(model: Model, t_max: float, bucket: int = 32) -> int:
    # n_steps is a static jit argument; rounding up bounds the number of compiled variants
    n = _steps_to(model, t_max)
    if n == 0:
        return 0
    return max(n, min(-(-n // bucket) * bucket, model.integrator.max_steps))


def point_fields(model: Model, mu: PdeParams, x, t, z0=None) -> Fields:
    """Eager evaluation of all fields at arrays of points for one parameter instance."""
    x = jnp.asarray(x, dtype=jnp.float64)
    t = jnp.asarray(t, dtype=jnp.float64)
    n_steps = _bucketed_steps(model, float(jnp.max(t)) if t.size else 0.0)
    return _point_fields(model, jnp.asarray(mu.as_array()), x, t, n_steps, z0)


# ---------------------------------------------------------------------------
# single-query surface


class Trajectory(NamedTuple):
    """Cached latent grid for one parameter instance."""

    mu: PdeParams
    ctx: LatentContext

    @property
    def horizon_steps(self) -> int:
        return 0 if self.ctx.grid is None else self.ctx.grid.shape[0] - 1


def latent_cache(model: Model, mu: PdeParams, horizon: float, z0=None) -> Trajectory:
    n_steps = _steps_to(model, horizon)
    return Trajectory(mu, _prepare_jit(model, jnp.asarray(mu.as_array())[None], n_steps, z0))


@functools.partial(jax.jit, static_argnames=("n_steps",))
def _prepare_jit(model, mu, n_steps, z0=None):
    return prepare(model, mu, n_steps, z0)


@jax.jit
def _cached_fields(model, ctx, x, t):
    inst = jnp.zeros(jnp.shape(x), dtype=jnp.int32)
    return fields(model, ctx, x, t, inst)


def _query_fields(q: FusedQuery, model: Model, z_cache: Trajectory | None) -> Fields:
    x = jnp.atleast_1d(jnp.asarray(q.x, dtype=jnp.float64))
    t = jnp.atleast_1d(jnp.asarray(q.t, dtype=jnp.float64))
    if z_cache is not None and z_cache.mu == q.mu:
        needed = _steps_to(model, q.t)
        if not model.uses_latent_dynamics or needed <= z_cache.horizon_steps:
            return _cached_fields(model, z_cache.ctx, x, t)
    return point_fields(model, q.mu, x, t)


def forward(q: FusedQuery, model: Model, z_cache: Trajectory | None = None) -> float:
    return float(_query_fields(q, model, z_cache).u[0])


def time_derivative(q: FusedQuery, model: Model, z_cache: Trajectory | None = None) -> float:
    return float(_query_fields(q, model, z_cache).u_t[0])


def spatial_derivatives(q: FusedQuery, model: Model, z_cache: Trajectory | None = None) -> tuple[float, float]:
    f = _query_fields(q, model, z_cache)
    return float(f.u_x[0]), float(f.u_xx[0])


# ---------------------------------------------------------------------------
# dense grid prediction


@functools.partial(jax.jit, static_argnames=("n_steps",))
def _predict_grid(model, mu, x, t, n_steps, z0=None):
    ctx = prepare(model, mu[None], n_steps, z0)
    inst = jnp.zeros(t.shape, dtype=jnp.int32)
    codes = time_code_value(model, ctx, t, inst)
    hx = spatial_embedding(model, x)
    hp = jnp.broadcast_to(ctx.h_param[0], (x.shape[0], ctx.h_param.shape[-1]))
    dec = model.nets["decoder"]

    def row(code):
        c = jnp.broadcast_to(code, (x.shape[0], code.shape[-1]))
        return eval_net(dec, jnp.concatenate([hx, c, hp], axis=-1))[:, 0]

    return jax.lax.map(row, codes)


def predict_grid(model: Model, mu: PdeParams, x, t, z0=None) -> np.ndarray:
    """û on the tensor grid ``t`` x ``x`` as an (nt, nx) array."""
    x = jnp.asarray(x, dtype=jnp.float64)
    t = jnp.asarray(t, dtype=jnp.float64)
    n_steps = _bucketed_steps(model, float(jnp.max(t)))
    return np.asarray(_predict_grid(model, jnp.asarray(mu.as_array()), x, t, n_steps, z0))


# ---------------------------------------------------------------------------
# auto-decoding ablation


@jax.jit
def _feedforward_z0(model, mu):
    return eval_net(model.nets["latent_init"], param_embedding(model, mu))


def feedforward_z0(model: Model, mu: PdeParams) -> np.ndarray:
    """z_0 from the latent-init network: one forward pass, no gradient steps."""
    if not model.uses_latent_dynamics:
        raise ConfigurationError("static models have no latent state")
    return np.asarray(_feedforward_z0(model, jnp.asarray(mu.as_array())))


class AutodecodeResult(NamedTuple):
    state: LatentState
    losses: np.ndarray  # K + 1 entries: before the first step through after the last
    steps: int
    seconds: float


@functools.partial(jax.jit, static_argnames=("steps",))
def _autodecode(model, mu, x, target, z_start, steps, rate):
    hx = spatial_embedding(model, x)
    hp = param_embedding(model, mu[None])
    hp = jnp.broadcast_to(hp, (x.shape[0], hp.shape[-1]))
    dec = model.nets["decoder"]

    def loss(z):
        zz = jnp.broadcast_to(z, (x.shape[0], z.shape[-1]))
        pred = eval_net(dec, jnp.concatenate([hx, zz, hp], axis=-1))[:, 0]
        return jnp.sum((pred - target) ** 2)

    value_and_grad = jax.value_and_grad(loss)

    def body(z, _):
        val, g = value_and_grad(z)
        return z - rate * g, val

    z_final, curve = jax.lax.scan(body, z_start, None, length=steps)
    return z_final, jnp.concatenate([curve, loss(z_final)[None]])


def autodecode_init(
    model: Model,
    mu: PdeParams,
    x,
    target,
    steps: int = 100,
    rate: float = 1e-2,
    z_start=None,
) -> AutodecodeResult:
    """Infer z_0 by ``steps`` plain gradient steps on sum_x (decoder(z) - target)^2."""
    if not model.uses_latent_dynamics:
        raise ConfigurationError("auto-decoding needs a model with a latent state")
    if steps < 0:
        raise ConfigurationError("steps must be non-negative")
    z = jnp.zeros(model.config.d_z) if z_start is None else jnp.asarray(z_start, dtype=jnp.float64)
    x = jnp.asarray(x, dtype=jnp.float64)
    target = jnp.asarray(target, dtype=jnp.float64)
    start = time.perf_counter()
    z_final, curve = _autodecode(model, jnp.asarray(mu.as_array()), x, target, z, steps, rate)
    z_final.block_until_ready()
    seconds = time.perf_counter() - start
    curve = np.asarray(curve)
    if not np.all(np.isfinite(curve)) or not np.all(np.isfinite(np.asarray(z_final))):
        bad = np.flatnonzero(~np.isfinite(curve))
        raise AutodecodeDiverged(int(bad[0]) if bad.size else steps, rate)
    return AutodecodeResult(LatentState(z_final, 0.0), curve, steps, seconds)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: Model, path) -> None:
    tensors = nets_to_tensors(model.nets)
    tensors["norm.mu_lo"] = np.asarray(model.mu_lo)
    tensors["norm.mu_hi"] = np.asarray(model.mu_hi)
    tensors["integrator.step"] = np.asarray([model.integrator.step])
    tensors["integrator.max_steps"] = np.asarray([float(model.integrator.max_steps)])
    write_tensors(path, tensors)


def _infer_config(nets) -> ModelConfig:
    def hidden(name):
        return tuple(layer.out_width for layer in nets[name].layers[:-1])

    dec = nets["decoder"]
    kwargs = dict(
        d_x=nets["spatial_encoder"].out_width,
        d_p=nets["param_encoder"].out_width,
        d_z=dec.in_width - nets["spatial_encoder"].out_width - nets["param_encoder"].out_width,
        encoder_hidden=hidden("param_encoder"),
        decoder_width=dec.layers[0].out_width,
        decoder_depth=len(dec.layers),
        periodic_features=nets["spatial_encoder"].in_width == 2,
    )
    if "dynamics" in nets:
        kwargs["dynamics_hidden"] = hidden("dynamics")
        kwargs["latent_init_hidden"] = hidden("latent_init")
    if "time_encoder" in nets:
        kwargs["time_encoder_hidden"] = hidden("time_encoder")
    return ModelConfig(**kwargs)


def load_model(path, config: ModelConfig | None = None, kind: AblationKind | str | None = None) -> Model:
    """Rebuild a model from a checkpoint; ``config`` (if given) must match every shape."""
    tensors = read_tensors(path)
    nets = nets_from_tensors(tensors)
    found_kind = AblationKind.STATIC_FUSION if "time_encoder" in nets else AblationKind.DLDMF
    kind = AblationKind(kind) if kind is not None else found_kind
    if (kind is AblationKind.STATIC_FUSION) != (found_kind is AblationKind.STATIC_FUSION):
        raise ConfigurationError(f"{path}: checkpoint holds a {found_kind.value} model, not {kind.value}")
    if config is not None:
        names = STATIC_NETWORKS if kind is AblationKind.STATIC_FUSION else DLDMF_NETWORKS
        check_shapes(tensors, nets_to_tensors(init_model(config, names)), source=str(path))
    else:
        config = _infer_config(nets)
    integrator = IntegratorConfig()
    if "integrator.step" in tensors:
        integrator = IntegratorConfig(
            step=float(tensors["integrator.step"][0]),
            max_steps=int(tensors["integrator.max_steps"][0]),
        )
    return Model(
        nets,
        jnp.asarray(tensors.get("norm.mu_lo", np.zeros(3))),
        jnp.asarray(tensors.get("norm.mu_hi", np.ones(3))),
        kind,
        config,
        integrator,
    )
