"""Parameter-conditioned latent ODE: feed-forward initial state and fixed-step RK4."""

from __future__ import annotations

import dataclasses
import functools
import math
from typing import Any, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from dldmf.errors import ConfigurationError, IntegrationDiverged, IntegrationHorizonError
from dldmf.networks import NetworkWeights, eval_net

# Query times within this fraction of a step of a grid node snap to it.
_GRID_SNAP = 1e-9


@dataclasses.dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"
    step: float = 1e-2
    max_steps: int = 2000

    def __post_init__(self):
        if self.method != "rk4":
            raise ConfigurationError(f"unsupported integrator {self.method!r}; only 'rk4' exists")
        if not self.step > 0:
            raise ConfigurationError(f"integrator step must be positive, got {self.step}")
        if self.max_steps <= 0:
            raise ConfigurationError("max_steps must be positive")

    @property
    def horizon(self) -> float:
        return self.step * self.max_steps

    def steps_for(self, span: float) -> int:
        """Number of full grid steps needed to cover ``span``."""
        if span < 0:
            raise ConfigurationError(f"negative integration span {span}")
        n = max(int(math.ceil(span / self.step - _GRID_SNAP)), 0)
        if n > self.max_steps:
            raise IntegrationHorizonError(
                f"span {span:g} needs {n} steps of {self.step:g} but max_steps={self.max_steps} "
                f"(horizon {self.horizon:g})"
            )
        return n


@dataclasses.dataclass
class LatentState:
    z: Any
    t: float = 0.0


def init_latent(h_param, latent_init: NetworkWeights) -> LatentState:
    return LatentState(eval_net(latent_init, h_param), 0.0)


def latent_velocity(z, h_param, dynamics: NetworkWeights):
    """dz/dt = f([z; h_param]); accepts a :class:`LatentState` or raw arrays."""
    if isinstance(z, LatentState):
        z = z.z
    z = jnp.asarray(z)
    h_param = jnp.broadcast_to(jnp.asarray(h_param), z.shape[:-1] + jnp.shape(h_param)[-1:])
    return eval_net(dynamics, jnp.concatenate([z, h_param], axis=-1))


def rk4_step(dynamics: NetworkWeights, z, h_param, h):
    f = functools.partial(latent_velocity, h_param=h_param, dynamics=dynamics)
    k1 = f(z)
    k2 = f(z + 0.5 * h * k1)
    k3 = f(z + 0.5 * h * k2)
    k4 = f(z + h * k3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def trajectory(dynamics: NetworkWeights, z0, h_param, n_steps: int, step: float):
    """States on the uniform step grid, shape ``(n_steps + 1, *z0.shape)``."""

    def body(z, _):
        nxt = rk4_step(dynamics, z, h_param, step)
        return nxt, nxt

    _, zs = jax.lax.scan(body, z0, None, length=n_steps)
    return jnp.concatenate([z0[None], zs], axis=0)


def grid_position(t, step: float, n_steps: int):
    """Grid node at or below ``t`` and the remaining substep length."""
    t = jnp.asarray(t)
    k = jnp.clip(jnp.floor(t / step + _GRID_SNAP).astype(jnp.int32), 0, n_steps)
    return k, t - k * step


def query(dynamics: NetworkWeights, grid, h_param, t, step: float, inst=None):
    """Latent state at times ``t`` (relative to the grid start).

    Each time starts from the grid node below it and finishes with one shortened RK4
    substep.  ``grid`` has shape (n+1, d_z), or (n+1, B, d_z) when ``inst`` selects a
    trajectory per query.
    """
    n_steps = grid.shape[0] - 1
    k, h = grid_position(t, step, n_steps)
    if inst is None:
        zk = grid[k]
        hp = jnp.broadcast_to(h_param, zk.shape[:-1] + h_param.shape[-1:])
    else:
        zk = grid[k, inst]
        hp = h_param[inst]
    return rk4_step(dynamics, zk, hp, h[..., None])


@functools.partial(jax.jit, static_argnames=("n_steps", "step"))
def _trajectory_jit(dynamics, z0, h_param, n_steps, step):
    return trajectory(dynamics, z0, h_param, n_steps, step)


@functools.partial(jax.jit, static_argnames=("step",))
def _query_jit(dynamics, grid, h_param, t, step):
    return query(dynamics, grid, h_param, t, step)


def integrate(
    z0: LatentState,
    h_param,
    dynamics: NetworkWeights,
    t_query: Sequence[float],
    cfg: IntegratorConfig = IntegratorConfig(),
) -> list[LatentState]:
    """Latent states at the ascending times ``t_query`` (absolute, ``>= z0.t``)."""
    times = np.asarray(t_query, dtype=np.float64)
    if times.ndim != 1:
        raise ConfigurationError("t_query must be a flat list of times")
    if times.size == 0:
        return []
    if np.any(np.diff(times) < 0):
        raise ConfigurationError("t_query must be ascending")
    if times[0] < z0.t or times[0] < 0:
        raise ConfigurationError(f"query time {times[0]} precedes the initial state at t={z0.t}")
    rel = times - z0.t
    n_steps = cfg.steps_for(float(rel[-1]))
    z_init = jnp.asarray(z0.z, dtype=jnp.float64)
    h_param = jnp.asarray(h_param, dtype=jnp.float64)
    grid = _trajectory_jit(dynamics, z_init, h_param, n_steps, cfg.step)
    finite = np.all(np.isfinite(np.asarray(grid)), axis=-1)
    if not finite.all():
        first = int(np.argmin(finite))
        raise IntegrationDiverged(z0.t + first * cfg.step)
    zs = np.asarray(_query_jit(dynamics, grid, h_param, jnp.asarray(rel), cfg.step))
    bad = ~np.all(np.isfinite(zs), axis=-1)
    if bad.any():
        raise IntegrationDiverged(times[int(np.argmax(bad))])
    return [LatentState(jnp.asarray(z), float(t)) for z, t in zip(zs, times)]
