"""Convection-diffusion-reaction residual, initial conditions and collocation sampling."""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import jax.numpy as jnp
import numpy as np

from dldmf.errors import ConfigurationError

TWO_PI = 2.0 * math.pi
IC_KINDS = ("gaussian", "one_plus_sin")


@dataclasses.dataclass(frozen=True)
class DomainSpec:
    x_min: float = 0.0
    x_max: float = TWO_PI
    t_train: float = 1.0
    t_test: float = 10.0
    ic_kind: str = "gaussian"

    def __post_init__(self):
        if not 0 < self.t_train <= self.t_test:
            raise ConfigurationError(
                f"need 0 < t_train <= t_test, got t_train={self.t_train}, t_test={self.t_test}"
            )
        if self.ic_kind not in IC_KINDS:
            raise ConfigurationError(f"ic_kind must be one of {IC_KINDS}, got {self.ic_kind!r}")
        if not self.x_max > self.x_min:
            raise ConfigurationError("x_max must exceed x_min")

    @property
    def length(self) -> float:
        return self.x_max - self.x_min


def initial_condition(x, ic_kind: str = "gaussian"):
    """Unnormalized Gaussian bump centred at pi (std pi/2), or 1 + sin(x)."""
    xp = jnp if not isinstance(x, (np.ndarray, float, int)) else np
    if ic_kind == "gaussian":
        return xp.exp(-((x - math.pi) ** 2) / (2.0 * (math.pi / 2.0) ** 2))
    if ic_kind == "one_plus_sin":
        return 1.0 + xp.sin(x)
    raise ConfigurationError(f"unknown initial condition {ic_kind!r}")


def residual_from_fields(u, u_t, u_x, u_xx, beta, nu, rho):
    """u_t + beta u_x - nu u_xx - rho u (1 - u)."""
    return u_t + beta * u_x - nu * u_xx - rho * u * (1.0 - u)


def residual(q, model) -> float:
    """CDR residual of ``model`` at a single query.

    ``model`` may be anything offering ``field_values(q) -> (u, u_t, u_x, u_xx)``; a
    :class:`dldmf.model.Model` is evaluated through :func:`dldmf.model.point_fields`.
    """
    if hasattr(model, "field_values"):
        u, u_t, u_x, u_xx = model.field_values(q)
    else:
        from dldmf.model import point_fields

        f = point_fields(model, q.mu, [q.x], [q.t])
        u, u_t, u_x, u_xx = (float(a[0]) for a in f)
    return residual_from_fields(u, u_t, u_x, u_xx, q.mu.beta, q.mu.nu, q.mu.rho)


@dataclasses.dataclass
class CollocationBatch:
    """Sampled points for one optimization step.

    ``*_inst`` index rows of ``mu`` (shape (B, 3)); every instance owns the same number
    of points in each set, stored instance-major.
    """

    mu: np.ndarray
    residual_x: np.ndarray
    residual_t: np.ndarray
    residual_inst: np.ndarray
    initial_x: np.ndarray
    initial_inst: np.ndarray
    boundary_t: np.ndarray
    boundary_inst: np.ndarray

    @property
    def n_instances(self) -> int:
        return int(self.mu.shape[0])

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def sample_collocation(
    domain: DomainSpec,
    mu_batch: Sequence,
    counts: tuple[int, int, int],
    seed: int | np.random.Generator,
) -> CollocationBatch:
    """Uniform residual, initial and boundary points for every instance of ``mu_batch``."""
    if len(mu_batch) == 0:
        raise ConfigurationError("mu_batch is empty")
    n_f, n_u, n_b = counts
    if min(counts) <= 0:
        raise ConfigurationError(f"collocation counts must be positive, got {counts}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mu = np.stack([m.as_array() if hasattr(m, "as_array") else np.asarray(m, float) for m in mu_batch])
    b = mu.shape[0]
    return CollocationBatch(
        mu=mu,
        residual_x=rng.uniform(domain.x_min, domain.x_max, b * n_f),
        residual_t=rng.uniform(0.0, domain.t_train, b * n_f),
        residual_inst=np.repeat(np.arange(b, dtype=np.int32), n_f),
        initial_x=rng.uniform(domain.x_min, domain.x_max, b * n_u),
        initial_inst=np.repeat(np.arange(b, dtype=np.int32), n_u),
        boundary_t=rng.uniform(0.0, domain.t_train, b * n_b),
        boundary_inst=np.repeat(np.arange(b, dtype=np.int32), n_b),
    )
