"""Physics-informed pre-training over mini-batches of PDE parameter instances."""

from __future__ import annotations

import csv
import dataclasses
import functools
import itertools
import logging
import time
from pathlib import Path
from typing import Any, Callable, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from dldmf.errors import ConfigurationError, TrainingDiverged
from dldmf.model import (
    Model,
    PdeParams,
    decode_values,
    fields,
    initial_values,
    prepare,
    save_model,
    time_code_value,
)
from dldmf.physics_cdr import CollocationBatch, DomainSpec, initial_condition, residual_from_fields, sample_collocation
from dldmf.seeding import rng_for

log = logging.getLogger(__name__)

COEFFICIENTS = ("beta", "nu", "rho")
FAMILIES = {
    "convection": ("beta",),
    "diffusion": ("nu",),
    "reaction": ("rho",),
    "conv_diff": ("beta", "nu"),
    "reac_diff": ("nu", "rho"),
    "conv_diff_reac": ("beta", "nu", "rho"),
}


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    # loss weights for the initial, residual and boundary terms
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 20_000
    mu_batch: int = 8
    n_residual: int = 128
    n_initial: int = 64
    n_boundary: int = 32
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 10
    family: str = "convection"
    mu_range: tuple[float, float] = (1.0, 5.0)
    mu_grid: int = 5

    def __post_init__(self):
        ws = (self.w1, self.w2, self.w3)
        if min(ws) < 0 or max(ws) == 0:
            raise ConfigurationError(f"loss weights must be >= 0 and not all zero, got {ws}")
        if self.steps <= 0:
            raise ConfigurationError("steps must be positive")
        if self.mu_batch <= 0:
            raise ConfigurationError("mu_batch must be positive")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}; choose from {sorted(FAMILIES)}")

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.n_residual, self.n_initial, self.n_boundary)

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.w1, self.w2, self.w3)

    def mu_set(self) -> list[PdeParams]:
        active = FAMILIES[self.family]
        return make_mu_set({c: self.mu_range for c in active}, self.mu_grid, active)


class TrainLogRecord(NamedTuple):
    step: int
    L_u: float
    L_f: float
    L_b: float
    total: float
    seconds: float


def make_mu_set(ranges: dict, grid: int, active: Sequence[str]) -> list[PdeParams]:
    """Cartesian grid over the active coefficients; inactive ones are pinned to 0."""
    active = tuple(active)
    if not active:
        raise ConfigurationError("at least one coefficient must be active")
    unknown = set(active) - set(COEFFICIENTS)
    if unknown:
        raise ConfigurationError(f"unknown coefficients {sorted(unknown)}")
    if grid <= 0:
        raise ConfigurationError("grid must be positive")
    axes = []
    for name in COEFFICIENTS:
        if name in active:
            lo, hi = ranges[name]
            if lo > hi:
                raise ConfigurationError(f"range for {name} has lo > hi: {(lo, hi)}")
            axes.append(np.linspace(lo, hi, grid) if grid > 1 else np.array([lo]))
        else:
            axes.append(np.array([0.0]))
    return [PdeParams(float(b), float(n), float(r)) for b, n, r in itertools.product(*axes)]


def mu_bounds(mu_set: Sequence[PdeParams]) -> tuple[np.ndarray, np.ndarray]:
    arr = np.stack([m.as_array() for m in mu_set])
    return arr.min(axis=0), arr.max(axis=0)


# ---------------------------------------------------------------------------
# losses


def _double_mean(sq, inst, n_instances):
    per = jax.ops.segment_sum(sq, inst, num_segments=n_instances)
    counts = jax.ops.segment_sum(jnp.ones_like(sq), inst, num_segments=n_instances)
    return jnp.mean(per / counts)


def loss_terms(model: Model, arrays: dict, n_steps: int, ic_kind: str, x_lo: float, x_hi: float):
    """(L_u, L_f, L_b), each averaged per instance and then over the batch."""
    mu = arrays["mu"]
    b = mu.shape[0]
    ctx = prepare(model, mu, n_steps)

    inst = arrays["residual_inst"]
    f = fields(model, ctx, arrays["residual_x"], arrays["residual_t"], inst)
    r = residual_from_fields(f.u, f.u_t, f.u_x, f.u_xx, mu[inst, 0], mu[inst, 1], mu[inst, 2])
    l_f = _double_mean(r**2, inst, b)

    inst = arrays["initial_inst"]
    x0 = arrays["initial_x"]
    u0 = initial_values(model, ctx, x0, inst)
    l_u = _double_mean((u0 - initial_condition(x0, ic_kind)) ** 2, inst, b)

    inst = arrays["boundary_inst"]
    tb = arrays["boundary_t"]
    code = time_code_value(model, ctx, tb, inst)
    hp = ctx.h_param[inst]
    left = decode_values(model, jnp.full_like(tb, x_lo), code, hp)
    right = decode_values(model, jnp.full_like(tb, x_hi), code, hp)
    l_b = _double_mean((left - right) ** 2, inst, b)
    return l_u, l_f, l_b


def _objective(nets, model, arrays, weights, n_steps, ic_kind, bounds):
    parts = loss_terms(model.with_nets(nets), arrays, n_steps, ic_kind, *bounds)
    total = weights[0] * parts[0] + weights[1] * parts[1] + weights[2] * parts[2]
    return total, parts


@functools.partial(jax.jit, static_argnames=("n_steps", "ic_kind", "bounds"))
def _loss_jit(model, arrays, n_steps, ic_kind, bounds):
    return loss_terms(model, arrays, n_steps, ic_kind, *bounds)


def training_steps(model: Model, domain: DomainSpec) -> int:
    return model.integrator.steps_for(domain.t_train) if model.uses_latent_dynamics else 0


def _as_arrays(batch: CollocationBatch) -> dict:
    return {k: jnp.asarray(v) for k, v in batch.arrays().items()}


def compute_losses(model: Model, batch: CollocationBatch, domain: DomainSpec) -> tuple[float, float, float]:
    if batch.n_instances == 0 or min(batch.residual_x.size, batch.initial_x.size, batch.boundary_t.size) == 0:
        raise ConfigurationError("collocation batch has an empty sub-batch")
    parts = _loss_jit(
        model, _as_arrays(batch), training_steps(model, domain), domain.ic_kind,
        (domain.x_min, domain.x_max),
    )
    return tuple(float(p) for p in parts)


def total_loss(parts, weights) -> float:
    return weights[0] * parts[0] + weights[1] * parts[1] + weights[2] * parts[2]


# ---------------------------------------------------------------------------
# Adam


class AdamState(NamedTuple):
    count: Any
    m: Any
    v: Any


def adam_init(params) -> AdamState:
    zeros = jax.tree.map(jnp.zeros_like, params)
    return AdamState(jnp.zeros((), jnp.int32), zeros, jax.tree.map(jnp.zeros_like, params))


def adam_update(params, grads, state: AdamState, lr, b1, b2, eps):
    count = state.count + 1
    m = jax.tree.map(lambda a, g: b1 * a + (1.0 - b1) * g, state.m, grads)
    v = jax.tree.map(lambda a, g: b2 * a + (1.0 - b2) * g * g, state.v, grads)
    c1 = 1.0 - b1**count
    c2 = 1.0 - b2**count
    new = jax.tree.map(lambda p, a, s: p - lr * (a / c1) / (jnp.sqrt(s / c2) + eps), params, m, v)
    return new, AdamState(count, m, v)


@functools.partial(jax.jit, static_argnames=("n_steps", "ic_kind", "bounds"))
def _train_step(nets, opt, model, arrays, weights, hyper, mask, n_steps, ic_kind, bounds):
    (_, parts), grads = jax.value_and_grad(_objective, has_aux=True)(
        nets, model, arrays, weights, n_steps, ic_kind, bounds
    )
    if mask is not None:
        grads = jax.tree.map(lambda g, keep: g * keep, grads, mask)
    lr, b1, b2, eps = hyper
    nets, opt = adam_update(nets, grads, opt, lr, b1, b2, eps)
    return nets, opt, parts


def _select_mus(mu_set, batch_size, rng):
    if len(mu_set) <= batch_size:
        return list(mu_set)
    idx = np.sort(rng.choice(len(mu_set), size=batch_size, replace=False))
    return [mu_set[i] for i in idx]


def run_optimizer(
    model: Model,
    cfg: TrainConfig,
    domain: DomainSpec,
    mu_set: Sequence[PdeParams],
    mask=None,
    fixed_batch: CollocationBatch | None = None,
    log_path=None,
    checkpoint_dir=None,
    progress: Callable[[TrainLogRecord], None] | None = None,
    rng_name: str = "trainer",
) -> tuple[Model, list[TrainLogRecord]]:
    """Adam over ``model.nets`` (gradients multiplied by ``mask`` when given)."""
    if not mu_set:
        raise ConfigurationError("training parameter set is empty")
    rng = rng_for(cfg.seed, rng_name)
    n_steps = training_steps(model, domain)
    bounds = (domain.x_min, domain.x_max)
    weights = jnp.asarray(cfg.weights, dtype=jnp.float64)
    hyper = tuple(jnp.float64(v) for v in (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps))
    nets = model.nets
    opt = adam_init(nets)
    records: list[TrainLogRecord] = []
    fixed = _as_arrays(fixed_batch) if fixed_batch is not None else None
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "L_u", "L_f", "L_b", "total", "seconds"])
    start = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            if fixed is None:
                batch = sample_collocation(domain, _select_mus(mu_set, cfg.mu_batch, rng), cfg.counts, rng)
                arrays = _as_arrays(batch)
            else:
                arrays = fixed
            nets, opt, parts = _train_step(
                nets, opt, model, arrays, weights, hyper, mask, n_steps, domain.ic_kind, bounds
            )
            lu, lf, lb = (float(p) for p in parts)
            rec = TrainLogRecord(step, lu, lf, lb, total_loss((lu, lf, lb), cfg.weights),
                                 time.perf_counter() - start)
            if not np.isfinite(rec.total):
                raise TrainingDiverged(step, {"L_u": lu, "L_f": lf, "L_b": lb})
            records.append(rec)
            if writer is not None and (step % cfg.log_every == 0 or step == 1 or step == cfg.steps):
                writer.writerow([rec.step, repr(lu), repr(lf), repr(lb), repr(rec.total), f"{rec.seconds:.3f}"])
            if progress is not None:
                progress(rec)
            if cfg.checkpoint_every and checkpoint_dir is not None and step % cfg.checkpoint_every == 0:
                save_model(model.with_nets(nets), Path(checkpoint_dir) / f"step_{step:06d}.ckpt")
    finally:
        if fh is not None:
            fh.close()
    return model.with_nets(nets), records


def train(
    model: Model,
    cfg: TrainConfig,
    domain: DomainSpec,
    mu_set: Sequence[PdeParams] | None = None,
    **kwargs,
) -> tuple[Model, list[TrainLogRecord]]:
    """Pre-train every network of ``model`` on ``cfg.mu_set()`` (or ``mu_set``)."""
    mu_set = cfg.mu_set() if mu_set is None else list(mu_set)
    log.info("training %s on %d parameter instances for %d steps", model.kind.value, len(mu_set), cfg.steps)
    return run_optimizer(model, cfg, domain, mu_set, **kwargs)
