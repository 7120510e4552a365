"""SVD modulation: refit only the singular values of the decoder's hidden layers."""

from __future__ import annotations

import dataclasses
import logging

import jax
import jax.numpy as jnp
import numpy as np

from dldmf.errors import ConfigurationError, NumericalError
from dldmf.model import Model, PdeParams
from dldmf.networks import DenseLayer, NetworkWeights, SvdFactoredLayer
from dldmf.physics_cdr import DomainSpec
from dldmf.trainer import TrainConfig, TrainLogRecord, run_optimizer

log = logging.getLogger(__name__)


def _complete_basis(basis: np.ndarray, rank: int) -> np.ndarray:
    """Replace columns beyond ``rank`` with an orthonormal completion."""
    m, r = basis.shape
    out = basis.copy()
    for j in range(rank, r):
        for e in np.eye(m):
            v = e - out[:, :j] @ (out[:, :j].T @ e)
            v -= out[:, :j] @ (out[:, :j].T @ v)
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                out[:, j] = v / norm
                break
    return out


def svd(matrix, tol: float = 1e-15, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi SVD: ``matrix = psi @ diag(alpha) @ phi.T``, alpha descending.

    Shapes: psi (m, r), alpha (r,), phi (n, r) with r = min(m, n).
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ConfigurationError("svd expects a matrix")
    if not np.all(np.isfinite(a)):
        raise ConfigurationError("svd input has non-finite entries")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    m, n = a.shape
    u = a.copy()
    v = np.eye(n)
    # columns below this squared norm are numerically zero and left alone
    floor = (1e-15 * np.linalg.norm(a)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ui, uj = u[:, i], u[:, j]
                alpha = ui @ ui
                beta = uj @ uj
                gamma = ui @ uj
                if min(alpha, beta) <= floor or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                u[:, [i, j]] = np.stack([c * ui - s * uj, s * ui + c * uj], axis=1)
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    sigma = np.linalg.norm(u, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, u, v = sigma[order], u[:, order], v[:, order]
    scale = sigma[0] if sigma.size and sigma[0] > 0 else 1.0
    rank = int(np.sum(sigma > scale * 1e-14))
    left = np.zeros_like(u)
    left[:, :rank] = u[:, :rank] / sigma[:rank]
    left = _complete_basis(left, rank)
    sigma[rank:] = 0.0
    if transposed:
        return v, sigma, left
    return left, sigma, v


def factor_layer(layer: DenseLayer) -> SvdFactoredLayer:
    psi, alpha, phi = svd(np.asarray(layer.matrix))
    return SvdFactoredLayer(jnp.asarray(psi), jnp.asarray(alpha), jnp.asarray(phi), layer.bias, layer.activation)


def factor_decoder(model: Model) -> Model:
    """Factor decoder layers 2 .. D_g - 1 (1-based); first and last stay dense."""
    dec = model.nets["decoder"]
    if len(dec.layers) < 3:
        raise ConfigurationError("decoder needs at least 3 layers to have a modulatable hidden layer")
    layers = list(dec.layers)
    for i in range(1, len(layers) - 1):
        if isinstance(layers[i], DenseLayer):
            layers[i] = factor_layer(layers[i])
    nets = dict(model.nets)
    nets["decoder"] = NetworkWeights(dec.name, layers)
    return model.with_nets(nets)


def factored_layers(model: Model) -> list[SvdFactoredLayer]:
    return [l for l in model.nets["decoder"].layers if isinstance(l, SvdFactoredLayer)]


def trainable_mask(model: Model, train_outer: bool = False) -> dict:
    """0/1 arrays shaped like ``model.nets``; 1 marks a learnable entry.

    Learnable: every ``alpha``, plus the first and last decoder layers when ``train_outer``.
    """
    n_layers = len(model.nets["decoder"].layers)
    mask = {}
    for name, net in model.nets.items():
        layers = []
        for i, layer in enumerate(net.layers):
            outer = name == "decoder" and train_outer and i in (0, n_layers - 1)
            if isinstance(layer, SvdFactoredLayer):
                z = jnp.zeros_like
                layers.append(SvdFactoredLayer(z(layer.psi), jnp.ones_like(layer.alpha), z(layer.phi),
                                               z(layer.bias), layer.activation))
            else:
                fill = jnp.ones_like if outer else jnp.zeros_like
                layers.append(DenseLayer(fill(layer.matrix), fill(layer.bias), layer.activation))
        mask[name] = NetworkWeights(name, layers)
    return mask


def trainable_count(model: Model, train_outer: bool = False) -> int:
    mask = trainable_mask(model, train_outer)
    return int(sum(np.sum(m) for m in jax.tree.leaves(mask)))


@dataclasses.dataclass(frozen=True)
class FinetuneConfig:
    query: PdeParams = PdeParams(2.5, 0.0, 0.0)
    steps: int = 2000
    lr: float = 1e-3
    train_outer: bool = False
    n_residual: int = 128
    n_initial: int = 64
    n_boundary: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigurationError("fine-tuning steps must be positive")

    def as_train_config(self, base: TrainConfig = TrainConfig()) -> TrainConfig:
        return dataclasses.replace(
            base, lr=self.lr, steps=self.steps, mu_batch=1, n_residual=self.n_residual,
            n_initial=self.n_initial, n_boundary=self.n_boundary, seed=self.seed,
        )


def finetune(
    model: Model,
    cfg: FinetuneConfig,
    domain: DomainSpec,
    base: TrainConfig = TrainConfig(),
    **kwargs,
) -> tuple[Model, list[TrainLogRecord]]:
    """Adam on the singular values only, for the single query ``cfg.query``.

    ``model`` is factored first if it is not already.
    """
    if not factored_layers(model):
        model = factor_decoder(model)
    mask = trainable_mask(model, cfg.train_outer)
    log.info("fine-tuning %d of %d scalars at %s", trainable_count(model, cfg.train_outer),
             model.param_count(), cfg.query)
    return run_optimizer(
        model, cfg.as_train_config(base), domain, [cfg.query], mask=mask,
        rng_name="finetune", **kwargs,
    )
