"""Latent-dynamics manifold fusion solver for parameterized convection-diffusion-reaction PDEs."""

import jax

jax.config.update("jax_enable_x64", True)

from dldmf.autodiff import Dual2, forward_dual, grad_weights  # noqa: E402
from dldmf.latent_dynamics import IntegratorConfig, LatentState, integrate  # noqa: E402
from dldmf.model import AblationKind, FusedQuery, Model, PdeParams, build_model  # noqa: E402
from dldmf.networks import ModelConfig, NetworkWeights, init_model  # noqa: E402
from dldmf.physics_cdr import DomainSpec, initial_condition  # noqa: E402
from dldmf.reference_solver import SolutionGrid, solve  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AblationKind",
    "DomainSpec",
    "Dual2",
    "FusedQuery",
    "IntegratorConfig",
    "LatentState",
    "Model",
    "ModelConfig",
    "NetworkWeights",
    "PdeParams",
    "SolutionGrid",
    "build_model",
    "forward_dual",
    "grad_weights",
    "init_model",
    "initial_condition",
    "integrate",
    "solve",
]
