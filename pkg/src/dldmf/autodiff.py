"""Second-order forward-mode duals for input derivatives, reverse mode for weight gradients.

Spatial derivatives u_x and u_xx are pushed through the networks as truncated Taylor
jets (:class:`Dual2`).  Weight gradients of losses built from those jets come from a
reverse sweep over the recorded dual arithmetic (reverse-over-forward); the sweep
itself is delegated to JAX's vector-Jacobian products.
"""

from __future__ import annotations

import dataclasses
from typing import Any, Callable, NamedTuple

import jax
import jax.numpy as jnp
from jax.extend import core as jax_core

from dldmf.errors import ConfigurationError


class TapeError(ValueError):
    pass


@dataclasses.dataclass
class Dual2:
    """Value with first and second derivative along one seeded direction."""

    value: Any
    d1: Any
    d2: Any

    @classmethod
    def seed(cls, x):
        x = jnp.asarray(x, dtype=jnp.float64)
        return cls(x, jnp.ones_like(x), jnp.zeros_like(x))

    @classmethod
    def constant(cls, x):
        x = jnp.asarray(x, dtype=jnp.float64)
        return cls(x, jnp.zeros_like(x), jnp.zeros_like(x))

    def __iter__(self):
        return iter((self.value, self.d1, self.d2))

    def __getitem__(self, idx):
        return Dual2(self.value[idx], self.d1[idx], self.d2[idx])

    def _chain(self, f0, f1, f2):
        return Dual2(f0, f1 * self.d1, f1 * self.d2 + f2 * self.d1 * self.d1)

    def __add__(self, other):
        if isinstance(other, Dual2):
            return Dual2(self.value + other.value, self.d1 + other.d1, self.d2 + other.d2)
        return Dual2(self.value + other, self.d1, self.d2)

    __radd__ = __add__

    def __neg__(self):
        return Dual2(-self.value, -self.d1, -self.d2)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual2):
            return Dual2(
                self.value * other.value,
                self.d1 * other.value + self.value * other.d1,
                self.d2 * other.value + 2 * self.d1 * other.d1 + self.value * other.d2,
            )
        return Dual2(self.value * other, self.d1 * other, self.d2 * other)

    __rmul__ = __mul__

    def reciprocal(self):
        r = 1.0 / self.value
        return self._chain(r, -r * r, 2.0 * r * r * r)

    def __truediv__(self, other):
        if isinstance(other, Dual2):
            return self * other.reciprocal()
        return Dual2(self.value / other, self.d1 / other, self.d2 / other)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, n: int):
        if not isinstance(n, int) or n < 0:
            raise TypeError("Dual2 supports non-negative integer powers only")
        if n == 0:
            return Dual2.constant(jnp.ones_like(self.value))
        p1 = self.value ** (n - 1)
        p2 = self.value ** (n - 2) if n >= 2 else jnp.zeros_like(self.value)
        return self._chain(self.value**n, n * p1, n * (n - 1) * p2)

    def __matmul__(self, matrix):
        return Dual2(self.value @ matrix, self.d1 @ matrix, self.d2 @ matrix)

    def tanh(self):
        t = jnp.tanh(self.value)
        s = 1.0 - t * t
        return self._chain(t, s, -2.0 * t * s)

    def sin(self):
        s, c = jnp.sin(self.value), jnp.cos(self.value)
        return self._chain(s, c, -s)

    def cos(self):
        s, c = jnp.sin(self.value), jnp.cos(self.value)
        return self._chain(c, -s, -c)

    def exp(self):
        e = jnp.exp(self.value)
        return self._chain(e, e, e)


jax.tree_util.register_dataclass(Dual2, data_fields=["value", "d1", "d2"], meta_fields=[])


def tanh(x):
    return x.tanh() if isinstance(x, Dual2) else jnp.tanh(x)


def sin(x):
    return x.sin() if isinstance(x, Dual2) else jnp.sin(x)


def cos(x):
    return x.cos() if isinstance(x, Dual2) else jnp.cos(x)


def exp(x):
    return x.exp() if isinstance(x, Dual2) else jnp.exp(x)


def concat(parts, axis=-1) -> Dual2:
    """Concatenate duals and plain arrays (the latter as constants)."""
    parts = [p if isinstance(p, Dual2) else Dual2.constant(p) for p in parts]
    return Dual2(
        jnp.concatenate([p.value for p in parts], axis),
        jnp.concatenate([p.d1 for p in parts], axis),
        jnp.concatenate([p.d2 for p in parts], axis),
    )


def push_dual(net, x: Dual2) -> Dual2:
    """Propagate a jet through a dense network; the value channel matches ``eval_net``."""
    if x.value.shape[-1] != net.in_width:
        raise ConfigurationError(
            f"network {net.name!r} expects input width {net.in_width}, got {x.value.shape[-1]}"
        )
    v, d1, d2 = x.value, x.d1, x.d2
    for layer in net.layers:
        v = layer.linear(v) + layer.bias
        d1 = layer.linear(d1)
        d2 = layer.linear(d2)
        if layer.activation == "tanh":
            t = jnp.tanh(v)
            s = 1.0 - t * t
            v, d1, d2 = t, s * d1, s * d2 - 2.0 * t * s * d1 * d1
    return Dual2(v, d1, d2)


def push_dual_tangent(net, x: Dual2, tangent):
    """Like :func:`push_dual` but also carries one extra first-order direction.

    Returns the output jet and the directional derivative of the output along
    ``tangent``; the value computation is shared by both.
    """
    v, d1, d2, e = x.value, x.d1, x.d2, tangent
    for layer in net.layers:
        v = layer.linear(v) + layer.bias
        d1 = layer.linear(d1)
        d2 = layer.linear(d2)
        e = layer.linear(e)
        if layer.activation == "tanh":
            t = jnp.tanh(v)
            s = 1.0 - t * t
            v, d1, d2, e = t, s * d1, s * d2 - 2.0 * t * s * d1 * d1, s * e
    return Dual2(v, d1, d2), e


def forward_dual(net, inputs, seed_index: int) -> Dual2:
    """Evaluate ``net`` at ``inputs`` with derivatives w.r.t. ``inputs[seed_index]``."""
    x = jnp.asarray(inputs, dtype=jnp.float64)
    if x.ndim != 1 or x.shape[0] != net.in_width:
        raise ConfigurationError(
            f"network {net.name!r} expects {net.in_width} inputs, got shape {x.shape}"
        )
    if not 0 <= seed_index < x.shape[0]:
        raise ConfigurationError(f"seed_index {seed_index} out of range for {x.shape[0]} inputs")
    d1 = jnp.zeros_like(x).at[seed_index].set(1.0)
    return push_dual(net, Dual2(x, d1, jnp.zeros_like(x)))


# ---------------------------------------------------------------------------
# reverse mode


class TapeNode(NamedTuple):
    op: str
    parents: tuple[int, ...]


def record(loss_fn: Callable, weights) -> list[TapeNode]:
    """Flatten the traced computation of ``loss_fn(weights)`` into tape order.

    Leaves of ``weights`` come first as ``input`` nodes; every primitive that follows
    lists the indices of the nodes it reads.
    """
    closed = jax.make_jaxpr(loss_fn)(weights)
    index: dict[Any, int] = {}
    tape: list[TapeNode] = []
    for var in closed.jaxpr.invars:
        index[var] = len(tape)
        tape.append(TapeNode("input", ()))
    for var in closed.jaxpr.constvars:
        index[var] = len(tape)
        tape.append(TapeNode("const", ()))
    for eqn in closed.jaxpr.eqns:
        parents = tuple(index[v] for v in eqn.invars if not isinstance(v, jax_core.Literal))
        for out in eqn.outvars:
            index[out] = len(tape)
            tape.append(TapeNode(eqn.primitive.name, parents))
    return tape


def grad_weights(loss_fn: Callable, weights, *args, has_aux: bool = False):
    """Gradient of the scalar ``loss_fn(weights, *args)`` for every leaf of ``weights``.

    Leaves the loss does not read receive exact zeros.
    """
    shape = jax.eval_shape(lambda w: loss_fn(w, *args), weights)
    root = shape[0] if has_aux else shape
    if getattr(root, "shape", ()) != ():
        raise TapeError(f"loss must be scalar, got root of shape {root.shape}")
    return jax.grad(loss_fn, has_aux=has_aux)(weights, *args)
