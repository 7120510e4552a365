"""Strang-split spectral reference solver for the periodic CDR family.

Each substep applies half a logistic reaction step (exact), a full convection-diffusion
step (exact per Fourier mode), and another half reaction step.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import math
from pathlib import Path

import numpy as np

from dldmf.errors import CheckpointError, ConfigurationError, SolverDiverged
from dldmf.model import PdeParams
from dldmf.physics_cdr import TWO_PI, DomainSpec, initial_condition


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@functools.lru_cache(maxsize=16)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@functools.lru_cache(maxsize=16)
def _twiddles(n: int) -> tuple[np.ndarray, ...]:
    out = []
    m = 2
    while m <= n:
        out.append(np.exp(-2j * np.pi * np.arange(m // 2) / m))
        m *= 2
    return tuple(out)


def fft(x) -> np.ndarray:
    """Iterative radix-2 decimation-in-time DFT along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ConfigurationError(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    y = x[..., _bit_reverse(n)]
    m = 2
    for w in _twiddles(n):
        blocks = y.reshape(*lead, n // m, m)
        even = blocks[..., : m // 2]
        odd = blocks[..., m // 2 :] * w
        y = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        m *= 2
    return y


def ifft(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    return np.conj(fft(np.conj(x))) / x.shape[-1]


class SpectralWorkspace:
    """Wavenumbers for an ``nx``-point periodic grid on a domain of length 2*pi."""

    def __init__(self, nx: int, length: float = TWO_PI):
        if not _is_pow2(nx):
            raise ConfigurationError(f"nx must be a power of two, got {nx}")
        self.nx = nx
        # integer modes in FFT order: 0, 1, ..., nx/2-1, -nx/2, ..., -1
        self.modes = np.concatenate([np.arange(nx // 2), np.arange(-nx // 2, 0)])
        self.k = self.modes * (TWO_PI / length)
        # first derivative has no real representation at the Nyquist mode
        self.k_odd = self.k.copy()
        if nx > 1:
            self.k_odd[nx // 2] = 0.0

    def linear_factor(self, beta: float, nu: float, dt: float) -> np.ndarray:
        return np.exp((-1j * beta * self.k_odd - nu * self.k**2) * dt)

    def apply(self, u: np.ndarray, factor: np.ndarray) -> np.ndarray:
        return ifft(fft(u) * factor).real


def step_convection_diffusion(u, beta: float, nu: float, dt: float, workspace: SpectralWorkspace | None = None):
    u = np.asarray(u, dtype=np.float64)
    ws = workspace or SpectralWorkspace(u.shape[-1])
    return ws.apply(u, ws.linear_factor(beta, nu, dt))


def step_reaction(u, rho: float, dt: float):
    """Exact flow of du/dt = rho u (1 - u) over ``dt``."""
    u = np.asarray(u, dtype=np.float64)
    if rho == 0.0:
        return u.copy()
    g = math.exp(rho * dt)
    return u * g / (u * g + 1.0 - u)


@dataclasses.dataclass
class SolutionGrid:
    u: np.ndarray  # (nt, nx), t-major
    mu: PdeParams
    ic_kind: str
    t_max: float
    x_min: float = 0.0
    x_max: float = TWO_PI

    @property
    def nt(self) -> int:
        return int(self.u.shape[0])

    @property
    def nx(self) -> int:
        return int(self.u.shape[1])

    @property
    def x(self) -> np.ndarray:
        return self.x_min + (self.x_max - self.x_min) * np.arange(self.nx) / self.nx

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.t_max, self.nt)


def default_nt(t_max: float, per_unit: int = 100) -> int:
    return int(round(t_max * per_unit)) + 1


def default_substeps(t_max: float, nt: int, max_dt: float = 1e-3) -> int:
    interval = t_max / (nt - 1)
    return max(1, int(math.ceil(interval / max_dt - 1e-9)))


def solve(
    mu: PdeParams,
    domain: DomainSpec = DomainSpec(),
    nx: int = 256,
    nt: int | None = None,
    substeps: int | None = None,
    t_max: float | None = None,
) -> SolutionGrid:
    """Reference solution sampled at ``nt`` uniform times on [0, t_max]."""
    t_max = domain.t_test if t_max is None else t_max
    nt = default_nt(t_max) if nt is None else nt
    if nt < 2:
        raise ConfigurationError("nt must be at least 2")
    substeps = default_substeps(t_max, nt) if substeps is None else substeps
    if substeps < 1:
        raise ConfigurationError("substeps must be at least 1")
    ws = SpectralWorkspace(nx, domain.length)
    x = domain.x_min + domain.length * np.arange(nx) / nx
    dt = t_max / (nt - 1) / substeps
    linear = ws.linear_factor(mu.beta, mu.nu, dt)
    u = np.asarray(initial_condition(x, domain.ic_kind), dtype=np.float64)
    out = np.empty((nt, nx))
    out[0] = u
    for row in range(1, nt):
        for _ in range(substeps):
            u = step_reaction(u, mu.rho, 0.5 * dt)
            u = ws.apply(u, linear)
            u = step_reaction(u, mu.rho, 0.5 * dt)
        if not np.all(np.isfinite(u)):
            raise SolverDiverged(row * substeps * dt, mu)
        out[row] = u
    return SolutionGrid(out, mu, domain.ic_kind, t_max, domain.x_min, domain.x_max)


# ---------------------------------------------------------------------------
# dataset files


def save_grid(grid: SolutionGrid, path) -> None:
    header = (
        f"nx={grid.nx}\nnt={grid.nt}\nbeta={grid.mu.beta!r}\nnu={grid.mu.nu!r}\n"
        f"rho={grid.mu.rho!r}\nic={grid.ic_kind}\nt_max={grid.t_max!r}\n\n"
    )
    body = np.ascontiguousarray(grid.u, dtype="<f8").tobytes()
    Path(path).write_bytes(header.encode("utf-8") + body)


def load_grid(path) -> SolutionGrid:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"dataset file not found: {path}")
    data = path.read_bytes()
    end = data.find(b"\n\n")
    if end < 0:
        raise CheckpointError(f"{path}: header not terminated by a blank line")
    meta = {}
    for line in data[:end].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    try:
        nx, nt = int(meta["nx"]), int(meta["nt"])
        mu = PdeParams(float(meta["beta"]), float(meta["nu"]), float(meta["rho"]))
        ic, t_max = meta["ic"], float(meta["t_max"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: header missing {exc.args[0]!r}") from None
    body = data[end + 2 :]
    if len(body) != 8 * nx * nt:
        raise CheckpointError(f"{path}: expected {nx * nt} values, found {len(body) // 8}")
    u = np.frombuffer(body, dtype="<f8").reshape(nt, nx).astype(np.float64)
    return SolutionGrid(u, mu, ic, t_max)


def write_manifest(rows, path) -> None:
    """Sweep manifest CSV with one (file, beta, nu, rho) row per dataset."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "beta", "nu", "rho"])
        for name, mu in rows:
            writer.writerow([name, repr(mu.beta), repr(mu.nu), repr(mu.rho)])


def read_manifest(path) -> list[tuple[str, PdeParams]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        return [
            (row["file"], PdeParams(float(row["beta"]), float(row["nu"]), float(row["rho"])))
            for row in csv.DictReader(fh)
        ]
