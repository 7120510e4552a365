"""Error metrics against reference grids, regime splits, and latency probes."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import statistics
import time
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from dldmf.errors import ConfigurationError, MissingReference
from dldmf.model import AblationKind, Model, PdeParams, autodecode_init, feedforward_z0, predict_grid
from dldmf.physics_cdr import initial_condition
from dldmf.reference_solver import SolutionGrid

log = logging.getLogger(__name__)

IN_T, OUT_T = "in_t", "out_t"
IN_MU, OUT_MU = "in_mu", "out_mu"
RESULT_COLUMNS = (
    "model", "kind", "beta", "nu", "rho", "regime",
    "l2_abs", "l2_rel", "max_err", "exp_var", "latency_ms",
)
SUMMARY_COLUMNS = ("model", "kind", "regime", "n", "mean_l2_rel", "std_l2_rel")


@dataclasses.dataclass(frozen=True)
class MetricsRecord:
    l2_abs: float
    l2_rel: float  # nan when rel_defined is False
    max_err: float
    explained_variance: float
    rel_defined: bool = True
    t_regime: str = IN_T
    mu_regime: str = IN_MU
    mu: PdeParams | None = None
    latency_ms: float = float("nan")
    model: str = ""
    kind: str = ""

    @property
    def regime(self) -> str:
        return f"{self.t_regime}/{self.mu_regime}"


def explained_variance(truth, pred) -> float:
    """1 - Var(u - û) / Var(u) with pooled population variance.

    Constant truth: 1 when the residual is constant too, else 0.
    """
    u = np.asarray(truth, dtype=np.float64).ravel()
    e = u - np.asarray(pred, dtype=np.float64).ravel()
    var_u = float(np.var(u))
    var_e = float(np.var(e))
    if var_u == 0.0:
        return 1.0 if var_e == 0.0 else 0.0
    return 1.0 - var_e / var_u


def metrics(pred, truth, t_mask=None, **tags) -> MetricsRecord:
    """Errors over the rows of ``truth`` selected by ``t_mask`` (all rows if None).

    ``pred`` and ``truth`` are (nt, nx) arrays or :class:`SolutionGrid` objects.
    """
    u = truth.u if isinstance(truth, SolutionGrid) else np.asarray(truth, dtype=np.float64)
    p = pred.u if isinstance(pred, SolutionGrid) else np.asarray(pred, dtype=np.float64)
    if u.shape != p.shape:
        raise ConfigurationError(f"prediction shape {p.shape} differs from reference {u.shape}")
    if t_mask is not None:
        t_mask = np.asarray(t_mask, dtype=bool)
        if u.ndim == 0 or t_mask.shape != u.shape[:1]:
            raise ConfigurationError("t_mask must select rows of the grid")
        u, p = u[t_mask], p[t_mask]
    if u.size == 0:
        raise ConfigurationError("mask selects no entries")
    diff = (p - u).ravel()
    l2_abs = float(np.linalg.norm(diff))
    norm_u = float(np.linalg.norm(u))
    if norm_u > 0:
        l2_rel, defined = l2_abs / norm_u, True
    else:
        l2_rel, defined = (0.0, True) if l2_abs == 0.0 else (float("nan"), False)
    return MetricsRecord(
        l2_abs=l2_abs,
        l2_rel=l2_rel,
        max_err=float(np.max(np.abs(diff))),
        explained_variance=explained_variance(u, p),
        rel_defined=defined,
        **tags,
    )


@dataclasses.dataclass(frozen=True)
class EvalPlan:
    """Which reference grids to score and how to split them.

    ``horizon`` caps the Out-t rows at t <= horizon (None keeps every row).
    """

    t_train: float = 1.0
    train_lo: tuple = (1.0, 0.0, 0.0)
    train_hi: tuple = (5.0, 0.0, 0.0)
    interpolation: tuple = ()
    extrapolation: tuple = ()
    horizon: float | None = None
    rollout: bool = False
    autodecode_steps: int = 100
    autodecode_rate: float = 1e-2

    def __post_init__(self):
        if self.t_train <= 0:
            raise ConfigurationError("t_train must be positive")
        if self.horizon is not None and self.horizon < self.t_train:
            raise ConfigurationError("horizon must not be below t_train")
        for mu in self.interpolation:
            if not self.inside(mu):
                raise ConfigurationError(f"interpolation mu {mu} lies outside the training ranges")
        for mu in self.extrapolation:
            if not self.strictly_outside(mu):
                raise ConfigurationError(f"extrapolation mu {mu} is not strictly outside the training ranges")

    def inside(self, mu: PdeParams) -> bool:
        a = mu.as_array()
        return bool(np.all(a >= np.asarray(self.train_lo)) and np.all(a <= np.asarray(self.train_hi)))

    def strictly_outside(self, mu: PdeParams) -> bool:
        a = mu.as_array()
        return bool(np.any(a < np.asarray(self.train_lo)) or np.any(a > np.asarray(self.train_hi)))

    def queries(self) -> list[tuple[PdeParams, str]]:
        return [(m, IN_MU) for m in self.interpolation] + [(m, OUT_MU) for m in self.extrapolation]

    def row_masks(self, t) -> dict[str, np.ndarray]:
        t = np.asarray(t)
        cap = np.inf if self.horizon is None else self.horizon
        eps = 1e-9 * max(1.0, self.t_train)
        return {IN_T: t <= self.t_train + eps, OUT_T: (t > self.t_train + eps) & (t <= cap + eps)}


class Predictor(Protocol):
    def predict(self, mu: PdeParams, x, t, initial=None) -> np.ndarray: ...


class ReferenceOracle:
    """Predictor that returns the reference solution itself."""

    name = "oracle"
    kind = "oracle"

    def __init__(self, references: Sequence[SolutionGrid]):
        self.references = list(references)

    def predict(self, mu, x, t, initial=None):
        return find_reference(self.references, mu).u.copy()


class ModelPredictor:
    """Adapts a :class:`Model` to grid prediction.

    The auto-decoding kind infers z_0 from the snapshot ``initial`` (the t = 0 row); with
    ``rollout`` it re-infers every ``window`` time units from its own last prediction.
    """

    def __init__(self, model: Model, name: str | None = None, rollout: bool = False, window: float = 1.0,
                 steps: int = 100, rate: float = 1e-2):
        self.model = model
        self.name = name or model.kind.value
        self.kind = model.kind.value
        self.rollout = rollout and model.kind is AblationKind.AUTODECODE_INIT
        self.window = window
        self.steps = steps
        self.rate = rate

    def _autodecode(self, mu, x, snapshot):
        return autodecode_init(self.model, mu, x, snapshot, self.steps, self.rate).state.z

    def predict(self, mu, x, t, initial=None):
        m = self.model
        if m.kind is not AblationKind.AUTODECODE_INIT:
            return predict_grid(m, mu, x, t)
        if initial is None:
            raise ConfigurationError("auto-decoding needs the initial snapshot")
        t = np.asarray(t, dtype=np.float64)
        if not self.rollout:
            return predict_grid(m, mu, x, t, self._autodecode(mu, x, initial))
        out = np.empty((t.size, np.size(x)))
        snapshot, start = np.asarray(initial), 0.0
        while True:
            rows = (t >= start - 1e-12) & (t <= start + self.window + 1e-12)
            local = np.append(t[rows] - start, self.window)
            pred = predict_grid(m, mu, x, local, self._autodecode(mu, x, snapshot))
            out[rows] = pred[:-1]
            start += self.window
            if start >= t[-1] - 1e-12:
                return out
            snapshot = pred[-1]


def as_predictor(model, **kw) -> Predictor:
    return ModelPredictor(model, **kw) if isinstance(model, Model) else model


def find_reference(references: Sequence[SolutionGrid], mu: PdeParams) -> SolutionGrid:
    for ref in references:
        if np.allclose(ref.mu.as_array(), mu.as_array(), rtol=0, atol=1e-12):
            return ref
    raise MissingReference(mu)


def evaluate_model(model, plan: EvalPlan, references: Sequence[SolutionGrid], name: str | None = None
                   ) -> list[MetricsRecord]:
    """One record per (mu, time regime); empty regimes are omitted."""
    pred_fn = as_predictor(model, rollout=plan.rollout, window=plan.t_train,
                           steps=plan.autodecode_steps, rate=plan.autodecode_rate)
    name = name or getattr(pred_fn, "name", "model")
    kind = getattr(pred_fn, "kind", "")
    queries = plan.queries()
    refs = [find_reference(references, mu) for mu, _ in queries]  # fail before any work
    records = []
    warmed = set()
    for (mu, mu_regime), ref in zip(queries, refs):
        x, t = ref.x, ref.t
        if (x.size, t.size) not in warmed:
            pred_fn.predict(mu, x, t, ref.u[0])  # compile outside the timed call
            warmed.add((x.size, t.size))
        start = time.perf_counter()
        pred = pred_fn.predict(mu, x, t, ref.u[0])
        latency = 1e3 * (time.perf_counter() - start)
        for t_regime, mask in plan.row_masks(t).items():
            if not mask.any():
                continue
            records.append(metrics(pred, ref, mask, t_regime=t_regime, mu_regime=mu_regime, mu=mu,
                                   latency_ms=latency, model=name, kind=kind))
    return records


@dataclasses.dataclass(frozen=True)
class RegimeSummary:
    model: str
    kind: str
    regime: str
    n: int
    mean_l2_rel: float
    std_l2_rel: float


def aggregate(records: Sequence[MetricsRecord]) -> list[RegimeSummary]:
    """Mean and population std of l2_rel across mu, per (model, regime)."""
    groups: dict[tuple, list[float]] = {}
    kinds = {}
    for r in records:
        key = (r.model, r.regime)
        kinds[key] = r.kind
        if r.rel_defined:
            groups.setdefault(key, []).append(r.l2_rel)
        else:
            groups.setdefault(key, [])
    out = []
    for (model, regime), vals in groups.items():
        mean = float(np.mean(vals)) if vals else float("nan")
        std = float(np.std(vals)) if vals else float("nan")
        out.append(RegimeSummary(model, kinds[(model, regime)], regime, len(vals), mean, std))
    return out


# ---------------------------------------------------------------------------
# latency


@dataclasses.dataclass(frozen=True)
class TimingStats:
    feedforward_ms: tuple
    autodecode_ms: tuple
    feedforward_steps: int
    autodecode_steps: int
    feedforward_init_ms: tuple = ()
    autodecode_init_ms: tuple = ()

    @staticmethod
    def _median(xs):
        return statistics.median(xs) if xs else float("nan")

    @property
    def median_feedforward_ms(self) -> float:
        return self._median(self.feedforward_ms)

    @property
    def median_autodecode_ms(self) -> float:
        return self._median(self.autodecode_ms)

    @property
    def ratio(self) -> float:
        ff = self.median_feedforward_ms
        return self.median_autodecode_ms / ff if ff and not math.isnan(ff) else float("nan")

    @property
    def init_ratio(self) -> float:
        ff = self._median(self.feedforward_init_ms)
        return self._median(self.autodecode_init_ms) / ff if ff and not math.isnan(ff) else float("nan")


def timing_probe(
    model: Model,
    n_queries: int,
    nx: int = 256,
    t_max: float = 1.0,
    nt: int = 101,
    steps: int = 100,
    rate: float = 1e-2,
    ic_kind: str = "gaussian",
    seed: int = 0,
) -> TimingStats:
    """Median wall-clock of full queries (mu -> z_0 -> integrate -> decode grid).

    Feed-forward uses the latent-init network (0 gradient steps); the auto-decoding path
    runs ``steps`` gradient steps on the t = 0 snapshot with the same decoder first.
    Compilation is excluded by a warm-up query.
    """
    if n_queries == 0:
        return TimingStats((), (), 0, steps)
    if not model.uses_latent_dynamics:
        raise ConfigurationError("timing probe compares latent initializations; static models have none")
    x = np.arange(nx) * (2.0 * math.pi / nx)
    t = np.linspace(0.0, t_max, nt)
    u0 = np.asarray(initial_condition(x, ic_kind))
    lo, hi = np.asarray(model.mu_lo), np.asarray(model.mu_hi)
    rng = np.random.default_rng(seed)
    mus = [PdeParams.from_array(lo + (hi - lo) * rng.random(3)) for _ in range(n_queries)]

    def ff_init(mu):
        return feedforward_z0(model, mu)

    def ff_query(mu):
        return predict_grid(model, mu, x, t)

    def ad_init(mu):
        return autodecode_init(model, mu, x, u0, steps, rate).state.z

    def ad_query(mu):
        return predict_grid(model, mu, x, t, ad_init(mu))

    def clock(fn, mu):
        start = time.perf_counter()
        np.asarray(fn(mu))
        return 1e3 * (time.perf_counter() - start)

    for fn in (ff_init, ff_query, ad_init, ad_query):
        fn(mus[0])
    ff, ad, ffi, adi = [], [], [], []
    for mu in mus:
        ffi.append(clock(ff_init, mu))
        adi.append(clock(ad_init, mu))
        ff.append(clock(ff_query, mu))
        ad.append(clock(ad_query, mu))
    return TimingStats(tuple(ff), tuple(ad), 0, steps, tuple(ffi), tuple(adi))


# ---------------------------------------------------------------------------
# output files


def _fmt(v) -> str:
    return "" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def write_results(records: Sequence[MetricsRecord], path, include_latency: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in records:
            mu = r.mu or PdeParams()
            w.writerow([
                r.model, r.kind, repr(mu.beta), repr(mu.nu), repr(mu.rho), r.regime,
                _fmt(r.l2_abs), _fmt(r.l2_rel), _fmt(r.max_err), _fmt(r.explained_variance),
                f"{r.latency_ms:.3f}" if include_latency and not math.isnan(r.latency_ms) else "",
            ])


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(summaries: Sequence[RegimeSummary], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            w.writerow([s.model, s.kind, s.regime, s.n, _fmt(s.mean_l2_rel), _fmt(s.std_l2_rel)])


def write_snapshots(directory, model_name: str, mu: PdeParams, x, t, pred, times=(1.0, 5.0, 10.0)) -> list[Path]:
    """Two-column ``x u_hat`` text tables, one per snapshot time within the grid."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t = np.asarray(t)
    written = []
    for ts in times:
        if ts > t[-1] + 1e-9 or ts < t[0] - 1e-9:
            continue
        row = int(np.argmin(np.abs(t - ts)))
        path = directory / f"{model_name}_{mu.label()}_t{ts:g}.dat"
        np.savetxt(path, np.column_stack([x, pred[row]]), fmt="%.17g",
                   header=f"x u_hat (t={t[row]:.6g})")
        written.append(path)
    return written
