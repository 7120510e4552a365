"""INI-style run configuration: one section per component, unknown keys rejected."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from pathlib import Path

from dldmf.errors import ConfigurationError
from dldmf.evaluation import EvalPlan
from dldmf.latent_dynamics import IntegratorConfig
from dldmf.model import PdeParams
from dldmf.networks import ModelConfig
from dldmf.physics_cdr import DomainSpec
from dldmf.svd_finetune import FinetuneConfig
from dldmf.trainer import FAMILIES, TrainConfig

DEFAULT_INTERPOLATION = "1.5,0,0; 2.5,0,0; 3.5,0,0; 4.5,0,0"
DEFAULT_EXTRAPOLATION = "6,0,0; 8,0,0; 10,0,0"

# key -> default, per section; the default's type decides how the text is parsed
SCHEMA: dict[str, dict[str, object]] = {
    "domain": {f.name: f.default for f in dataclasses.fields(DomainSpec)},
    "model": {f.name: f.default for f in dataclasses.fields(ModelConfig)
              if f.name not in ("seed", "decoder_input_width")},
    "integrator": {f.name: f.default for f in dataclasses.fields(IntegratorConfig)},
    "train": {f.name: f.default for f in dataclasses.fields(TrainConfig) if f.name != "seed"},
    "finetune": {
        "beta": 2.5, "nu": 0.0, "rho": 0.0, "steps": 2000, "lr": 1e-3, "train_outer": False,
        "n_residual": 128, "n_initial": 64, "n_boundary": 32,
    },
    "generate": {"sweep": "train", "nx": 256},
    "eval": {
        "interpolation": DEFAULT_INTERPOLATION,
        "extrapolation": DEFAULT_EXTRAPOLATION,
        "horizon": "",
        "rollout": False,
        "autodecode_steps": 100,
        "autodecode_rate": 1e-2,
        "snapshots": (1.0, 5.0, 10.0),
        "timing_queries": 20,
    },
    "paths": {"data": "data", "checkpoint": "checkpoints/dldmf.ckpt"},
    "run": {"seed": 0},
}
SWEEPS = ("train", "eval", "all")


def _parse(section: str, key: str, text: str, default):
    where = f"[{section}] {key} = {text!r}"
    try:
        if isinstance(default, bool):
            lowered = text.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [p for p in text.replace(" ", "").split(",") if p]
            cast = type(default[0]) if default else float
            return tuple(cast(p) for p in items)
    except ValueError:
        raise ConfigurationError(f"cannot parse {where} as {type(default).__name__}") from None
    return text.strip()


def parse_mu_list(text: str) -> tuple[PdeParams, ...]:
    """``"b,n,r; b,n,r"``; a lone number is read as beta."""
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        vals = [float(v) for v in chunk.split(",")]
        if len(vals) == 1:
            vals += [0.0, 0.0]
        if len(vals) != 3:
            raise ConfigurationError(f"parameter entry {chunk!r} needs 1 or 3 numbers")
        out.append(PdeParams(*vals))
    return tuple(out)


@dataclasses.dataclass
class RunConfig:
    values: dict
    text: str = ""
    overrides: tuple = ()
    source: str | None = None

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def domain(self) -> DomainSpec:
        return DomainSpec(**self.values["domain"])

    def model(self) -> ModelConfig:
        return ModelConfig(**self.values["model"], seed=self.seed)

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(**self.values["integrator"])

    def train(self) -> TrainConfig:
        return TrainConfig(**self.values["train"], seed=self.seed)

    def finetune(self) -> FinetuneConfig:
        v = dict(self.values["finetune"])
        query = PdeParams(v.pop("beta"), v.pop("nu"), v.pop("rho"))
        return FinetuneConfig(query=query, seed=self.seed, **v)

    def plan(self) -> EvalPlan:
        e = self.values["eval"]
        tc = self.train()
        active = FAMILIES[tc.family]
        lo = tuple(tc.mu_range[0] if c in active else 0.0 for c in ("beta", "nu", "rho"))
        hi = tuple(tc.mu_range[1] if c in active else 0.0 for c in ("beta", "nu", "rho"))
        horizon = e["horizon"].strip() if isinstance(e["horizon"], str) else e["horizon"]
        return EvalPlan(
            t_train=self.domain().t_train,
            train_lo=lo,
            train_hi=hi,
            interpolation=parse_mu_list(e["interpolation"]),
            extrapolation=parse_mu_list(e["extrapolation"]),
            horizon=float(horizon) if horizon not in ("", None) else None,
            rollout=e["rollout"],
            autodecode_steps=e["autodecode_steps"],
            autodecode_rate=e["autodecode_rate"],
        )

    def sweep(self) -> list[PdeParams]:
        kind = self.values["generate"]["sweep"]
        if kind not in SWEEPS:
            raise ConfigurationError(f"[generate] sweep must be one of {SWEEPS}, got {kind!r}")
        mus: list[PdeParams] = []
        if kind in ("train", "all"):
            mus += self.train().mu_set()
        if kind in ("eval", "all"):
            plan = self.plan()
            mus += list(plan.interpolation) + list(plan.extrapolation)
        seen, out = set(), []
        for m in mus:
            if m not in seen:
                seen.add(m)
                out.append(m)
        return out

    def digest(self) -> str:
        h = hashlib.sha256(self.text.encode("utf-8"))
        for o in self.overrides:
            h.update(b"\0" + o.encode("utf-8"))
        return h.hexdigest()

    def validate(self) -> None:
        """Build every component once so that bad values fail before any work."""
        self.domain(), self.model(), self.integrator(), self.train(), self.finetune(), self.plan()
        self.sweep()


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Parse ``path`` (optional) then apply ``section.key=value`` overrides in order."""
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path or "<defaults>"))
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    raw: dict[str, dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
    overrides = tuple(overrides)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        raw.setdefault(section, {})[name] = value.strip()
    if seed is not None:
        raw.setdefault("run", {})["seed"] = str(seed)
        overrides += (f"run.seed={seed}",)
    values = {s: dict(defaults) for s, defaults in SCHEMA.items()}
    for section, items in raw.items():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, text_value in items.items():
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"unknown config key {key!r} in [{section}]")
            values[section][key] = _parse(section, key, text_value, SCHEMA[section][key])
    cfg = RunConfig(values, text, overrides, None if path is None else str(path))
    cfg.validate()
    return cfg
