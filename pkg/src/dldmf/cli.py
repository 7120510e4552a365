"""Command-line entry point: ``dldmf {generate,train,finetune,eval,ablate,timing}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

from dldmf import __version__
from dldmf.config import RunConfig, load_config
from dldmf.errors import (
    AutodecodeDiverged,
    CheckpointError,
    ConfigurationError,
    IntegrationDiverged,
    IntegrationHorizonError,
    MissingReference,
    SolverDiverged,
    TrainingDiverged,
)

log = logging.getLogger("dldmf")

OUT_ENV = "DLDMF_OUT"
DEFAULT_OUT = "runs"
COMMANDS = ("generate", "train", "finetune", "eval", "ablate", "timing")


class MissingArtifact(FileNotFoundError):
    pass


@dataclasses.dataclass
class Run:
    command: str
    cfg: RunConfig
    out: Path
    artifacts: list = dataclasses.field(default_factory=list)
    results: dict = dataclasses.field(default_factory=dict)

    def path(self, key: str) -> Path:
        p = Path(self.cfg.get("paths", key))
        return p if p.is_absolute() else self.out / p

    def add(self, path) -> Path:
        self.artifacts.append(Path(path))
        return Path(path)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: expected {path}")
    return path


def _progress(every: int):
    def report(rec):
        if rec.step % every == 0 or rec.step == 1:
            log.info("step %d  L_u=%.3e L_f=%.3e L_b=%.3e total=%.3e (%.1fs)",
                     rec.step, rec.L_u, rec.L_f, rec.L_b, rec.total, rec.seconds)
    return report


# ---------------------------------------------------------------------------
# commands


def cmd_generate(run: Run) -> None:
    from dldmf.reference_solver import save_grid, solve, write_manifest

    cfg = run.cfg
    domain = cfg.domain()
    data = run.path("data")
    data.mkdir(parents=True, exist_ok=True)
    rows = []
    for mu in cfg.sweep():
        grid = solve(mu, domain, nx=cfg.get("generate", "nx"))
        name = f"{mu.label()}.dat"
        save_grid(grid, run.add(data / name))
        rows.append((name, mu))
        log.info("wrote %s", name)
    write_manifest(rows, run.add(data / "manifest.csv"))
    run.results["datasets"] = len(rows)


def _train_one(run: Run, kind: str, checkpoint: Path, log_name: str):
    from dldmf.model import build_model, save_model
    from dldmf.trainer import mu_bounds, train

    cfg = run.cfg
    tc = cfg.train()
    lo, hi = mu_bounds(tc.mu_set())
    model = build_model(cfg.model(), kind, lo, hi, cfg.integrator())
    ckpt_dir = None
    if tc.checkpoint_every:
        ckpt_dir = checkpoint.parent / f"{checkpoint.stem}_steps"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    model, records = train(model, tc, cfg.domain(), log_path=run.add(run.out / log_name),
                           checkpoint_dir=ckpt_dir, progress=_progress(max(tc.steps // 20, 1)))
    save_model(model, run.add(checkpoint))
    if ckpt_dir is not None:
        for p in sorted(ckpt_dir.glob("*.ckpt")):
            run.add(p)
    run.results[f"{kind}_final_loss"] = records[-1].total
    run.results[f"{kind}_train_seconds"] = records[-1].seconds
    run.results[f"{kind}_params"] = model.param_count()
    return model


def cmd_train(run: Run, kind: str = "dldmf") -> None:
    _train_one(run, kind, run.path("checkpoint"), "train_log.csv")


def cmd_finetune(run: Run) -> None:
    from dldmf.model import load_model, save_model
    from dldmf.svd_finetune import factor_decoder, finetune, trainable_count

    cfg = run.cfg
    source = _require(run.path("checkpoint"), "checkpoint")
    model = factor_decoder(load_model(source))
    fc = cfg.finetune()
    tuned, records = finetune(model, fc, cfg.domain(), cfg.train(),
                              log_path=run.add(run.out / "finetune_log.csv"),
                              progress=_progress(max(fc.steps // 10, 1)))
    target = source.parent / f"{source.stem}_ft_{fc.query.label()}.ckpt"
    save_model(tuned, run.add(target))
    run.results.update(trainable=trainable_count(model, fc.train_outer), total=model.param_count(),
                       first_loss=records[0].total, final_loss=records[-1].total)


def _references(run: Run):
    from dldmf.reference_solver import load_grid, read_manifest

    data = run.path("data")
    manifest = _require(data / "manifest.csv", "dataset manifest (run `generate` first)")
    return [load_grid(_require(data / name, "dataset file")) for name, _ in read_manifest(manifest)]


def _evaluate(run: Run, predictors: list, references, subdir: Path):
    from dldmf import evaluation as ev

    plan = run.cfg.plan()
    snapshots = run.cfg.get("eval", "snapshots")
    subdir.mkdir(parents=True, exist_ok=True)
    records = []
    for name, pred in predictors:
        recs = ev.evaluate_model(pred, plan, references, name=name)
        records += recs
        predictor = ev.as_predictor(pred, rollout=plan.rollout, window=plan.t_train,
                                    steps=plan.autodecode_steps, rate=plan.autodecode_rate)
        for mu, _ in plan.queries():
            ref = ev.find_reference(references, mu)
            u_hat = predictor.predict(mu, ref.x, ref.t, ref.u[0])
            for p in ev.write_snapshots(subdir / "plots", name, mu, ref.x, ref.t, u_hat, snapshots):
                run.add(p)
    ev.write_results(records, run.add(subdir / "results.csv"))
    summary = ev.aggregate(records)
    ev.write_summary(summary, run.add(subdir / "summary.csv"))
    run.results["summary"] = [dataclasses.asdict(s) for s in summary]
    return records


def cmd_eval(run: Run, oracle: bool = False) -> None:
    from dldmf.evaluation import ReferenceOracle
    from dldmf.model import load_model

    references = _references(run)
    if oracle:
        predictor = ("oracle", ReferenceOracle(references))
    else:
        model = load_model(_require(run.path("checkpoint"), "checkpoint"))
        predictor = (model.kind.value, model)
    _evaluate(run, [predictor], references, run.out)


def cmd_ablate(run: Run) -> None:
    from dldmf.model import AblationKind

    references = _references(run)
    ckpts = run.out / "ablate" / "checkpoints"
    dldmf = _train_one(run, "dldmf", ckpts / "dldmf.ckpt", "ablate/train_dldmf.csv")
    static = _train_one(run, "static_fusion", ckpts / "static_fusion.ckpt", "ablate/train_static_fusion.csv")
    autodecode = dataclasses.replace(dldmf, kind=AblationKind.AUTODECODE_INIT)
    predictors = [("dldmf", dldmf), ("static_fusion", static), ("autodecode_init", autodecode)]
    _evaluate(run, predictors, references, run.out / "ablate")


def cmd_timing(run: Run) -> None:
    from dldmf.evaluation import timing_probe
    from dldmf.model import load_model

    cfg = run.cfg
    model = load_model(_require(run.path("checkpoint"), "checkpoint"))
    domain = cfg.domain()
    stats = timing_probe(model, cfg.get("eval", "timing_queries"), t_max=domain.t_train,
                         steps=cfg.get("eval", "autodecode_steps"), rate=cfg.get("eval", "autodecode_rate"),
                         ic_kind=domain.ic_kind, seed=cfg.seed)
    with open(run.add(run.out / "timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "feedforward_ms", "autodecode_ms", "feedforward_init_ms", "autodecode_init_ms"])
        for i, row in enumerate(zip(stats.feedforward_ms, stats.autodecode_ms,
                                    stats.feedforward_init_ms, stats.autodecode_init_ms)):
            w.writerow([i, *(f"{v:.3f}" for v in row)])
    run.results.update(
        feedforward_steps=stats.feedforward_steps,
        autodecode_steps=stats.autodecode_steps,
        median_feedforward_ms=stats.median_feedforward_ms,
        median_autodecode_ms=stats.median_autodecode_ms,
        ratio=stats.ratio,
        init_ratio=stats.init_ratio,
    )
    print(f"median latency: feed-forward {stats.median_feedforward_ms:.2f} ms, "
          f"auto-decoding ({stats.autodecode_steps} steps) {stats.median_autodecode_ms:.2f} ms, "
          f"ratio {stats.ratio:.2f}")


# ---------------------------------------------------------------------------
# plumbing


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(run: Run, started: str) -> Path:
    cfg = run.cfg
    snapshot = run.out / f"{run.command}.config.ini"
    snapshot.write_text(cfg.text, encoding="utf-8")
    manifest = run.out / f"manifest_{run.command}.json"
    body = {
        "run_id": f"{run.command}-{cfg.digest()[:12]}",
        "command": run.command,
        "version": __version__,
        "seed": cfg.seed,
        "config_source": cfg.source,
        "config_text": cfg.text,
        "overrides": list(cfg.overrides),
        "config_snapshot": snapshot.name,
        "artifacts": [_rel(p, run.out) for p in run.artifacts],
        "results": run.results,
        "started": started,
        "finished": _now(),
    }
    manifest.write_text(json.dumps(body, indent=2, default=float) + "\n", encoding="utf-8")
    return manifest


def _rel(path: Path, root: Path) -> str:
    try:
        return str(Path(path).relative_to(root))
    except ValueError:
        return str(path)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="dldmf", description="Parameterized CDR surrogate experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="solve the reference sweep and write datasets")
    p = sub.add_parser("train", parents=[common], help="pre-train a model")
    p.add_argument("--kind", default="dldmf", choices=["dldmf", "static_fusion"])
    sub.add_parser("finetune", parents=[common], help="SVD fine-tuning at the [finetune] query")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint against the datasets")
    p.add_argument("--oracle", action="store_true", help="score the references against themselves")
    sub.add_parser("ablate", parents=[common], help="train and score all three model variants")
    sub.add_parser("timing", parents=[common], help="latency of feed-forward vs auto-decoded init")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    run = Run(args.command, cfg, out)
    started = _now()
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            cmd_train(run, args.kind)
        elif args.command == "eval":
            cmd_eval(run, args.oracle)
        else:
            globals()[f"cmd_{args.command}"](run)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MissingArtifact, CheckpointError, MissingReference, SolverDiverged, TrainingDiverged,
            IntegrationDiverged, IntegrationHorizonError, AutodecodeDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    missing = [p for p in run.artifacts if not Path(p).exists()]
    if missing:
        print(f"error: artifacts not written: {', '.join(map(str, missing))}", file=sys.stderr)
        return 1
    write_manifest(run, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
