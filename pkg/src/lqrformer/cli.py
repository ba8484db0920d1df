"""Command-line entry point: ``lqrformer {generate,train,evaluate,finetune,ablate}``.

Settings resolve as command-line flags, then a JSON ``--config`` file, then
built-in defaults.  Every artifact header embeds the resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__, lti
from .datagen import TrajectoryDataset, build_dataset, load_dataset, save_dataset
from .errors import ConfigMismatchError, FormatError, LqrfError, NumericError, UsageError
from .evaluation import (
    ablation_data_volume, ablation_window, evaluate_systems, robustness_study, transformer_policy,
    write_ablation_csv,
)
from .model import ModelConfig, init_params, load_checkpoint
from .pipeline import NormStats, PipelineConfig, build_windows, compute_stats, dataset_stats, split_trajectories
from .seeding import derived_seed
from .training import (
    TrainConfig, check_compatible, dataset_loss, finetune, load_training_checkpoint,
    save_training_checkpoint, train,
)

log = logging.getLogger("lqrformer")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4


def _default_workers() -> int:
    env = os.environ.get("LQRF_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"LQRF_WORKERS must be an integer, got {env!r}") from None
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    systems: str = "seen"
    n_variants: int = 50
    delta: float = 0.30
    J: int = 50
    T: int = 1250
    dt: float = 0.02
    window: int = 12
    n_x_max: int = lti.N_X_MAX
    n_u_max: int = lti.N_U_MAX
    d_model: int = 64
    heads: int = 16
    blocks: int = 4
    d_ff: int = 256
    sequential: bool = False
    epochs: int | None = None  # 500 for train, 1 for finetune
    batch: int = 4096
    lr: float = 1e-5
    xi: float = 1.0
    optimizer: str = "gd"
    split: float = 0.95
    clip: float | None = None
    checkpoint_every: int = 0
    workers: int = 1
    out: str = "runs"
    dataset: str | None = None
    checkpoint: str | None = None
    resume: str | None = None
    eval_variants: int = 20
    eval_J: int = 25
    horizon: int | None = None
    axis: str | None = None
    values: str | None = None

    def validate(self) -> "RunConfig":
        try:
            self.pipeline()
            self.model()
            self.train_config()
        except ValueError as exc:
            raise UsageError(f"invalid configuration: {exc}") from None
        checks = [
            (self.n_variants >= 0, "--n-variants must be >= 0"),
            (0 <= self.delta < 1, "--delta must lie in [0, 1)"),
            (self.J >= 1 and self.T >= 1, "--J and --T must be positive"),
            (self.dt > 0, "--dt must be positive"),
            (self.eval_variants >= 0 and self.eval_J >= 1, "evaluation counts must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise UsageError(msg)
        return self

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(w=self.window, n_x_max=self.n_x_max, n_u_max=self.n_u_max)

    def model(self) -> ModelConfig:
        pc = self.pipeline()
        return ModelConfig(d_m=self.d_model, h=self.heads, L=self.blocks, d_ff=self.d_ff, w=self.window,
                           d_in=pc.d_in, n_u_max=pc.n_u_max, sequential=self.sequential)

    def train_config(self, default_epochs: int = 500) -> TrainConfig:
        return TrainConfig(
            eta=self.lr, batch_size=self.batch, n_epochs=default_epochs if self.epochs is None else self.epochs,
            xi=self.xi, split=self.split, seed=derived_seed(self.seed, "train"), optimizer=self.optimizer,
            workers=self.workers, clip=self.clip, checkpoint_every=self.checkpoint_every,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


_FIELDS = {f.name for f in fields(RunConfig)}
_TYPES = {
    "seed": int, "n_variants": int, "delta": float, "J": int, "T": int, "dt": float, "window": int,
    "n_x_max": int, "n_u_max": int, "d_model": int, "heads": int, "blocks": int, "d_ff": int, "epochs": int,
    "batch": int, "lr": float, "xi": float, "split": float, "clip": float, "checkpoint_every": int,
    "workers": int, "eval_variants": int, "eval_J": int, "horizon": int,
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        except ValueError as exc:
            raise FormatError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise FormatError(f"{args.config}: expected a JSON object")
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in _FIELDS:
                raise UsageError(f"{args.config}: unknown setting {k!r}")
            values[key] = v
    if "workers" not in values:
        values["workers"] = _default_workers()
    for k in _FIELDS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    for k, typ in _TYPES.items():
        if values.get(k) is not None:
            try:
                values[k] = typ(values[k])
            except (TypeError, ValueError):
                raise UsageError(f"setting {k!r} must be {typ.__name__}") from None
    return RunConfig(**values).validate()


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lqrformer", description="Transformer imitation of LQR controllers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with default settings")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="worker threads (env LQRF_WORKERS)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    def data_flags(sp):
        sp.add_argument("--systems", help="seen, unseen, all, or comma-separated catalog names")
        sp.add_argument("--n-variants", dest="n_variants", type=int)
        sp.add_argument("--delta", type=float)
        sp.add_argument("--J", type=int)
        sp.add_argument("--T", type=int)
        sp.add_argument("--dt", type=float)

    def model_flags(sp):
        sp.add_argument("--window", type=int)
        sp.add_argument("--d-model", dest="d_model", type=int)
        sp.add_argument("--heads", type=int)
        sp.add_argument("--blocks", type=int)
        sp.add_argument("--d-ff", dest="d_ff", type=int)
        sp.add_argument("--sequential", action="store_const", const=True)

    def train_flags(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--xi", type=float)
        sp.add_argument("--optimizer", choices=["gd", "adam"])
        sp.add_argument("--clip", type=float)
        sp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)

    def eval_flags(sp):
        sp.add_argument("--eval-variants", dest="eval_variants", type=int)
        sp.add_argument("--eval-J", dest="eval_J", type=int)
        sp.add_argument("--horizon", type=int)

    g = sub.add_parser("generate", help="solve LQR problems and write a trajectory dataset")
    common(g)
    data_flags(g)

    t = sub.add_parser("train", help="train a policy on a dataset")
    common(t)
    data_flags(t)
    model_flags(t)
    train_flags(t)
    t.add_argument("--dataset")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("evaluate", help="closed-loop evaluation on perturbed systems")
    common(e)
    data_flags(e)
    eval_flags(e)
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")

    f = sub.add_parser("finetune", help="few-shot fine-tuning on new systems")
    common(f)
    data_flags(f)
    train_flags(f)
    eval_flags(f)
    f.add_argument("--checkpoint")

    a = sub.add_parser("ablate", help="window-length or data-volume sweep")
    common(a)
    data_flags(a)
    model_flags(a)
    train_flags(a)
    a.add_argument("--dataset")
    a.add_argument("--axis", choices=["window", "data"])
    a.add_argument("--values", help="comma-separated sweep values")
    return p


# --------------------------------------------------------------------------
# helpers


def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _provenance(cfg: RunConfig, command: str) -> dict[str, Any]:
    return {"command": command, "run_config": cfg.to_dict(), "code_version": __version__}


def make_systems(cfg: RunConfig, selection: str | None = None, n_variants: int | None = None,
                 seed_name: str = "variants") -> list[lti.LtiSystem]:
    """Nominal catalog systems when ``n_variants == 0``, else that many perturbed variants of each."""
    try:
        entries = lti.select(selection or cfg.systems)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    n = cfg.n_variants if n_variants is None else n_variants
    if n == 0:
        return [e.build(cfg.dt, i) for i, e in enumerate(entries)]
    vseed = derived_seed(cfg.seed, seed_name)
    out: list[lti.LtiSystem] = []
    for e in entries:
        out += lti.make_variants(lti.VariantSpec(e.name, delta=cfg.delta, seed=vseed, count=n, dt=cfg.dt))
    return [s.with_id(i) for i, s in enumerate(out)]


def _generate(cfg: RunConfig, systems) -> TrajectoryDataset:
    return build_dataset(systems, cfg.J, cfg.T, derived_seed(cfg.seed, "datagen"), workers=cfg.workers)


def _stats_header(ds: TrajectoryDataset, stats: dict[int, NormStats]) -> dict[str, Any]:
    per_system = {ds.systems[i].name: st.to_dict() for i, st in stats.items()}
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(ds.systems):
        groups.setdefault(s.base_name or s.name, []).append(i)
    family = {
        name: compute_stats(np.concatenate([ds.states[i] for i in ids]), np.concatenate([ds.controls[i] for i in ids])).to_dict()
        for name, ids in groups.items()
    }
    return {"system_stats": per_system, "family_stats": family}


def _check_dims(ds: TrajectoryDataset, pc: PipelineConfig) -> None:
    for s in ds.systems:
        if s.n_x > pc.n_x_max or s.n_u > pc.n_u_max:
            raise ConfigMismatchError(
                f"system {s.name} has dimensions ({s.n_x}, {s.n_u}) beyond the configured maxima ({pc.n_x_max}, {pc.n_u_max})"
            )


def _load_dataset(cfg: RunConfig) -> TrajectoryDataset:
    path = cfg.dataset or str(Path(cfg.out) / "dataset.lqrf")
    if not Path(path).exists():
        raise FormatError(f"dataset {path} does not exist (run `generate` first or pass --dataset)")
    ds, _ = load_dataset(path)
    return ds


def _require_checkpoint(cfg: RunConfig) -> str:
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    return cfg.checkpoint


# --------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig) -> int:
    systems = make_systems(cfg)
    ds = _generate(cfg, systems)
    path = _out(cfg) / "dataset.lqrf"
    save_dataset(path, ds, {**_provenance(cfg, "generate"), **_stats_header(ds, dataset_stats(ds))})
    res = np.array([s.residual for s in ds.solutions])
    its = np.array([s.iterations for s in ds.solutions])
    print(f"wrote {path}: {ds.N} systems x {ds.J} trajectories x {ds.T} steps")
    print(f"Riccati residual max {res.max():.3e} median {np.median(res):.3e}; iterations max {its.max()}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    pc, mc = cfg.pipeline(), cfg.model()
    _check_dims(ds, pc)
    tc = cfg.train_config()
    stats = dataset_stats(ds)
    data = build_windows(ds, pc, stats)
    train_data, val_data = split_trajectories(data, tc.split, derived_seed(cfg.seed, "split"))
    out = _out(cfg)
    extra = {**_provenance(cfg, "train"), "pipeline": pc.to_dict(), "train": tc.to_dict(), **_stats_header(ds, stats)}
    if cfg.resume:
        params, opt, start, _ = load_training_checkpoint(cfg.resume, tc, expected=mc)
        print(f"resuming from {cfg.resume} at epoch {start}")
    else:
        params, opt, start = init_params(mc, derived_seed(cfg.seed, "init")), None, 0
    print(f"model parameters: {params.n_params()}; train windows {len(train_data)}, validation windows {len(val_data)}")
    res = train(
        train_data, val_data, params, tc, log_path=out / "train_log.csv", checkpoint_dir=out / "checkpoints",
        checkpoint_extra=extra, start_epoch=start, optimizer=opt,
        on_epoch=lambda r: print(f"epoch {r.epoch}: train {r.train_loss:.6f} val {r.val_loss:.6f}"),
    )
    final_val = res.history[-1].val_loss if res.history else res.initial_val_loss
    save_training_checkpoint(out / "checkpoint.lqrc", res.params, res.optimizer, res.epoch, final_val, extra)
    print(f"wrote {out / 'checkpoint.lqrc'} (epoch {res.epoch}, validation loss {final_val:.6f})")
    return EXIT_OK


def _checkpoint_stats(header: dict[str, Any]) -> dict[str, NormStats]:
    return {k: NormStats.from_dict(v) for k, v in header.get("family_stats", {}).items()}


def _few_shot_stats(cfg: RunConfig, names: Sequence[str]) -> dict[str, NormStats]:
    """Statistics from a small nominal-system dataset, for families absent from training."""
    if not names:
        return {}
    systems = [lti.get_entry(n).build(cfg.dt, i) for i, n in enumerate(names)]
    ds = build_dataset(systems, cfg.J, cfg.T, derived_seed(cfg.seed, "few-shot"), workers=cfg.workers)
    return {s.name: compute_stats(ds.states[i], ds.controls[i]) for i, s in enumerate(ds.systems)}


def cmd_evaluate(cfg: RunConfig) -> int:
    params, header, _ = load_checkpoint(_require_checkpoint(cfg))
    pc = PipelineConfig.from_dict(header["pipeline"]) if "pipeline" in header else cfg.pipeline()
    fam = _checkpoint_stats(header)
    names = [e.name for e in lti.select(cfg.systems)]
    missing = [n for n in names if n not in fam]
    fam.update(_few_shot_stats(cfg, missing))
    horizon = cfg.horizon or cfg.T
    rep = robustness_study(
        names, cfg.delta, cfg.eval_variants, transformer_policy(params), lambda v: fam[v.base_name], pc,
        cfg.eval_J, derived_seed(cfg.seed, "eval"), horizon, cfg.dt,
    )
    rep.meta["stats_source"] = {n: ("few-shot" if n in missing else "training") for n in names}
    out = _out(cfg)
    rep.write_csv(out / "eval.csv")
    rep.write_summary_csv(out / "eval_summary.csv")
    rep.write_svg(out / "eval.svg")
    (out / "eval_meta.json").write_text(json.dumps({**rep.meta, **_provenance(cfg, "evaluate")}, indent=1, sort_keys=True))
    for row in rep.summary():
        print(f"{row['family']}: median delta {row['delta_median']:.4g}, stabilized {row['stabilized_fraction']:.3f}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig) -> int:
    ckpt = _require_checkpoint(cfg)
    tc = cfg.train_config(default_epochs=1)
    params, header, _ = load_checkpoint(ckpt)
    pc = PipelineConfig.from_dict(header["pipeline"]) if "pipeline" in header else cfg.pipeline()
    systems = make_systems(cfg, seed_name="few-shot-variants")
    ds = _generate(cfg, systems)
    _check_dims(ds, pc)
    stats = dataset_stats(ds)
    data = build_windows(ds, pc, stats)
    tr, va = split_trajectories(data, tc.split, derived_seed(cfg.seed, "split"))
    try:
        check_compatible(data, params.config)
    except ConfigMismatchError as exc:
        raise ConfigMismatchError(f"refusing to fine-tune: {exc}") from None
    horizon = cfg.horizon or cfg.T
    eval_seed = derived_seed(cfg.seed, "eval")

    def deltas(p):
        rep = evaluate_systems(ds.systems, transformer_policy(p), [stats[i] for i in range(ds.N)], pc,
                               cfg.eval_J, eval_seed, horizon, ds.solutions)
        return rep

    zero_val = dataset_loss(params, va, tc.xi)
    zero_rep = deltas(params)
    res = finetune(tr, va, params, tc, epochs=tc.n_epochs)
    post_val = res.history[-1].val_loss if res.history else zero_val
    post_rep = deltas(res.params)
    out = _out(cfg)
    extra = {**_provenance(cfg, "finetune"), "pipeline": pc.to_dict(), "train": tc.to_dict(),
             "base_checkpoint": str(ckpt), **_stats_header(ds, stats)}
    save_training_checkpoint(out / "finetuned.lqrc", res.params, res.optimizer, res.epoch, post_val, extra)
    with open(out / "finetune_report.csv", "w") as fh:
        fh.write("system,phase,val_loss,delta,stabilized_fraction\n")
        for phase, val, rep in (("zero-shot", zero_val, zero_rep), ("fine-tuned", post_val, post_rep)):
            for r in rep.results:
                fh.write(f"{r.system},{phase},{val!r},{r.delta!r},{r.stabilized_fraction!r}\n")
    print(f"validation loss: zero-shot {zero_val:.6f} -> fine-tuned {post_val:.6f}")
    print(f"median delta: zero-shot {np.nanmedian(zero_rep.deltas):.4g} -> fine-tuned {np.nanmedian(post_rep.deltas):.4g}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    if cfg.axis not in ("window", "data"):
        raise UsageError("--axis must be 'window' or 'data'")
    try:
        values = [int(v) for v in (cfg.values or ("1,4,8,12" if cfg.axis == "window" else "2,5,10,20")).split(",")]
    except ValueError:
        raise UsageError("--values must be comma-separated integers") from None
    ds = _load_dataset(cfg)
    pc, mc, tc = cfg.pipeline(), cfg.model(), cfg.train_config()
    _check_dims(ds, pc)
    try:
        if cfg.axis == "window":
            rows = ablation_window(ds, values, mc, tc, pc, 1.0 - tc.split)
        else:
            rows = ablation_data_volume(ds, values, mc, tc, pc, 1.0 - tc.split)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    path = _out(cfg) / f"ablation_{cfg.axis}.csv"
    write_ablation_csv(path, "w" if cfg.axis == "window" else "J", rows)
    for r in rows:
        print(f"{cfg.axis}={r.value}: validation loss {r.val_loss:.6f}")
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
    "finetune": cmd_finetune, "ablate": cmd_ablate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LqrfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
