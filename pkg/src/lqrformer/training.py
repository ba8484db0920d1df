"""Mini-batch training of the transformer policy with a masked Cauchy loss."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import tensor as tc
from .errors import ConfigMismatchError, TrainingDivergedError
from .model import ModelConfig, TransformerParams, forward_t, as_tensors, save_checkpoint, load_checkpoint
from .pipeline import WindowedData
from .seeding import substream
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

OPTIMIZERS = ("gd", "adam")
LOG_FIELDS = ("epoch", "train_loss", "val_loss", "wall_seconds", "checkpoint_path")


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 1e-5
    batch_size: int = 4096
    n_epochs: int = 500
    xi: float = 1.0
    split: float = 0.95
    seed: int = 0
    optimizer: str = "gd"
    workers: int = 1
    clip: float | None = None
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if not 0 < self.split < 1:
            raise ValueError("split must lie in (0, 1)")
        if self.batch_size < 1 or self.n_epochs < 0 or self.workers < 1:
            raise ValueError("batch_size and workers must be positive, n_epochs non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# --------------------------------------------------------------------------
# loss


def masked_residual(preds: Tensor, targets: np.ndarray, masks: np.ndarray) -> Tensor:
    return tc.mul(tc.sub(preds, Tensor(targets)), Tensor(masks))


def masked_cauchy_loss(preds, targets, masks, xi: float = 1.0) -> float:
    """``mean_j ln(1 + ||kappa_j * (pred_j - target_j)||^2 / xi^2)``."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if not preds.shape == targets.shape == masks.shape or preds.ndim != 2:
        raise ValueError(f"shapes disagree: {preds.shape}, {targets.shape}, {masks.shape}")
    return tc.cauchy_mean(masked_residual(Tensor(preds), targets, masks), xi).item()


def batch_loss_and_grads(params: TransformerParams, S, U, M, xi: float) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        p = {k: tape.watch(k, v) for k, v in params.items()}
        preds = forward_t(Tensor(S), p, params.config)
        loss = tc.cauchy_mean(masked_residual(preds, U, M), xi)
    return loss.item(), tape.backward(loss)


def dataset_loss(params: TransformerParams, data: WindowedData, xi: float, batch_size: int = 8192) -> float:
    """Mean masked Cauchy loss over every window in ``data``."""
    ki, ti = data.index()
    if len(ki) == 0:
        return float("nan")
    p = as_tensors(params)
    total = 0.0
    for lo in range(0, len(ki), batch_size):
        S, U, M = data.gather(ki[lo:lo + batch_size], ti[lo:lo + batch_size])
        preds = forward_t(Tensor(S), p, params.config)
        total += tc.cauchy_mean(masked_residual(preds, U, M), xi).item() * len(S)
    return total / len(ki)


# --------------------------------------------------------------------------
# optimizers


class Optimizer:
    name = "gd"

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0

    def step(self, params: TransformerParams, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        for k, g in grads.items():
            params.arrays[k] -= self.cfg.eta * g

    def state_sections(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, step_count: int, sections: dict[str, np.ndarray]) -> None:
        self.step_count = step_count

    def round_state(self) -> None:
        pass


class Adam(Optimizer):
    name = "adam"

    def __init__(self, cfg: TrainConfig):
        super().__init__(cfg)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: TransformerParams, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            params.arrays[k] -= c.eta * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

    def state_sections(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, step_count: int, sections: dict[str, np.ndarray]) -> None:
        self.step_count = step_count
        self.m = {k[len("adam.m/"):]: v.copy() for k, v in sections.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: v.copy() for k, v in sections.items() if k.startswith("adam.v/")}

    def round_state(self) -> None:
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k].astype(np.float32).astype(np.float64)


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    return Adam(cfg) if cfg.optimizer == "adam" else Optimizer(cfg)


# --------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float
    checkpoint_path: str = ""


@dataclass(eq=False)
class TrainResult:
    params: TransformerParams
    history: list[EpochRecord]
    optimizer: Optimizer
    initial_val_loss: float
    epoch: int
    meta: dict[str, Any] = field(default_factory=dict)


def check_compatible(data: WindowedData, cfg: ModelConfig) -> None:
    pc = data.config
    if (pc.w, pc.d_in, pc.n_u_max) != (cfg.w, cfg.d_in, cfg.n_u_max):
        raise ConfigMismatchError(
            f"samples have w={pc.w}, d_in={pc.d_in}, n_u_max={pc.n_u_max}; "
            f"model expects w={cfg.w}, d_in={cfg.d_in}, n_u_max={cfg.n_u_max}"
        )


def _sharded_grads(params: TransformerParams, S, U, M, xi: float, pool: ThreadPoolExecutor | None, workers: int):
    n = len(S)
    if pool is None or workers == 1 or n < 2 * workers:
        return batch_loss_and_grads(params, S, U, M, xi)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    futures = [
        pool.submit(batch_loss_and_grads, params, S[lo:hi], U[lo:hi], M[lo:hi], xi)
        for lo, hi in zip(bounds[:-1], bounds[1:])
    ]
    # reduce in shard order so the result does not depend on thread timing
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for (lo, hi), fut in zip(zip(bounds[:-1], bounds[1:]), futures):
        l_s, g_s = fut.result()
        wgt = (hi - lo) / n
        loss += wgt * l_s
        for k, g in g_s.items():
            grads[k] = grads[k] + wgt * g if k in grads else wgt * g
    return loss, grads


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        f = max_norm / norm
        for g in grads.values():
            g *= f
    return norm


def train(
    train_data: WindowedData,
    val_data: WindowedData,
    params: TransformerParams,
    cfg: TrainConfig,
    *,
    log_path=None,
    checkpoint_dir=None,
    checkpoint_extra: dict[str, Any] | None = None,
    start_epoch: int = 0,
    optimizer: Optimizer | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Run epochs ``start_epoch + 1 .. cfg.n_epochs`` and return the final parameters.

    At every epoch boundary the parameters and optimizer moments are rounded
    to float32, the precision checkpoints store, so that a checkpoint holds
    the complete training state and resuming from it reproduces an
    uninterrupted run.  ``val_loss`` is computed after that rounding and can
    be recomputed exactly from the checkpoint.
    """
    check_compatible(train_data, params.config)
    check_compatible(val_data, params.config)
    params = params.rounded()
    opt = optimizer if optimizer is not None else make_optimizer(cfg)
    history: list[EpochRecord] = []
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    log_file = _open_log(log_path)
    initial_val = dataset_loss(params, val_data, cfg.xi)
    ki_all, ti_all = train_data.index()
    n = len(ki_all)
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    t0 = time.perf_counter()
    epoch = start_epoch
    try:
        for epoch in range(start_epoch + 1, cfg.n_epochs + 1):
            perm = substream(cfg.seed, "shuffle", epoch).permutation(n)
            total = 0.0
            for lo in range(0, n, cfg.batch_size):
                idx = perm[lo:lo + cfg.batch_size]
                S, U, M = train_data.gather(ki_all[idx], ti_all[idx])
                loss, grads = _sharded_grads(params, S, U, M, cfg.xi, pool, cfg.workers)
                if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    path = _diagnostic_checkpoint(ckpt_dir, params, epoch, checkpoint_extra)
                    raise TrainingDivergedError(f"non-finite loss or gradient in epoch {epoch}", checkpoint=path)
                if cfg.clip is not None:
                    _clip(grads, cfg.clip)
                opt.step(params, grads)
                total += loss * len(idx)
            params = params.rounded()
            opt.round_state()
            val = dataset_loss(params, val_data, cfg.xi)
            rec = EpochRecord(epoch, total / max(n, 1), val, time.perf_counter() - t0)
            if ckpt_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                path = ckpt_dir / f"epoch_{epoch:04d}.lqrc"
                save_training_checkpoint(path, params, opt, epoch, val, checkpoint_extra)
                rec.checkpoint_path = str(path)
            history.append(rec)
            log.info("epoch %d train %.6f val %.6f", epoch, rec.train_loss, rec.val_loss)
            if log_file is not None:
                _append_log(log_file, rec)
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if pool is not None:
            pool.shutdown()
        if log_file is not None:
            log_file.close()
    return TrainResult(params, history, opt, initial_val, max(epoch, start_epoch),
                       {"optimizer": opt.name, "steps": opt.step_count, "clip": cfg.clip})


def finetune(
    train_data: WindowedData,
    val_data: WindowedData,
    pretrained: TransformerParams,
    cfg: TrainConfig,
    epochs: int = 1,
    **kwargs,
) -> TrainResult:
    """Continue training pretrained parameters on new-system data with a fresh optimizer."""
    for d in (train_data, val_data):
        try:
            check_compatible(d, pretrained.config)
        except ConfigMismatchError as exc:
            raise ConfigMismatchError(f"refusing to fine-tune: {exc}") from None
    ft_cfg = TrainConfig.from_dict({**cfg.to_dict(), "n_epochs": epochs})
    return train(train_data, val_data, pretrained.copy(), ft_cfg, **kwargs)


# --------------------------------------------------------------------------
# persistence helpers


def save_training_checkpoint(path, params: TransformerParams, opt: Optimizer, epoch: int, val_loss: float,
                             extra: dict[str, Any] | None = None) -> None:
    header = dict(extra or {})
    header.update({
        "training": {"epoch": epoch, "optimizer": opt.name, "step_count": opt.step_count, "val_loss": val_loss},
    })
    save_checkpoint(path, params, header, opt.state_sections())


def load_training_checkpoint(path, cfg: TrainConfig, expected: ModelConfig | None = None):
    """Return ``(params, optimizer, epoch, header)`` for resuming."""
    params, header, extra = load_checkpoint(path, expected)
    info = header.get("training", {"epoch": 0, "optimizer": cfg.optimizer, "step_count": 0})
    opt = make_optimizer(cfg)
    if info.get("optimizer") == opt.name:
        opt.load_state(int(info.get("step_count", 0)), extra)
    return params, opt, int(info.get("epoch", 0)), header


def _diagnostic_checkpoint(ckpt_dir: Path | None, params: TransformerParams, epoch: int, extra) -> str | None:
    if ckpt_dir is None:
        return None
    path = ckpt_dir / f"diverged_epoch_{epoch:04d}.lqrc"
    try:
        save_checkpoint(path, params, {**(extra or {}), "diagnostic": f"diverged in epoch {epoch}"})
    except ValueError:
        return None
    return str(path)


def _open_log(log_path):
    if log_path is None:
        return None
    path = Path(log_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    fh = open(path, "a", newline="")
    if new:
        csv.writer(fh).writerow(LOG_FIELDS)
    return fh


def _append_log(fh, rec: EpochRecord) -> None:
    csv.writer(fh).writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss), f"{rec.wall_seconds:.3f}", rec.checkpoint_path])
    fh.flush()


def read_log(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
