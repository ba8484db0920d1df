"""Shared sample representation: per-system standardization, zero padding,
binary dimension encoding, sliding windows and control masks.

A window ``S_t`` has ``w + 1`` rows.  Row ``k`` holds the padded standardized
state ``x_{t-w+k}`` followed by the encoding bits of ``(n_x, n_u)``.  Rows
before the start of a trajectory are entirely zero, encoding bits included;
a real row always carries at least one set bit because ``n_x >= 1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from .datagen import TrajectoryDataset, Trajectory
from .errors import ConfigMismatchError, DegenerateDataError, EncodingError, FormatError, ShapeError
from .fileformat import read_container, write_container
from .seeding import substream

SAMPLES_MAGIC = "LQRF"


@dataclass(frozen=True)
class NormStats:
    mu_x: float
    sigma_x: float
    mu_u: float
    sigma_u: float

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_u > 0):
            raise DegenerateDataError("standard deviations must be positive")

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(float(d["mu_x"]), float(d["sigma_x"]), float(d["mu_u"]), float(d["sigma_u"]))


@dataclass(frozen=True)
class PipelineConfig:
    w: int = 12
    n_x_max: int = 12
    n_u_max: int = 6
    stride: int = 1

    def __post_init__(self):
        if self.w < 1:
            raise ValueError("window length w must be >= 1")
        if self.n_x_max < 1 or self.n_u_max < 1 or self.stride < 1:
            raise ValueError("n_x_max, n_u_max and stride must be positive")

    @property
    def d_x(self) -> int:
        return bits_for(self.n_x_max)

    @property
    def d_u(self) -> int:
        return bits_for(self.n_u_max)

    @property
    def d_in(self) -> int:
        return self.n_x_max + self.d_x + self.d_u

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "PipelineConfig":
        return cls(int(d["w"]), int(d["n_x_max"]), int(d["n_u_max"]), int(d.get("stride", 1)))


def bits_for(n_max: int) -> int:
    """Width of the binary field for values ``1 .. n_max``.

    Equals ``ceil(log2(n_max))`` unless ``n_max`` is a power of two, where
    that expression is one bit short of representing ``n_max`` itself.
    """
    return max(1, int(n_max).bit_length())


@dataclass(eq=False)
class TrainingSample:
    S: np.ndarray  # (w + 1, d_in)
    u_bar: np.ndarray  # (n_u_max,)
    kappa: np.ndarray  # (n_u_max,)
    system_id: int


# --------------------------------------------------------------------------
# elementary transforms


def compute_stats(states, controls) -> NormStats:
    """Scalar mean and spread of a system's state and control data.

    ``states`` is ``(J, T, n_x)`` (or a list of ``(T, n_x)`` trajectories).
    The mean runs over every entry; the spread divides the summed squared
    vector deviations by ``J*T - 1``.
    """
    return NormStats(*_scalar_stats(states, "state"), *_scalar_stats(controls, "control"))


def _scalar_stats(data, label: str) -> tuple[float, float]:
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"{label} data must be (J, T, n), got {X.shape}")
    n_vec = X.shape[0] * X.shape[1]
    if X.size < 2 or n_vec < 2:
        raise DegenerateDataError(f"need at least two {label} vectors")
    mu = float(X.mean())
    var = float(np.sum((X - mu) ** 2)) / (n_vec - 1)
    if not var > 0.0:
        raise DegenerateDataError(f"{label} data has zero variance")
    return mu, math.sqrt(var)


def standardize(x, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mu_x) / stats.sigma_x


def destandardize_state(xhat, stats: NormStats) -> np.ndarray:
    return stats.sigma_x * np.asarray(xhat, dtype=np.float64) + stats.mu_x


def standardize_control(u, stats: NormStats) -> np.ndarray:
    return (np.asarray(u, dtype=np.float64) - stats.mu_u) / stats.sigma_u


def destandardize_control(u_bar, stats: NormStats) -> np.ndarray:
    return stats.sigma_u * np.asarray(u_bar, dtype=np.float64) + stats.mu_u


def pad(v, target: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size > target:
        raise ShapeError(f"cannot pad length {v.size} to {target}")
    out = np.zeros(target)
    out[: v.size] = v
    return out


def _binary(value: int, width: int) -> list[float]:
    return [float((value >> (width - 1 - k)) & 1) for k in range(width)]


def dim_encoding(n_x: int, n_u: int, config: PipelineConfig) -> np.ndarray:
    """MSB-first bits of ``n_x`` (``d_x`` wide) followed by those of ``n_u``."""
    if not 1 <= n_x <= config.n_x_max:
        raise EncodingError(f"n_x={n_x} outside 1..{config.n_x_max}")
    if not 1 <= n_u <= config.n_u_max:
        raise EncodingError(f"n_u={n_u} outside 1..{config.n_u_max}")
    return np.array(_binary(n_x, config.d_x) + _binary(n_u, config.d_u))


def decode_encoding(bits, config: PipelineConfig) -> tuple[int, int]:
    bits = np.asarray(bits).reshape(-1)
    if bits.size != config.d_x + config.d_u:
        raise EncodingError(f"expected {config.d_x + config.d_u} bits, got {bits.size}")
    if not np.all((bits == 0.0) | (bits == 1.0)):
        raise EncodingError("encoding entries must be 0 or 1")
    as_int = lambda b: int("".join(str(int(v)) for v in b), 2)
    return as_int(bits[: config.d_x]), as_int(bits[config.d_x:])


def make_mask(n_u: int, n_u_max: int) -> np.ndarray:
    if not 1 <= n_u <= n_u_max:
        raise EncodingError(f"n_u={n_u} outside 1..{n_u_max}")
    return pad(np.ones(n_u), n_u_max)


# --------------------------------------------------------------------------
# windows


def encoded_rows(X: np.ndarray, stats: NormStats, n_u: int, config: PipelineConfig) -> np.ndarray:
    """``(J, w + T, d_in)`` rows for states ``X (J, T, n_x)``; the first ``w`` rows are zero."""
    X = np.asarray(X, dtype=np.float64)
    J, T, n_x = X.shape
    rows = np.zeros((J, config.w + T, config.d_in))
    rows[:, config.w:, :n_x] = standardize(X, stats)
    rows[:, config.w:, config.n_x_max:] = dim_encoding(n_x, n_u, config)
    return rows


def padded_targets(U: np.ndarray, stats: NormStats, config: PipelineConfig) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    out = np.zeros(U.shape[:-1] + (config.n_u_max,))
    out[..., : U.shape[-1]] = standardize_control(U, stats)
    return out


def window_samples(traj: Trajectory, stats: NormStats, config: PipelineConfig) -> list[TrainingSample]:
    """One sample per time step ``t = 0, stride, 2*stride, ... < T``."""
    n_u = traj.U.shape[1]
    rows = encoded_rows(traj.X[None], stats, n_u, config)[0]
    targets = padded_targets(traj.U, stats, config)
    kappa = make_mask(n_u, config.n_u_max)
    return [
        TrainingSample(rows[t: t + config.w + 1].copy(), targets[t].copy(), kappa.copy(), traj.system_id)
        for t in range(0, traj.T, config.stride)
    ]


@dataclass(eq=False)
class WindowedData:
    """All windows of a set of trajectories, materialized lazily per batch.

    ``rows[k]`` holds trajectory ``k`` with ``w`` leading zero rows, so the
    window at time ``t`` is ``rows[k, t : t + w + 1]``.
    """

    config: PipelineConfig
    rows: np.ndarray  # (n_traj, w + T, d_in)
    targets: np.ndarray  # (n_traj, T, n_u_max)
    masks: np.ndarray  # (n_traj, n_u_max)
    system_ids: np.ndarray  # (n_traj,)
    traj_ids: np.ndarray  # (n_traj,) index of the trajectory within its system
    stats: dict[int, NormStats]

    @property
    def n_traj(self) -> int:
        return self.rows.shape[0]

    @property
    def T(self) -> int:
        return self.targets.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(0, self.T, self.config.stride)

    def __len__(self) -> int:
        return self.n_traj * len(self.times)

    def index(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat ``(trajectory, time)`` pairs in ``(k, t)`` order."""
        times = self.times
        return np.repeat(np.arange(self.n_traj), len(times)), np.tile(times, self.n_traj)

    def gather(self, traj_idx, t_idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        traj_idx = np.asarray(traj_idx)
        t_idx = np.asarray(t_idx)
        offs = t_idx[:, None] + np.arange(self.config.w + 1)[None, :]
        S = self.rows[traj_idx[:, None], offs]
        return S, self.targets[traj_idx, t_idx], self.masks[traj_idx]

    def select(self, keep) -> "WindowedData":
        keep = np.asarray(keep)
        return WindowedData(
            self.config, self.rows[keep], self.targets[keep], self.masks[keep],
            self.system_ids[keep], self.traj_ids[keep], self.stats,
        )

    def samples(self) -> list[TrainingSample]:
        ki, ti = self.index()
        S, U, M = self.gather(ki, ti)
        return [TrainingSample(S[n], U[n], M[n], int(self.system_ids[ki[n]])) for n in range(len(ki))]


def dataset_stats(ds: TrajectoryDataset) -> dict[int, NormStats]:
    return {i: compute_stats(ds.states[i], ds.controls[i]) for i in range(ds.N)}


def family_stats(ds: TrajectoryDataset) -> dict[str, NormStats]:
    """Statistics pooled over all trajectories of each base system's variants."""
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(ds.systems):
        groups.setdefault(s.base_name, []).append(i)
    return {
        name: compute_stats(np.concatenate([ds.states[i] for i in ids]), np.concatenate([ds.controls[i] for i in ids]))
        for name, ids in groups.items()
    }


def build_windows(ds: TrajectoryDataset, config: PipelineConfig, stats: dict[int, NormStats] | None = None) -> WindowedData:
    stats = dataset_stats(ds) if stats is None else stats
    rows, targets, masks, sids, tids = [], [], [], [], []
    for i, sys in enumerate(ds.systems):
        if sys.n_x > config.n_x_max or sys.n_u > config.n_u_max:
            raise ConfigMismatchError(
                f"{sys.name}: dimensions ({sys.n_x}, {sys.n_u}) exceed pipeline maxima ({config.n_x_max}, {config.n_u_max})"
            )
        J = ds.states[i].shape[0]
        rows.append(encoded_rows(ds.states[i], stats[i], sys.n_u, config))
        targets.append(padded_targets(ds.controls[i], stats[i], config))
        masks.append(np.repeat(make_mask(sys.n_u, config.n_u_max)[None], J, axis=0))
        sids.append(np.full(J, i))
        tids.append(np.arange(J))
    return WindowedData(
        config, np.concatenate(rows), np.concatenate(targets), np.concatenate(masks),
        np.concatenate(sids), np.concatenate(tids), dict(stats),
    )


def split_trajectories(data: WindowedData, train_fraction: float, seed: int) -> tuple[WindowedData, WindowedData]:
    """Random trajectory-level split so overlapping windows never straddle the two sets."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train fraction must lie in (0, 1)")
    n = data.n_traj
    if n < 2:
        raise ValueError("need at least two trajectories to split")
    n_val = min(n - 1, max(1, int(round((1.0 - train_fraction) * n))))
    perm = substream(seed, "split").permutation(n)
    return data.select(np.sort(perm[n_val:])), data.select(np.sort(perm[:n_val]))


# --------------------------------------------------------------------------
# processed-sample files


def save_samples(path, data: WindowedData, extra: dict[str, Any] | None = None) -> None:
    ki, ti = data.index()
    S, U, M = data.gather(ki, ti)
    header = {
        "kind": "samples",
        "pipeline": data.config.to_dict(),
        "stats": {str(k): v.to_dict() for k, v in sorted(data.stats.items())},
        "n_samples": int(len(ki)),
    }
    if extra:
        header.update(extra)
    write_container(path, SAMPLES_MAGIC, header, [
        ("S", S), ("u_bar", U), ("kappa", M), ("system_id", data.system_ids[ki].astype(np.float64)),
    ])


def load_samples(path, expected: PipelineConfig | None = None):
    """Return ``(S, u_bar, kappa, system_id, config, stats)``; refuses a mismatched config."""
    header, sec = read_container(path, SAMPLES_MAGIC)
    if header.get("kind") != "samples":
        raise FormatError(f"{path}: not a processed-sample file")
    config = PipelineConfig.from_dict(header["pipeline"])
    if expected is not None and config != expected:
        raise ConfigMismatchError(f"{path}: samples were built with {config}, expected {expected}")
    stats = {int(k): NormStats.from_dict(v) for k, v in header["stats"].items()}
    return (
        sec["S"].astype(np.float64), sec["u_bar"].astype(np.float64), sec["kappa"].astype(np.float64),
        sec["system_id"].astype(np.int64), config, stats,
    )
