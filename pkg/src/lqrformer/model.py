"""Transformer policy mapping a state window ``S`` to a padded standardized control.

Every block reads the same embedded sequence ``H`` (parallel blocks); the
last row of each block output is concatenated and passed through a linear
readout.  ``ModelConfig.sequential`` switches to a conventional stack where
block ``l`` reads the output of block ``l - 1``.

Per-head projections are stored separately.  The forward pass fuses them
into one matrix per block, and in parallel mode only evaluates the query,
attention output, normalization and feed-forward path for the last row,
because nothing else reaches the readout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Iterator

import numpy as np

from . import __version__
from . import tensor as tc
from .errors import ConfigMismatchError, FormatError, ShapeError
from .fileformat import read_container, write_container
from .seeding import substream
from .tensor import Tensor

CHECKPOINT_MAGIC = "LQRC"


@dataclass(frozen=True)
class ModelConfig:
    d_m: int = 64
    h: int = 16
    L: int = 4
    d_ff: int = 256
    w: int = 12
    d_in: int = 19
    n_u_max: int = 6
    rho: float = 1e-5
    sequential: bool = False

    def __post_init__(self):
        for f in ("d_m", "h", "L", "d_ff", "w", "d_in", "n_u_max"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.d_m % self.h:
            raise ValueError(f"h={self.h} does not divide d_m={self.d_m}")
        if self.d_m < 2:
            raise ValueError("d_m must be >= 2 for layer normalization")
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    @property
    def d_h(self) -> int:
        return self.d_m // self.h

    @property
    def n_rows(self) -> int:
        return self.w + 1

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in storage order."""
    shapes: dict[str, tuple[int, ...]] = {
        "W_in": (cfg.d_m, cfg.d_in),
        "b_in": (cfg.d_m,),
        "P": (cfg.n_rows, cfg.d_m),
    }
    for l in range(cfg.L):
        b = f"block{l}."
        for i in range(cfg.h):
            for kind in "QKV":
                shapes[f"{b}W_{kind}{i}"] = (cfg.d_m, cfg.d_h)
        shapes.update({
            b + "W_O": (cfg.d_m, cfg.d_m),
            b + "ln1.gamma": (cfg.d_m,),
            b + "ln1.beta": (cfg.d_m,),
            b + "W_1": (cfg.d_m, cfg.d_ff),
            b + "b_1": (cfg.d_ff,),
            b + "W_2": (cfg.d_ff, cfg.d_m),
            b + "b_2": (cfg.d_m,),
            b + "ln2.gamma": (cfg.d_m,),
            b + "ln2.beta": (cfg.d_m,),
        })
    shapes["W_out"] = (cfg.n_u_max, cfg.L * cfg.d_m)
    shapes["b_out"] = (cfg.n_u_max,)
    return shapes


class TransformerParams:
    """Named float64 parameter arrays for one ``ModelConfig``."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        shapes = param_shapes(config)
        missing = set(shapes) - set(arrays)
        extra = set(arrays) - set(shapes)
        if missing or extra:
            raise ShapeError(f"parameter names differ from config: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        self.config = config
        self.arrays: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            a = np.array(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name}: non-finite entries")
            self.arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "TransformerParams":
        return TransformerParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def rounded(self) -> "TransformerParams":
        """Copy with every entry rounded through float32, i.e. what a checkpoint stores."""
        return TransformerParams(self.config, {k: v.astype(np.float32).astype(np.float64) for k, v in self.items()})

    def equals(self, other: "TransformerParams") -> bool:
        return self.config == other.config and all(np.array_equal(v, other[k]) for k, v in self.items())


def init_params(config: ModelConfig, seed: int) -> TransformerParams:
    """Glorot-uniform matrices, zero biases, unit LN gains, small uniform positional matrix.

    Values are rounded to float32 so a freshly initialized model survives a
    checkpoint round trip unchanged.
    """
    rng = substream(seed, "init")
    arrays = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "P":
            arrays[name] = rng.uniform(-0.02, 0.02, size=shape)
        elif leaf == "gamma":
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-a, a, size=shape)
    return TransformerParams(config, arrays).rounded()


# --------------------------------------------------------------------------
# forward pass on tape tensors


def _fused(p: dict[str, Tensor], prefix: str, kind: str, h: int) -> Tensor:
    heads = [p[f"{prefix}W_{kind}{i}"] for i in range(h)]
    return heads[0] if h == 1 else tc.concat(heads, axis=-1)


def _split_heads(x: Tensor, h: int) -> Tensor:
    """``(..., n, d_m)`` -> ``(..., h, n, d_h)``."""
    *lead, n, d = x.shape
    return tc.swapaxes(tc.reshape(x, (*lead, n, h, d // h)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return tc.reshape(tc.swapaxes(x, -2, -3), (*lead, n, h * dh))


def embed_t(S: Tensor, p: dict[str, Tensor]) -> Tensor:
    return tc.add(tc.add_bias(tc.matmul(S, p["W_in"], transpose_b=True), p["b_in"]), p["P"])


def block_t(H: Tensor, p: dict[str, Tensor], l: int, cfg: ModelConfig, last_row_only: bool = False) -> Tensor:
    """One block.  With ``last_row_only`` the result is the ``(..., 1, d_m)`` last row of the full output."""
    b = f"block{l}."
    h = cfg.h
    K = _split_heads(tc.matmul(H, _fused(p, b, "K", h)), h)
    V = _split_heads(tc.matmul(H, _fused(p, b, "V", h)), h)
    Hq = tc.slice_row(H, -1) if last_row_only else H
    Q = _split_heads(tc.matmul(Hq, _fused(p, b, "Q", h)), h)
    logits = tc.scale(tc.matmul(Q, K, transpose_b=True), 1.0 / math.sqrt(cfg.d_h))
    ctx = tc.matmul(tc.softmax_rows(logits), V)
    A = tc.matmul(_merge_heads(ctx), p[b + "W_O"])
    C = tc.layer_norm(tc.add(Hq, A), p[b + "ln1.gamma"], p[b + "ln1.beta"], cfg.rho)
    F = tc.gelu(tc.add_bias(tc.matmul(C, p[b + "W_1"]), p[b + "b_1"]))
    G = tc.add_bias(tc.matmul(F, p[b + "W_2"]), p[b + "b_2"])
    return tc.layer_norm(tc.add(C, G), p[b + "ln2.gamma"], p[b + "ln2.beta"], cfg.rho)


def forward_t(S: Tensor, p: dict[str, Tensor], cfg: ModelConfig, last_row_only: bool = True) -> Tensor:
    """Batched forward on tensors: ``S`` is ``(B, w+1, d_in)``, result ``(B, n_u_max)``.

    ``last_row_only=False`` evaluates every row of every block, which gives
    the same readout and is kept as a reference path.
    """
    if S.ndim != 3 or S.shape[1:] != (cfg.n_rows, cfg.d_in):
        raise ShapeError(f"expected input (B, {cfg.n_rows}, {cfg.d_in}), got {S.shape}")
    H = embed_t(S, p)
    last_rows = []
    if cfg.sequential:
        X = H
        for l in range(cfg.L):
            X = block_t(X, p, l, cfg)
            last_rows.append(tc.slice_row(X, -1))
    else:
        for l in range(cfg.L):
            Y = block_t(H, p, l, cfg, last_row_only=last_row_only)
            last_rows.append(Y if last_row_only else tc.slice_row(Y, -1))
    R = last_rows[0] if cfg.L == 1 else tc.concat(last_rows, axis=-1)
    R = tc.reshape(R, (S.shape[0], cfg.L * cfg.d_m))
    return tc.add_bias(tc.matmul(R, p["W_out"], transpose_b=True), p["b_out"])


def as_tensors(params: TransformerParams) -> dict[str, Tensor]:
    return {k: Tensor(v, name=k) for k, v in params.items()}


# --------------------------------------------------------------------------
# numpy-facing API


def _batched(S, cfg: ModelConfig) -> tuple[np.ndarray, bool]:
    S = np.asarray(S, dtype=np.float64)
    single = S.ndim == 2
    if single:
        S = S[None]
    if S.ndim != 3 or S.shape[1:] != (cfg.n_rows, cfg.d_in):
        raise ShapeError(f"expected input ({cfg.n_rows}, {cfg.d_in}) or a stack of them, got {S.shape}")
    return S, single


def embed(S, params: TransformerParams) -> np.ndarray:
    """``H = S W_in^T + 1 b_in^T + P`` for one window or a stack."""
    S, single = _batched(S, params.config)
    H = embed_t(Tensor(S), as_tensors(params)).data
    return H[0] if single else H


def attention_block(H, params: TransformerParams, block: int) -> np.ndarray:
    """Full output ``Y`` of block ``block`` for ``H`` of shape ``(w+1, d_m)`` or a stack."""
    H = np.asarray(H, dtype=np.float64)
    cfg = params.config
    if H.shape[-2:] != (cfg.n_rows, cfg.d_m):
        raise ShapeError(f"expected H (..., {cfg.n_rows}, {cfg.d_m}), got {H.shape}")
    if not 0 <= block < cfg.L:
        raise IndexError(f"block {block} out of range")
    return block_t(Tensor(H), as_tensors(params), block, cfg).data


def attention_weights(H, params: TransformerParams, block: int) -> np.ndarray:
    """Softmax weights ``(h, w+1, w+1)`` of one block, for inspection."""
    cfg = params.config
    p = as_tensors(params)
    b = f"block{block}."
    Ht = Tensor(np.asarray(H, dtype=np.float64))
    Q = _split_heads(tc.matmul(Ht, _fused(p, b, "Q", cfg.h)), cfg.h)
    K = _split_heads(tc.matmul(Ht, _fused(p, b, "K", cfg.h)), cfg.h)
    return tc.softmax_rows(tc.scale(tc.matmul(Q, K, transpose_b=True), 1.0 / math.sqrt(cfg.d_h))).data


def forward(S, params: TransformerParams, batch_size: int = 8192) -> np.ndarray:
    """Predicted padded standardized control: ``(n_u_max,)`` for one window, ``(B, n_u_max)`` for a stack."""
    S, single = _batched(S, params.config)
    p = as_tensors(params)
    out = np.concatenate([
        forward_t(Tensor(S[i:i + batch_size]), p, params.config).data for i in range(0, S.shape[0], batch_size)
    ]) if S.shape[0] else np.zeros((0, params.config.n_u_max))
    return out[0] if single else out


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: TransformerParams, extra: dict[str, Any] | None = None,
                    extra_sections: dict[str, np.ndarray] | None = None) -> None:
    header = {"kind": "checkpoint", "code_version": __version__, "model": params.config.to_dict()}
    if extra:
        header.update(extra)
    sections = [(f"param/{k}", v) for k, v in params.items()]
    sections += [(k, v) for k, v in (extra_sections or {}).items()]
    write_container(path, CHECKPOINT_MAGIC, header, sections)


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return ``(params, header, extra_sections)``; every tensor is checked against the config."""
    header, sec = read_container(path, CHECKPOINT_MAGIC)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint")
    try:
        cfg = ModelConfig.from_dict(header["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad model config in header: {exc}") from None
    if expected is not None and cfg != expected:
        raise ConfigMismatchError(f"{path}: checkpoint config {cfg} differs from expected {expected}")
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        key = f"param/{name}"
        if key not in sec:
            raise FormatError(f"{path}: tensor {name!r} missing")
        if sec[key].shape != shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {sec[key].shape}, config implies {shape}")
        arrays[name] = sec[key].astype(np.float64)
    try:
        params = TransformerParams(cfg, arrays)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    extra = {k: v.astype(np.float64) for k, v in sec.items() if not k.startswith("param/")}
    return params, header, extra
