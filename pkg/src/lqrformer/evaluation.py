"""Closed-loop deployment of a window policy, sub-optimality metrics, robustness
studies and the window / data-volume ablations."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import kernels
from .datagen import TrajectoryDataset, sample_initial_conditions
from .lqr import DEFAULT_BLOWUP, LqrSolution, solve_dare, tail_factor
from .lti import LtiSystem, VariantSpec, make_variants
from .model import ModelConfig, TransformerParams, forward, init_params
from .pipeline import (
    NormStats, PipelineConfig, build_windows, dataset_stats, destandardize_control,
    destandardize_state, dim_encoding, standardize, standardize_control,
)
from .seeding import derived_seed, substream
from .training import TrainConfig, train

log = logging.getLogger(__name__)

# maps a stack of windows (B, w+1, d_in) to padded standardized controls (B, n_u_max)
WindowPolicy = Callable[[np.ndarray], np.ndarray]

SIM_TOL = 1e-6


def transformer_policy(params: TransformerParams) -> WindowPolicy:
    return lambda S: forward(S, params)


def lqr_window_policy(sys: LtiSystem, K: np.ndarray, stats: NormStats, config: PipelineConfig) -> WindowPolicy:
    """The optimal law ``u = -Kx`` expressed in the policy's standardized window coordinates."""
    def policy(S):
        x = destandardize_state(S[:, -1, : sys.n_x], stats)
        out = np.zeros((S.shape[0], config.n_u_max))
        out[:, : sys.n_u] = standardize_control(-(x @ K.T), stats)
        return out
    return policy


@dataclass(eq=False)
class PolicyRollout:
    system_id: int
    x0: np.ndarray
    states: np.ndarray  # (horizon, n_x)
    controls: np.ndarray  # (horizon, n_u)
    cost: float
    diverged: bool


def rollout_batch(
    sys: LtiSystem,
    policy: WindowPolicy,
    stats: NormStats,
    config: PipelineConfig,
    X0,
    horizon: int,
    blowup: float = DEFAULT_BLOWUP,
) -> list[PolicyRollout]:
    """Run the window policy from every row of ``X0`` in lock step.

    A rollout diverges when its state turns non-finite, leaves the ball of
    radius ``blowup * max(1, |x0|)``, or ends no closer to the origin than it
    started.  Diverged rollouts carry ``cost = inf`` and are frozen from the
    step the guard fires.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    X0 = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    J, n_x = X0.shape
    n_u = sys.n_u
    enc = dim_encoding(n_x, n_u, config)
    window = np.zeros((J, config.w + 1, config.d_in))
    X = np.zeros((J, horizon, n_x))
    U = np.zeros((J, horizon, n_u))
    cost = np.zeros(J)
    alive = np.ones(J, dtype=bool)
    bound = blowup * np.maximum(1.0, np.linalg.norm(X0, axis=1))
    x = X0.copy()
    for t in range(horizon):
        bad = alive & (~np.all(np.isfinite(x), axis=1) | (np.linalg.norm(x, axis=1) > bound))
        alive &= ~bad
        if not alive.any():
            break
        window[:, :-1] = window[:, 1:]
        window[:, -1, :n_x] = standardize(x, stats)
        window[:, -1, config.n_x_max:] = enc
        u_bar = np.asarray(policy(window[alive]), dtype=np.float64)
        u = np.zeros((J, n_u))
        u[alive] = destandardize_control(u_bar[:, :n_u], stats)
        X[:, t] = x
        U[:, t] = u
        cost[alive] += np.einsum("ji,ik,jk->j", x[alive], sys.Q, x[alive]) + np.einsum("ji,ik,jk->j", u[alive], sys.R, u[alive])
        x = np.where(alive[:, None], x @ sys.A.T + u @ sys.B.T, x)
    with np.errstate(invalid="ignore"):
        final_ok = np.linalg.norm(X[:, -1], axis=1) < np.linalg.norm(X0, axis=1)
    diverged = ~alive | ~np.isfinite(cost) | (~final_ok & np.any(X0 != 0, axis=1))
    return [
        PolicyRollout(sys.id, X0[j].copy(), X[j], U[j], float("inf") if diverged[j] else float(cost[j]), bool(diverged[j]))
        for j in range(J)
    ]


def rollout_policy(sys, policy, stats, config, x0, horizon: int = 1250, blowup: float = DEFAULT_BLOWUP) -> PolicyRollout:
    return rollout_batch(sys, policy, stats, config, np.asarray(x0, dtype=np.float64)[None], horizon, blowup)[0]


def optimal_costs(sys: LtiSystem, sol: LqrSolution, X0, horizon: int) -> np.ndarray:
    """Cost of the LQR law over the same finite horizon the policy is simulated for."""
    X, U = kernels.closed_loop_rollout(sys.A, sys.B, sol.K, X0, horizon)
    return kernels.quadratic_cost(X, U, sys.Q, sys.R)


@dataclass
class SubOptimality:
    system: str
    base_name: str
    variant: int
    delta: float  # summed ratio over non-diverged rollouts, nan if none survived
    ratios: np.ndarray
    costs: np.ndarray
    optimal: np.ndarray
    n_diverged: int
    tail: float

    @property
    def J_eval(self) -> int:
        return len(self.costs)

    @property
    def stabilized_fraction(self) -> float:
        return 1.0 - self.n_diverged / self.J_eval

    @property
    def mean_ratio(self) -> float:
        ok = np.isfinite(self.ratios)
        return float(np.mean(self.ratios[ok])) if ok.any() else float("nan")


def relative_suboptimality(
    sys: LtiSystem,
    policy: WindowPolicy,
    stats: NormStats,
    config: PipelineConfig,
    J_eval: int = 25,
    seed: int = 0,
    horizon: int = 1250,
    sol: LqrSolution | None = None,
    bound: float | None = None,
) -> SubOptimality:
    """``sum_j (J(x0_j; policy) - J(x0_j; LQR)) / J(x0_j; LQR)`` over rollouts that stay bounded."""
    bound = sys.ic_bound if bound is None else bound
    if not bound > 0:
        raise ValueError("evaluation needs a positive initial-condition bound (x0 = 0 has zero optimal cost)")
    sol = solve_dare(sys) if sol is None else sol
    rng = substream(seed, "eval", sys.variant + 1, zlib.crc32((sys.base_name or sys.name).encode()))
    X0 = sample_initial_conditions(sys, J_eval, bound, rng)
    opt = optimal_costs(sys, sol, X0, horizon)
    rolls = rollout_batch(sys, policy, stats, config, X0, horizon)
    costs = np.array([r.cost for r in rolls])
    ratios = (costs - opt) / opt
    div = np.array([r.diverged for r in rolls])
    ratios[div] = np.inf
    return SubOptimality(
        sys.name, sys.base_name or sys.name, sys.variant,
        float(np.sum(ratios[~div])) if (~div).any() else float("nan"), ratios, costs, opt,
        int(div.sum()), tail_factor(sys, sol, horizon),
    )


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    results: list[SubOptimality]
    meta: dict[str, Any] = field(default_factory=dict)

    def families(self) -> dict[str, list[SubOptimality]]:
        out: dict[str, list[SubOptimality]] = {}
        for r in self.results:
            out.setdefault(r.base_name, []).append(r)
        return out

    def summary(self) -> list[dict[str, Any]]:
        rows = []
        for name, res in self.families().items():
            d = np.array([r.delta for r in res if r.n_diverged < r.J_eval])
            q = np.percentile(d, [0, 25, 50, 75, 100]) if d.size else [float("nan")] * 5
            rows.append({
                "family": name, "n_systems": len(res),
                "delta_min": q[0], "delta_q1": q[1], "delta_median": q[2], "delta_q3": q[3], "delta_max": q[4],
                "stabilized_fraction": float(np.mean([r.stabilized_fraction for r in res])),
            })
        return rows

    @property
    def deltas(self) -> np.ndarray:
        return np.array([r.delta for r in self.results])

    @property
    def median_delta(self) -> float:
        d = self.deltas
        d = d[np.isfinite(d)]
        return float(np.median(d)) if d.size else float("nan")

    @property
    def stabilized_fraction(self) -> float:
        total = sum(r.J_eval for r in self.results)
        return 1.0 - sum(r.n_diverged for r in self.results) / total if total else float("nan")

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["family", "system", "variant", "trajectory", "cost", "optimal_cost", "ratio", "diverged"])
            for r in self.results:
                for j in range(r.J_eval):
                    w.writerow([r.base_name, r.system, r.variant, j, repr(float(r.costs[j])),
                                repr(float(r.optimal[j])), repr(float(r.ratios[j])), int(not math.isfinite(r.costs[j]))])

    def write_summary_csv(self, path) -> None:
        rows = self.summary()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["family", "n_systems", "delta_min", "delta_q1", "delta_median", "delta_q3", "delta_max", "stabilized_fraction"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})

    def write_svg(self, path, title: str = "Relative sub-optimality") -> None:
        Path(path).write_text(box_plot_svg(
            {name: [r.delta for r in res if r.n_diverged < r.J_eval] for name, res in self.families().items()}, title,
        ))


def evaluate_systems(
    systems: Sequence[LtiSystem],
    policy: WindowPolicy,
    stats: Sequence[NormStats],
    config: PipelineConfig,
    J_eval: int = 25,
    seed: int = 0,
    horizon: int = 1250,
    solutions: Sequence[LqrSolution] | None = None,
    bound: float | None = None,
) -> EvalReport:
    results = []
    for k, (sys, st) in enumerate(zip(systems, stats)):
        sol = solutions[k] if solutions is not None else None
        results.append(relative_suboptimality(sys, policy, st, config, J_eval, seed, horizon, sol, bound))
    return EvalReport(results, {"J_eval": J_eval, "seed": seed, "horizon": horizon, "bound": bound})


def robustness_study(
    bases: Sequence[str],
    delta: float,
    n_variants: int,
    policy: WindowPolicy,
    stats_for: Callable[[LtiSystem], NormStats],
    config: PipelineConfig,
    J_eval: int = 25,
    seed: int = 0,
    horizon: int = 1250,
    dt: float = 0.02,
    catalog_path: str | None = None,
) -> EvalReport:
    """Draw fresh ``±delta`` variants of each base system and evaluate the policy on them.

    ``stats_for`` picks the normalization statistics for a variant, e.g.
    those of its base system's training data.  A family whose variants cannot
    be generated is skipped with a warning.
    """
    results: list[SubOptimality] = []
    warnings: list[str] = []
    vseed = derived_seed(seed, "eval-variants")
    for base in bases:
        try:
            variants = make_variants(VariantSpec(base, delta=delta, seed=vseed, count=n_variants, dt=dt), catalog_path)
        except Exception as exc:  # noqa: BLE001 - reported per family
            log.warning("%s: variant generation failed: %s", base, exc)
            warnings.append(f"{base}: {exc}")
            continue
        for v in variants:
            results.append(relative_suboptimality(v, policy, stats_for(v), config, J_eval, seed, horizon))
    meta = {"delta": delta, "n_variants": n_variants, "J_eval": J_eval, "seed": seed, "horizon": horizon,
            "warnings": warnings}
    return EvalReport(results, meta)


def box_plot_svg(groups: dict[str, Sequence[float]], title: str = "", width: int = 720, height: int = 360) -> str:
    """Minimal static box plot: one box (quartiles, median, min-max whiskers) per group."""
    names = list(groups)
    vals = [np.asarray(groups[n], dtype=np.float64) for n in names]
    finite = np.concatenate([v[np.isfinite(v)] for v in vals]) if vals else np.zeros(0)
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    top, bottom, left, right = 40, height - 80, 60, width - 20
    y = lambda v: bottom - (v - lo) / (hi - lo) * (bottom - top)
    step = (right - left) / max(len(names), 1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>']
    for tick in np.linspace(lo, hi, 5):
        out.append(f'<text x="{left - 5}" y="{y(tick) + 4:.1f}" text-anchor="end">{tick:.3g}</text>')
    for k, (name, v) in enumerate(zip(names, vals)):
        cx = left + step * (k + 0.5)
        v = v[np.isfinite(v)]
        out.append(f'<text transform="translate({cx:.1f},{bottom + 12}) rotate(35)">{_esc(name)}</text>')
        if not v.size:
            continue
        q0, q1, q2, q3, q4 = np.percentile(v, [0, 25, 50, 75, 100])
        hw = min(step * 0.3, 20)
        out += [
            f'<line x1="{cx:.1f}" y1="{y(q0):.1f}" x2="{cx:.1f}" y2="{y(q4):.1f}" stroke="black"/>',
            f'<rect x="{cx - hw:.1f}" y="{y(q3):.1f}" width="{2 * hw:.1f}" height="{max(y(q1) - y(q3), 0.5):.1f}" fill="#9ecae1" stroke="black"/>',
            f'<line x1="{cx - hw:.1f}" y1="{y(q2):.1f}" x2="{cx + hw:.1f}" y2="{y(q2):.1f}" stroke="#d62728" stroke-width="2"/>',
        ]
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# --------------------------------------------------------------------------
# ablations


@dataclass
class AblationRow:
    value: int
    val_loss: float
    train_loss: float
    n_train_windows: int


def _train_once(train_data, val_data, model_cfg: ModelConfig, train_cfg: TrainConfig) -> tuple[float, float]:
    params = init_params(model_cfg, train_cfg.seed)
    res = train(train_data, val_data, params, train_cfg)
    last = res.history[-1] if res.history else None
    return (last.val_loss if last else res.initial_val_loss), (last.train_loss if last else float("nan"))


def holdout_split(ds: TrajectoryDataset, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-system trajectory order and the number held out for validation.

    Returns ``(order (N, J), n_val)``: trajectories ``order[i, :n_val]`` of
    system ``i`` form a fixed validation set, the rest the training pool.
    """
    n_val = max(1, int(round(val_fraction * ds.J)))
    if n_val >= ds.J:
        raise ValueError("not enough trajectories per system for a hold-out set")
    order = np.stack([substream(seed, "holdout", i).permutation(ds.J) for i in range(ds.N)])
    return order, n_val


def _select(data, order: np.ndarray, cols: slice):
    keep = np.zeros(data.n_traj, dtype=bool)
    for k in range(data.n_traj):
        keep[k] = data.traj_ids[k] in order[data.system_ids[k], cols]
    return data.select(np.flatnonzero(keep))


def ablation_window(
    ds: TrajectoryDataset,
    w_values: Sequence[int],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    pipeline: PipelineConfig | None = None,
    val_fraction: float = 0.05,
) -> list[AblationRow]:
    """Train one model per window length on identical data, splits and budgets."""
    base = pipeline or PipelineConfig(w=model_cfg.w)
    order, n_val = holdout_split(ds, val_fraction, train_cfg.seed)
    stats = dataset_stats(ds)
    rows = []
    for w in w_values:
        pc = replace(base, w=int(w))
        data = build_windows(ds, pc, stats)
        tr, va = _select(data, order, slice(n_val, None)), _select(data, order, slice(0, n_val))
        mc = replace(model_cfg, w=int(w), d_in=pc.d_in, n_u_max=pc.n_u_max)
        val, trn = _train_once(tr, va, mc, train_cfg)
        rows.append(AblationRow(int(w), val, trn, len(tr)))
        log.info("window %d: val loss %.6f", w, val)
    return rows


def ablation_data_volume(
    ds: TrajectoryDataset,
    J_values: Sequence[int],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    pipeline: PipelineConfig | None = None,
    val_fraction: float = 0.05,
) -> list[AblationRow]:
    """Train on the first ``J`` pool trajectories of every system; validation set and statistics stay fixed."""
    pc = pipeline or PipelineConfig(w=model_cfg.w)
    order, n_val = holdout_split(ds, val_fraction, train_cfg.seed)
    pool = ds.J - n_val
    bad = [J for J in J_values if not 1 <= J <= pool]
    if bad:
        raise ValueError(f"J values {bad} exceed the {pool} trajectories per system available for training")
    # statistics from the whole training pool, so only the amount of data varies
    pool_ds = TrajectoryDataset(
        ds.systems, ds.solutions,
        [ds.states[i][order[i, n_val:]] for i in range(ds.N)],
        [ds.controls[i][order[i, n_val:]] for i in range(ds.N)], ds.seeds, ds.meta,
    )
    data = build_windows(ds, pc, dataset_stats(pool_ds))
    va = _select(data, order, slice(0, n_val))
    rows = []
    for J in J_values:
        tr = _select(data, order, slice(n_val, n_val + int(J)))
        val, trn = _train_once(tr, va, model_cfg, train_cfg)
        rows.append(AblationRow(int(J), val, trn, len(tr)))
        log.info("J=%d: val loss %.6f", J, val)
    return rows


def write_ablation_csv(path, axis: str, rows: Sequence[AblationRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([axis, "val_loss", "train_loss", "n_train_windows"])
        for r in rows:
            w.writerow([r.value, repr(r.val_loss), repr(r.train_loss), r.n_train_windows])
