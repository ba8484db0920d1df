"""Optimal-trajectory data collection: LQR rollouts from random initial states."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import __version__, kernels
from .errors import FormatError, GenerationError, LqrfError
from .fileformat import read_container, write_container
from .lqr import DEFAULT_MAX_ITER, DEFAULT_TOL, LqrSolution, optimal_gain, solve_dare
from .lti import LtiSystem
from .seeding import derived_seed

log = logging.getLogger(__name__)

DATASET_MAGIC = "LQRF"


@dataclass(eq=False)
class Trajectory:
    system_id: int
    init_id: int
    X: np.ndarray  # (T, n_x)
    U: np.ndarray  # (T, n_u)

    @property
    def T(self) -> int:
        return self.X.shape[0]


@dataclass(eq=False)
class TrajectoryDataset:
    """Rollouts grouped by system: ``states[i]`` is ``(J, T, n_x)``."""

    systems: list[LtiSystem]
    solutions: list[LqrSolution]
    states: list[np.ndarray]
    controls: list[np.ndarray]
    seeds: list[int]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.systems)

    @property
    def J(self) -> int:
        return self.states[0].shape[0] if self.states else 0

    @property
    def T(self) -> int:
        return self.states[0].shape[1] if self.states else 0

    def trajectory(self, i: int, j: int) -> Trajectory:
        return Trajectory(i, j, self.states[i][j], self.controls[i][j])

    @property
    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(i, j) for i in range(self.N) for j in range(self.states[i].shape[0])]

    def subset(self, system_ids: Sequence[int] | None = None, n_traj: int | None = None, offset: int = 0) -> "TrajectoryDataset":
        """Keep some systems and/or trajectories ``offset .. offset + n_traj`` of each."""
        ids = list(range(self.N)) if system_ids is None else list(system_ids)
        stop = None if n_traj is None else offset + n_traj
        if stop is not None and stop > self.J:
            raise LqrfError(f"requested trajectories {offset}..{stop} but only {self.J} per system exist")
        return TrajectoryDataset(
            systems=[self.systems[i].with_id(k) for k, i in enumerate(ids)],
            solutions=[self.solutions[i] for i in ids],
            states=[self.states[i][offset:stop] for i in ids],
            controls=[self.controls[i][offset:stop] for i in ids],
            seeds=[self.seeds[i] for i in ids],
            meta=dict(self.meta),
        )


def sample_initial_conditions(sys: LtiSystem, J: int, bound: float, seed) -> np.ndarray:
    """``J`` states with entries uniform in ``[-bound, bound]``; all-zero draws are redrawn."""
    if bound < 0:
        raise ValueError("bound must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X0 = rng.uniform(-bound, bound, size=(J, sys.n_x))
    if bound > 0:
        for j in range(J):
            while not np.any(X0[j]):
                X0[j] = rng.uniform(-bound, bound, size=sys.n_x)
    return X0


def rollout_optimal(sys: LtiSystem, sol: LqrSolution, x0, T: int) -> Trajectory:
    X, U = kernels.closed_loop_rollout(sys.A, sys.B, sol.K, np.asarray(x0, dtype=np.float64).reshape(1, -1), T)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U))):
        raise GenerationError(f"{sys.name}: optimal rollout produced non-finite values")
    return Trajectory(sys.id, 0, X[0], U[0])


def _generate_one(sys: LtiSystem, J: int, T: int, seed: int, bound: float | None, tol: float, max_iter: int):
    try:
        sol = solve_dare(sys, tol=tol, max_iter=max_iter)
    except LqrfError as exc:
        raise type(exc)(f"system {sys.id} ({sys.name}): {exc}") from exc
    b = sys.ic_bound if bound is None else bound
    X0 = sample_initial_conditions(sys, J, b, np.random.default_rng(seed))
    X, U = kernels.closed_loop_rollout(sys.A, sys.B, sol.K, X0, T)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U))):
        raise GenerationError(f"system {sys.id} ({sys.name}): optimal rollout produced non-finite values")
    return sol, X, U


def build_dataset(
    systems: Sequence[LtiSystem],
    J: int,
    T: int,
    seed: int,
    bound: float | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    workers: int = 1,
) -> TrajectoryDataset:
    """Solve each system's LQR problem once and roll out ``J`` trajectories of length ``T``.

    Initial states come from the ``datagen`` substream of ``seed`` keyed by
    the system's position, so results do not depend on ``workers``.
    """
    systems = [s.with_id(i) for i, s in enumerate(systems)]
    seeds = [derived_seed(seed, "datagen", i) for i in range(len(systems))]
    args = [(s, J, T, sd, bound, tol, max_iter) for s, sd in zip(systems, seeds)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _generate_one(*a), args))
    else:
        results = [_generate_one(*a) for a in args]
    sols = [r[0] for r in results]
    for s, sol in zip(systems, sols):
        log.debug("%s: Riccati residual %.2e after %d iterations", s.name, sol.residual, sol.iterations)
    meta = {
        "J": J, "T": T, "root_seed": int(seed), "tol": tol, "max_iter": max_iter,
        "ic_bound": bound, "kernel_backend": kernels.get_backend(),
    }
    return TrajectoryDataset(systems, sols, [r[1] for r in results], [r[2] for r in results], seeds, meta)


def replay(ds: TrajectoryDataset, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Re-simulate system ``i`` from its stored initial states and stored gain."""
    sys = ds.systems[i]
    return kernels.closed_loop_rollout(sys.A, sys.B, ds.solutions[i].K, ds.states[i][:, 0, :], ds.T)


# --------------------------------------------------------------------------
# persistence


def dataset_header(ds: TrajectoryDataset, extra: dict[str, Any] | None = None) -> dict[str, Any]:
    systems = []
    for s, sol, seed in zip(ds.systems, ds.solutions, ds.seeds):
        d = s.to_dict()
        d.update({"n_x": s.n_x, "n_u": s.n_u, "seed": seed, "P": sol.P.tolist(), "K": sol.K.tolist(),
                  "residual": sol.residual, "iterations": sol.iterations})
        systems.append(d)
    header = {
        "kind": "trajectories",
        "code_version": __version__,
        "N": ds.N, "J": ds.J, "T": ds.T,
        "systems": systems,
        "meta": ds.meta,
    }
    if extra:
        header.update(extra)
    return header


def save_dataset(path, ds: TrajectoryDataset, extra: dict[str, Any] | None = None) -> None:
    sections = []
    for i in range(ds.N):
        sections.append((f"X/{i}", ds.states[i]))
        sections.append((f"U/{i}", ds.controls[i]))
    write_container(path, DATASET_MAGIC, dataset_header(ds, extra), sections)


def load_dataset(path) -> tuple[TrajectoryDataset, dict[str, Any]]:
    """Read a trajectory file.  Payload values come back as float64 copies of the stored float32."""
    header, sections = read_container(path, DATASET_MAGIC)
    if header.get("kind") != "trajectories":
        raise FormatError(f"{path}: not a trajectory dataset (kind={header.get('kind')!r})")
    systems, sols, states, controls, seeds = [], [], [], [], []
    try:
        for i, d in enumerate(header["systems"]):
            s = LtiSystem.from_dict(d, validate=False)
            systems.append(s)
            P = np.asarray(d["P"], dtype=np.float64)
            K = np.asarray(d["K"], dtype=np.float64)
            sols.append(LqrSolution(P=P, K=K, residual=float(d["residual"]), iterations=int(d["iterations"])))
            seeds.append(int(d["seed"]))
            X = sections[f"X/{i}"].astype(np.float64)
            U = sections[f"U/{i}"].astype(np.float64)
            if X.shape != (header["J"], header["T"], s.n_x) or U.shape != (header["J"], header["T"], s.n_u):
                raise FormatError(f"{path}: section shapes for system {i} disagree with the header")
            states.append(X)
            controls.append(U)
    except KeyError as exc:
        raise FormatError(f"{path}: missing field or section {exc}") from None
    ds = TrajectoryDataset(systems, sols, states, controls, seeds, dict(header.get("meta", {})))
    return ds, header


def check_gain_consistency(ds: TrajectoryDataset) -> float:
    """Largest deviation of a stored gain from the one implied by its stored ``P``."""
    worst = 0.0
    for s, sol in zip(ds.systems, ds.solutions):
        worst = max(worst, float(np.max(np.abs(optimal_gain(s.A, s.B, s.R, sol.P) - sol.K))))
    return worst
