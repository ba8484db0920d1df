"""Discrete-time LTI problem instances, the benchmark catalog, and variants.

Catalog entries live in ``data/catalog.json``.  Each entry describes
continuous-time physics in one of four forms:

``linear``
    ``Ac`` and ``Bc`` given directly (numbers or expressions in ``params``).
``mechanical``
    ``M q'' + D q' + K q = Bq u``; the state is ``[q, q']``.
``serial_chain``
    planar chain of point masses hanging under gravity, one torque per joint.
``nonlinear``
    ``dynamics`` expressions ``x' = f(x, u)`` Jacobian-linearized at the
    documented ``equilibrium``.

The continuous model is discretized with a zero-order hold at ``dt``.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .errors import GenerationError, NumericError

N_X_MAX = 12
N_U_MAX = 6
DEFAULT_DT = 0.02
DEFAULT_R_WEIGHT = 0.1

_RANK_RTOL = 1e-9
_MARGINAL = 1.0 - 1e-9


# --------------------------------------------------------------------------
# discretization and structural checks


def discretize(Ac, Bc, dt: float, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization ``(A, B)`` of ``x' = Ac x + Bc u``.

    Uses the exponential of the augmented matrix ``[[Ac, Bc], [0, 0]] * dt``
    by scaling and squaring around a truncated Taylor series.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    Ac = np.atleast_2d(np.asarray(Ac, dtype=np.float64))
    Bc = np.asarray(Bc, dtype=np.float64).reshape(Ac.shape[0], -1)
    n, m = Bc.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = Ac
    aug[:n, n:] = Bc
    E = _expm_taylor(aug * dt, tol)
    return E[:n, :n].copy(), E[:n, n:].copy()


def _expm_taylor(X: np.ndarray, tol: float, max_terms: int = 60) -> np.ndarray:
    norm = np.linalg.norm(X, ord=np.inf)
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    Y = X / (2.0 ** squarings)
    result = np.eye(X.shape[0])
    term = np.eye(X.shape[0])
    # squaring multiplies the truncation error by roughly 2**squarings
    target = tol * 1e-3 / (2.0 ** squarings)
    for k in range(1, max_terms + 1):
        term = term @ Y / k
        result = result + term
        if np.linalg.norm(term) <= target * max(1.0, np.linalg.norm(result)):
            break
    else:
        raise NumericError(f"matrix exponential series did not converge in {max_terms} terms")
    for _ in range(squarings):
        result = result @ result
    return result


def _rank(M: np.ndarray, scale: float) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > _RANK_RTOL * max(scale, 1.0)))


def is_stabilizable(A, B) -> bool:
    """PBH test: ``[A - lam I, B]`` has full row rank for every ``|lam| >= 1``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n = A.shape[0]
    scale = max(np.linalg.norm(A), np.linalg.norm(B))
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= _MARGINAL and _rank(np.hstack([A - lam * np.eye(n), B]), scale) < n:
            return False
    return True


def is_detectable(A, C) -> bool:
    """PBH test: ``[A - lam I; C]`` has full column rank for every ``|lam| >= 1``."""
    return is_stabilizable(np.asarray(A).T, np.asarray(C).T)


def psd_sqrt(Q) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


# --------------------------------------------------------------------------
# problem instance


@dataclass(eq=False)
class LtiSystem:
    """One LQR problem ``(A, B, Q, R)`` in discrete time."""

    name: str
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    dt: float = DEFAULT_DT
    id: int = 0
    base_name: str = ""
    variant: int = -1  # -1 marks the nominal system
    ic_bound: float = 1.0
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        n = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=np.float64).reshape(n, -1)
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        if not self.base_name:
            self.base_name = self.name
        if self.validate:
            self.check()

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def check(self) -> None:
        n, m = self.n_x, self.n_u
        if self.A.shape != (n, n) or self.Q.shape != (n, n) or self.R.shape != (m, m):
            raise ValueError(f"{self.name}: inconsistent matrix shapes")
        if n > N_X_MAX or m > N_U_MAX:
            raise ValueError(f"{self.name}: dimensions ({n}, {m}) exceed ({N_X_MAX}, {N_U_MAX})")
        for label, M in (("A", self.A), ("B", self.B), ("Q", self.Q), ("R", self.R)):
            if not np.all(np.isfinite(M)):
                raise ValueError(f"{self.name}: {label} has non-finite entries")
        if not np.allclose(self.Q, self.Q.T, rtol=0, atol=1e-12) or np.linalg.eigvalsh(self.Q).min() < -1e-12:
            raise ValueError(f"{self.name}: Q must be symmetric positive semi-definite")
        if not np.allclose(self.R, self.R.T, rtol=0, atol=1e-12):
            raise ValueError(f"{self.name}: R must be symmetric")
        try:
            np.linalg.cholesky(self.R)
        except np.linalg.LinAlgError:
            raise ValueError(f"{self.name}: R must be positive definite") from None
        if not is_stabilizable(self.A, self.B):
            raise ValueError(f"{self.name}: (A, B) is not stabilizable")
        if not is_detectable(self.A, psd_sqrt(self.Q)):
            raise ValueError(f"{self.name}: (Q^1/2, A) is not detectable")

    def with_id(self, system_id: int) -> "LtiSystem":
        return replace(self, id=system_id, validate=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "base_name": self.base_name,
            "variant": self.variant,
            "id": self.id,
            "dt": self.dt,
            "ic_bound": self.ic_bound,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "Q": self.Q.tolist(),
            "R": self.R.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any], validate: bool = True) -> "LtiSystem":
        return cls(
            name=d["name"], A=d["A"], B=d["B"], Q=d["Q"], R=d["R"], dt=d["dt"], id=d["id"],
            base_name=d["base_name"], variant=d["variant"], ic_bound=d["ic_bound"], validate=validate,
        )


# --------------------------------------------------------------------------
# catalog


def _sympy():
    import sympy

    return sympy


def _evaluate(expr, env: dict[str, float]) -> float:
    if isinstance(expr, (int, float)):
        return float(expr)
    sp = _sympy()
    value = sp.sympify(expr, locals={k: sp.Symbol(k) for k in env}).subs(env)
    return float(sp.N(value))


def _matrix(rows, env: dict[str, float]) -> np.ndarray:
    return np.array([[_evaluate(v, env) for v in row] for row in rows], dtype=np.float64)


def _mechanical(M, D, K, Bq) -> tuple[np.ndarray, np.ndarray]:
    k = M.shape[0]
    Minv = np.linalg.inv(M)
    Ac = np.zeros((2 * k, 2 * k))
    Ac[:k, k:] = np.eye(k)
    Ac[k:, :k] = -Minv @ K
    Ac[k:, k:] = -Minv @ D
    Bc = np.vstack([np.zeros((k, Bq.shape[1])), Minv @ Bq])
    return Ac, Bc


def _serial_chain(masses, lengths, damping, g) -> tuple[np.ndarray, np.ndarray]:
    # hanging chain of point masses at the link tips, small-angle linearization
    k = len(masses)
    tip = np.cumsum(lengths)  # distance of mass c from the base
    joint = np.concatenate([[0.0], tip[:-1]])  # distance of joint a from the base
    M = np.zeros((k, k))
    for c in range(k):
        lever = np.array([tip[c] - joint[a] if a <= c else 0.0 for a in range(k)])
        M += masses[c] * np.outer(lever, lever)
    # potential in absolute link angles phi = T q
    link_w = np.array([g * lengths[c] * np.sum(masses[c:]) for c in range(k)])
    T = np.tril(np.ones((k, k)))
    K = T.T @ np.diag(link_w) @ T
    D = np.diag(np.broadcast_to(np.asarray(damping, dtype=np.float64), (k,)))
    return _mechanical(M, D, K, np.eye(k))


def _nonlinear(entry: dict, env: dict[str, float]) -> tuple[np.ndarray, np.ndarray]:
    sp = _sympy()
    xs = [sp.Symbol(s) for s in entry["states"]]
    us = [sp.Symbol(s) for s in entry["inputs"]]
    names = {str(s): s for s in xs + us}
    names.update({k: sp.Symbol(k) for k in env})
    f = sp.Matrix([sp.sympify(e, locals=names) for e in entry["dynamics"]])
    eq = entry.get("equilibrium", {})
    x_eq = [_evaluate(v, env) for v in eq.get("x", [0] * len(xs))]
    u_eq = [_evaluate(v, env) for v in eq.get("u", [0] * len(us))]
    point = dict(env)
    point.update({str(s): v for s, v in zip(xs, x_eq)})
    point.update({str(s): v for s, v in zip(us, u_eq)})
    sym_point = {names[k]: v for k, v in point.items()}
    residual = np.array(f.subs(sym_point).evalf(), dtype=np.float64).ravel()
    if np.max(np.abs(residual), initial=0.0) > 1e-9:
        raise ValueError(f"{entry['name']}: documented equilibrium is not an equilibrium (f = {residual})")
    Ac = np.array(f.jacobian(xs).subs(sym_point).evalf(), dtype=np.float64)
    Bc = np.array(f.jacobian(us).subs(sym_point).evalf(), dtype=np.float64)
    return Ac, Bc


@dataclass(frozen=True, eq=False)
class CatalogEntry:
    name: str
    index: int
    group: str  # "seen" or "unseen"
    kind: str
    raw: dict = field(repr=False)
    r_weight: float = DEFAULT_R_WEIGHT
    ic_bound: float = 1.0

    @cached_property
    def continuous(self) -> tuple[np.ndarray, np.ndarray]:
        """Continuous-time ``(Ac, Bc)`` of the nominal physical model."""
        e = self.raw
        env = {k: _evaluate(v, {}) for k, v in e.get("params", {}).items()}
        if self.kind == "linear":
            return _matrix(e["Ac"], env), _matrix(e["Bc"], env)
        if self.kind == "mechanical":
            return _mechanical(_matrix(e["M"], env), _matrix(e["D"], env), _matrix(e["K"], env), _matrix(e["Bq"], env))
        if self.kind == "serial_chain":
            return _serial_chain(np.asarray(e["masses"], float), np.asarray(e["lengths"], float), e["damping"], env.get("g", 9.81))
        if self.kind == "nonlinear":
            return _nonlinear(e, env)
        raise ValueError(f"{self.name}: unknown model kind {self.kind!r}")

    @property
    def n_x(self) -> int:
        return self.continuous[0].shape[0]

    @property
    def n_u(self) -> int:
        return self.continuous[1].shape[1]

    def cost_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        q = self.raw.get("q_weights", [1.0] * self.n_x)
        return np.diag(np.asarray(q, dtype=np.float64)), self.r_weight * np.eye(self.n_u)

    def build(self, dt: float = DEFAULT_DT, system_id: int = 0) -> LtiSystem:
        A, B = discretize(*self.continuous, dt)
        Q, R = self.cost_matrices()
        return LtiSystem(self.name, A, B, Q, R, dt=dt, id=system_id, base_name=self.name, variant=-1, ic_bound=self.ic_bound)


def _default_catalog_path():
    return resources.files("lqrformer").joinpath("data/catalog.json")


@lru_cache(maxsize=8)
def _load_catalog(path: str | None) -> tuple[CatalogEntry, ...]:
    text = Path(path).read_text() if path else _default_catalog_path().read_text()
    doc = json.loads(text)
    defaults = doc.get("defaults", {})
    entries = []
    for e in doc["systems"]:
        entries.append(
            CatalogEntry(
                name=e["name"],
                index=int(e["index"]),
                group=e["group"],
                kind=e["kind"],
                raw=e,
                r_weight=float(e.get("r_weight", defaults.get("r_weight", DEFAULT_R_WEIGHT))),
                ic_bound=float(e.get("ic_bound", defaults.get("ic_bound", 1.0))),
            )
        )
    return tuple(sorted(entries, key=lambda c: c.index))


def catalog(path: str | None = None) -> list[CatalogEntry]:
    """All catalog entries ordered by index (seen systems first)."""
    return list(_load_catalog(str(path) if path else None))


def catalog_version(path: str | None = None) -> int:
    text = Path(path).read_text() if path else _default_catalog_path().read_text()
    return int(json.loads(text)["version"])


def get_entry(name: str, path: str | None = None) -> CatalogEntry:
    for e in catalog(path):
        if e.name.lower() == name.lower():
            return e
    raise KeyError(f"no catalog system named {name!r}")


def select(which: str, path: str | None = None) -> list[CatalogEntry]:
    """``seen``, ``unseen``, ``all`` or a comma-separated list of names."""
    entries = catalog(path)
    key = which.strip().lower()
    if key == "all":
        return entries
    if key in ("seen", "unseen"):
        return [e for e in entries if e.group == key]
    return [get_entry(n.strip(), path) for n in which.split(",") if n.strip()]


# --------------------------------------------------------------------------
# variants


@dataclass(frozen=True)
class VariantSpec:
    base_name: str
    delta: float = 0.30
    seed: int = 0
    count: int = 20
    domain: str = "continuous"  # "continuous": perturb Ac, Bc; "discrete": perturb A, B
    max_retries: int = 100
    dt: float = DEFAULT_DT

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.domain not in ("continuous", "discrete"):
            raise ValueError(f"unknown perturbation domain {self.domain!r}")


def variant_rng(seed: int, base_name: str, k: int, attempt: int) -> np.random.Generator:
    """Counter-based stream for one (base, variant, attempt); independent of call order."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(base_name.encode()), int(k), int(attempt)))
    return np.random.Generator(np.random.Philox(ss))


def perturb(M: np.ndarray, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Scale every nonzero entry by an independent factor in ``[1 - delta, 1 + delta]``."""
    factors = rng.uniform(1.0 - delta, 1.0 + delta, size=M.shape)
    return np.where(M != 0.0, M * factors, 0.0)


def make_variants(spec: VariantSpec, catalog_path: str | None = None) -> list[LtiSystem]:
    entry = get_entry(spec.base_name, catalog_path)
    Ac, Bc = entry.continuous
    Q, R = entry.cost_matrices()
    A0, B0 = discretize(Ac, Bc, spec.dt)
    out = []
    for k in range(spec.count):
        for attempt in range(spec.max_retries):
            rng = variant_rng(spec.seed, entry.name, k, attempt)
            if spec.domain == "continuous":
                A, B = discretize(perturb(Ac, spec.delta, rng), perturb(Bc, spec.delta, rng), spec.dt)
            else:
                A, B = perturb(A0, spec.delta, rng), perturb(B0, spec.delta, rng)
            try:
                sys = LtiSystem(
                    f"{entry.name} #{k}", A, B, Q, R, dt=spec.dt, id=k,
                    base_name=entry.name, variant=k, ic_bound=entry.ic_bound,
                )
            except ValueError:
                continue
            out.append(sys)
            break
        else:
            raise GenerationError(f"{entry.name}: no valid variant {k} after {spec.max_retries} attempts")
    return out
