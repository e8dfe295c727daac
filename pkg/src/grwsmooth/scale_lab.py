"""One-dimensional study of how far the random-walk loss spreads its minimizer.

A 1-D configuration is ``0 = z_1 <= z_2 <= ... <= z_T = R``. With the speed
weight fixed at one, the loss is

    L_v = 1/2 sum (z_{t+1} - z_t)^2
    L_a = -log( exp(-1/2 |a|^2) / sum_pi exp(-1/2 |a_pi|^2) )

where ``a`` are second differences and ``pi`` runs over every reordering that
keeps the first point in place. Everything here enumerates the reorderings
exactly, streaming them in chunks that share a fixed prefix so memory stays
bounded up to T = 12.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

MAX_T = 12
# chunks hold at most this many orderings (9! rows)
_CHUNK_FREE = 9
LOWER_BOUND_TOL = 1e-10
CSV_COLUMNS = ("T", "R_star", "L_star", "ratio", "bound_uniform", "lower_bound_ok")


@dataclass
class Config1D:
    z: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        if self.z.ndim != 1 or len(self.z) < 3:
            raise ValueError("a configuration needs at least 3 scalar points")
        if self.z[0] != 0.0:
            raise ValueError(f"first point must be 0, got {self.z[0]}")
        if np.any(np.diff(self.z) < 0):
            raise ValueError("configuration must be non-decreasing")

    @property
    def T(self) -> int:
        return len(self.z)

    @property
    def R(self) -> float:
        return float(self.z[-1])


@dataclass
class ScaleStudyRow:
    T: int
    R_star: float
    L_star: float
    ratio: float
    bound_uniform: float
    restarts: int
    lower_bound_ok: bool
    converged: int = 0
    z_star: np.ndarray = field(default=None, repr=False)

    def as_csv_row(self) -> dict:
        return {"T": self.T, "R_star": repr(self.R_star), "L_star": repr(self.L_star),
                "ratio": repr(self.ratio), "bound_uniform": repr(self.bound_uniform),
                "lower_bound_ok": str(self.lower_bound_ok).lower()}


# ---------------------------------------------------------------- enumeration


@lru_cache(maxsize=None)
def _free_perms(m: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(m))), dtype=np.int8).reshape(-1, m)


def _chunks(T: int):
    """Yield ``P×T`` index arrays covering every ordering with 0 kept first."""
    rest = list(range(1, T))
    fixed = max(0, len(rest) - _CHUNK_FREE)
    for prefix in itertools.permutations(rest, fixed):
        remaining = np.array([r for r in rest if r not in prefix], dtype=np.int8)
        tail = remaining[_free_perms(len(remaining))]
        head = np.broadcast_to(np.array((0,) + prefix, dtype=np.int8), (len(tail), fixed + 1))
        yield np.hstack([head, tail])


def _check_T(T: int) -> None:
    if T < 3:
        raise ValueError(f"need T >= 3, got {T}")
    if T > MAX_T:
        raise ValueError(f"T={T} needs {math.factorial(T - 1)} orderings; at most T={MAX_T} is supported")


def _loss_and_grad(z: np.ndarray, want_grad: bool = True):
    """``(L_a, L_v, dL/dz)`` by exact enumeration, streamed chunk by chunk."""
    T = len(z)
    _check_T(T)
    v = np.diff(z)
    L_v = 0.5 * float(v @ v)
    a_id = np.diff(z, 2)
    ell_id = -0.5 * float(a_id @ a_id)

    m = -np.inf      # running max of ell
    s = 0.0          # sum exp(ell - m)
    g = np.zeros(T)  # sum exp(ell - m) * d ell / dz
    for idx in _chunks(T):
        a = np.diff(z[idx], 2, axis=1)
        ell = -0.5 * np.einsum("ij,ij->i", a, a)
        cm = ell.max()
        if cm > m:
            scale = math.exp(m - cm) if np.isfinite(m) else 0.0
            s *= scale
            g *= scale
            m = cm
        w = np.exp(ell - m)
        s += float(w.sum())
        if want_grad:
            # d ell / d z_perm = -K^T a, written out for second differences
            dzp = np.zeros(idx.shape)
            wa = w[:, None] * a
            dzp[:, :-2] -= wa
            dzp[:, 1:-1] += 2 * wa
            dzp[:, 2:] -= wa
            g += np.bincount(idx.ravel(), weights=dzp.ravel(), minlength=T)
    L_a = float(m) + math.log(s) - ell_id
    if not want_grad:
        return L_a, L_v, None
    grad = g / s
    # identity term: -d ell_id / dz = K^T a_id
    grad[:-2] += a_id
    grad[1:-1] -= 2 * a_id
    grad[2:] += a_id
    # speed term
    grad[:-1] -= v
    grad[1:] += v
    return L_a, L_v, grad


def velocity_loss(cfg: Config1D) -> float:
    """``L_v`` alone; needs no enumeration, so any T works."""
    v = np.diff(cfg.z)
    return 0.5 * float(v @ v)


def loss_1d(cfg: Config1D) -> tuple[float, float, float]:
    """``(L_a, L_v, L)`` for a 1-D configuration."""
    L_a, L_v, _ = _loss_and_grad(cfg.z, want_grad=False)
    return L_a, L_v, L_a + L_v


def uniform_config(T: int, R: float) -> Config1D:
    if R < 0:
        raise ValueError(f"R must be non-negative, got {R}")
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    return Config1D(np.arange(T) * (R / (T - 1)))


def lower_bound(cfg: Config1D) -> float:
    return cfg.R ** 2 / (2 * (cfg.T - 1))


def check_lower_bound(cfg: Config1D, tol: float = LOWER_BOUND_TOL) -> bool:
    return loss_1d(cfg)[2] >= lower_bound(cfg) - tol


def random_config(T: int, rng: np.random.Generator, scale: float = 3.0) -> Config1D:
    """Monotone configuration with exponential gaps of random overall scale."""
    gaps = rng.exponential(rng.uniform(0.01, scale), size=T - 1)
    return Config1D(np.concatenate([[0.0], np.cumsum(gaps)]))


# ---------------------------------------------------------------- minimization


def _softplus(u):
    return np.logaddexp(0.0, u)


def config_from_params(u: np.ndarray) -> Config1D:
    return Config1D(np.concatenate([[0.0], np.cumsum(_softplus(u))]))


def _objective(u: np.ndarray):
    z = np.concatenate([[0.0], np.cumsum(_softplus(u))])
    L_a, L_v, gz = _loss_and_grad(z)
    # z_t = sum_{j < t} softplus(u_j)  =>  dL/du_j = sigmoid(u_j) * sum_{t > j} dL/dz_t
    tail = np.cumsum(gz[::-1])[::-1][1:]
    return L_a + L_v, expit(u) * tail


@dataclass
class MinimizeResult:
    config: Config1D
    R_star: float
    L_star: float
    converged: int
    restarts: int
    losses: list


def _restart_rng(seed: int, T: int, restart: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, T, restart]))


def minimize_config(T: int, restarts: int = 20, steps: int = 5000, seed: int = 0,
                    tol: float = 1e-10) -> MinimizeResult:
    """Best of ``restarts`` quasi-Newton runs over softplus gap parameters.

    Each run stops once the per-step loss change falls below ``tol`` (relative
    to ``max(|L|, 1)``) or after ``steps`` iterations; runs that hit the step
    budget count as not converged but still compete for the minimum.
    """
    _check_T(T)
    if restarts < 1:
        raise ValueError("need at least one restart")
    best = None
    converged = 0
    losses = []
    for r in range(restarts):
        rng = _restart_rng(seed, T, r)
        gaps = rng.uniform(0.2, 2.0, size=T - 1)
        u0 = np.log(np.expm1(gaps))
        res = minimize(_objective, u0, jac=True, method="L-BFGS-B",
                       options={"maxiter": steps, "ftol": tol, "gtol": 1e-9})
        converged += int(res.success)
        losses.append(float(res.fun))
        if best is None or res.fun < best.fun:
            best = res
    cfg = config_from_params(best.x)
    return MinimizeResult(cfg, cfg.R, float(best.fun), converged, restarts, losses)


def scaling_ratio(R: float, T: int) -> float:
    return R / (T * math.sqrt(math.log(T)))


def scaling_study(T_min: int = 3, T_max: int = 10, restarts: int = 20, steps: int = 5000,
                  seed: int = 0, progress=None) -> list[ScaleStudyRow]:
    if not 3 <= T_min <= T_max <= MAX_T:
        raise ValueError(f"need 3 <= T_min <= T_max <= {MAX_T}")
    rows = []
    for T in range(T_min, T_max + 1):
        res = minimize_config(T, restarts, steps, seed)
        bound = loss_1d(uniform_config(T, T - 1))[2]
        row = ScaleStudyRow(
            T=T, R_star=res.R_star, L_star=res.L_star,
            ratio=scaling_ratio(res.R_star, T), bound_uniform=bound,
            restarts=restarts, lower_bound_ok=check_lower_bound(res.config),
            converged=res.converged, z_star=res.config.z)
        rows.append(row)
        if progress:
            progress(row)
    return rows


def write_study_csv(rows, fh) -> None:
    w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\r\n")
    w.writeheader()
    for row in rows:
        w.writerow(row.as_csv_row())
