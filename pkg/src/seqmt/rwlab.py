"""Boundary crossing of multidimensional random walks.

``T_b`` is the first ``n`` at which every coordinate of the walk has reached
``b``. The walk engine reuses the replication blocks of :mod:`seqmt.simulate`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from .divergence import _kl_to, _sign_matrix, critical_set, h_estimate, most_favorable
from .errors import NonUniqueError, ValidationError
from .metrics import LossSpec
from .model import Problem, SignalConfig, as_config, family_bits, membership
from .simulate import SimResult, simulate_paths

MEAN_TIE_TOL = 1e-9


@dataclass(frozen=True)
class GaussianVector:
    mean: tuple[float, ...]
    cov: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        mean = tuple(float(m) for m in self.mean)
        cov = np.asarray(self.cov, dtype=float)
        d = len(mean)
        if d < 1 or cov.shape != (d, d):
            raise ValidationError(f"GaussianVector: covariance must be {d}x{d}, got {cov.shape}")
        if not np.allclose(cov, cov.T):
            raise ValidationError("GaussianVector: covariance is not symmetric")
        w = np.linalg.eigvalsh(cov)
        if w.min() < -1e-8 * max(abs(w).max(), 1e-300):
            raise ValidationError("GaussianVector: covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", tuple(tuple(r) for r in cov))

    @classmethod
    def iid(cls, mean: Sequence[float], var: float = 1.0) -> "GaussianVector":
        d = len(mean)
        return cls(tuple(mean), tuple(tuple(var if i == j else 0.0 for j in range(d)) for i in range(d)))


@dataclass(frozen=True)
class Deterministic:
    mean: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))


@dataclass(frozen=True)
class FromProblem:
    """Coordinates ``log f_A - log f_G`` over every ``G`` that makes the most favorable decision wrong."""

    problem: Problem
    truth: SignalConfig
    loss: LossSpec

    def __post_init__(self) -> None:
        object.__setattr__(self, "truth", as_config(self.truth).check(self.problem.K))


IncrementModel = Union[GaussianVector, Deterministic, FromProblem]


@dataclass(frozen=True)
class WalkSpec:
    model: IncrementModel

    def __post_init__(self) -> None:
        if np.any(self.means <= 0):
            raise ValidationError(f"WalkSpec: all coordinate means must be positive, got {self.means.tolist()}")

    @cached_property
    def _from_problem(self):
        m = self.model
        mf = most_favorable(m.problem, m.loss, m.truth)
        if not mf.unique:
            raise NonUniqueError(f"WalkSpec: most favorable subset at {m.truth} is not unique")
        bits = family_bits(m.problem.family)
        wrong = m.loss.table(np.array([mf.maximizers[0].bits]), bits)[0] > 0
        G = bits[wrong]
        crit, _ = critical_set(m.problem, m.loss, m.truth)
        return G, _kl_to(m.problem, m.truth, G), crit

    @cached_property
    def means(self) -> np.ndarray:
        if isinstance(self.model, FromProblem):
            return self._from_problem[1]
        return np.asarray(self.model.mean, dtype=float)

    @property
    def d(self) -> int:
        return len(self.means)

    @property
    def mu1(self) -> float:
        return float(self.means.min())

    @property
    def r_star(self) -> int:
        m = self.means
        return int(np.count_nonzero(np.abs(m - m.min()) <= max(1e-12, MEAN_TIE_TOL * abs(m.min()))))

    def minimal_block_cov(self, n_mc: int = 100_000, seed: int = 0) -> np.ndarray:
        """Covariance of the increments of the coordinates with minimal mean."""
        m = self.means
        sel = np.abs(m - m.min()) <= max(1e-12, MEAN_TIE_TOL * abs(m.min()))
        model = self.model
        if isinstance(model, GaussianVector):
            return np.asarray(model.cov)[np.ix_(sel, sel)]
        if isinstance(model, Deterministic):
            return np.zeros((sel.sum(), sel.sum()))
        p = model.problem
        S = _sign_matrix(model.truth, [SignalConfig(int(g)) for g in self._from_problem[0][sel]], p.K)
        if p.all_gaussian:
            return (S * p.llr_variance) @ S.T
        inc = p.sample_increments(np.array([model.truth.bits]), n_mc, np.random.default_rng(seed))[0]
        return np.cov(inc @ S.T, rowvar=False).reshape(S.shape[0], S.shape[0])

    def sampler(self) -> "_WalkSampler":
        return _WalkSampler(self)


@dataclass(frozen=True)
class _WalkSampler:
    """Adapter exposing a walk through the ``K``/``sample_increments`` interface of :class:`Problem`."""

    walk: WalkSpec

    @property
    def K(self) -> int:
        return self.walk.d

    @cached_property
    def _root(self) -> np.ndarray:
        cov = np.asarray(self.walk.model.cov)
        w, V = np.linalg.eigh(cov)
        return V * np.sqrt(np.clip(w, 0.0, None))

    def sample_increments(self, truths: np.ndarray, steps: int, rng: np.random.Generator) -> np.ndarray:
        n = len(truths)
        model = self.walk.model
        if isinstance(model, Deterministic):
            return np.broadcast_to(self.walk.means, (n, steps, self.K)).copy()
        if isinstance(model, GaussianVector):
            z = rng.standard_normal((n, steps, self.K))
            return self.walk.means + z @ self._root.T
        p = model.problem
        G = self.walk._from_problem[0]
        a = membership(np.array([model.truth.bits]), p.K)[0].astype(float)
        diff = a[None, :] - membership(G, p.K).astype(float)
        inc = p.sample_increments(np.full(n, model.truth.bits, dtype=np.int64), steps, rng)
        return inc @ diff.T


@dataclass(frozen=True)
class _CrossAll:
    """Stop once every coordinate is at or above ``b``."""

    b: float

    def validate(self, K: int) -> None:
        pass

    def criterion(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        stop = lam.min(axis=-1) >= self.b
        return stop, np.zeros(stop.shape, dtype=np.int64)

    def forced(self, lam: np.ndarray) -> np.ndarray:
        return np.zeros(lam.shape[:-1], dtype=np.int64)

    def thresholds(self) -> dict:
        return {"b": self.b}


def default_walk_horizon(walk: WalkSpec, b: float) -> int:
    return int(math.ceil(50.0 * b / walk.mu1)) + 10


def simulate_T_b(walk: WalkSpec, b: float, reps: int, horizon: int | None = None, seed: int = 0,
                 workers: int = 1, key: Sequence[int] = ()) -> SimResult:
    if not b > 0:
        raise ValidationError(f"simulate_T_b: b must be positive, got {b}")
    horizon = horizon or default_walk_horizon(walk, b)
    batch = simulate_paths(_CrossAll(float(b)), walk.sampler(), SignalConfig(0), reps, horizon, seed,
                           key=key, workers=workers)
    T = batch.T.astype(float)
    se = float(T.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
    return SimResult(reps, float(T.mean()), se, {}, int(batch.truncated.sum()), int(seed),
                     rule="first_passage", thresholds=f"b={b:.10g}")


def h_rstar(sigma, n_mc: int = 1_000_000, rng=None) -> tuple[float, float]:
    """Expected maximum of a centered Gaussian vector with covariance ``sigma``."""
    return h_estimate(sigma, n_mc, rng)


def expansion_prediction(walk: WalkSpec, b: float, h: float) -> tuple[float, float]:
    """``b/mu1`` and, when several coordinates share the minimal mean, ``+ h sqrt(b) / mu1^{3/2}``."""
    mu1 = walk.mu1
    fo = b / mu1
    so = fo + (h * math.sqrt(b) / mu1**1.5 if walk.r_star >= 2 else 0.0)
    return fo, so


def residual_report(walk: WalkSpec, b_grid: Sequence[float], reps: int, seed: int = 0, h: float | None = None,
                    n_mc: int = 1_000_000, horizon_factor: float | None = None, workers: int = 1) -> list[dict]:
    """Simulated ``E T_b`` against both predictions along ``b_grid``; block stream keys are grid indices."""
    grid = [float(b) for b in b_grid]
    if any(b2 <= b1 for b1, b2 in zip(grid, grid[1:])):
        raise ValidationError("residual_report: b_grid must be strictly ascending")
    if h is None:
        h = h_rstar(walk.minimal_block_cov(), n_mc, np.random.default_rng([seed, 7]))[0] if walk.r_star >= 2 else 0.0
    rows = []
    for i, b in enumerate(grid):
        horizon = None if horizon_factor is None else int(math.ceil(horizon_factor * b / walk.mu1)) + 10
        res = simulate_T_b(walk, b, reps, horizon, seed, workers, key=(i,))
        fo, so = expansion_prediction(walk, b, h)
        rows.append({"b": b, "ess": res.ess_mean, "ess_se": res.ess_se, "fo": fo, "so": so,
                     "diff_fo": res.ess_mean - fo, "diff_so": res.ess_mean - so, "h": h,
                     "r_star": walk.r_star, "reps": reps, "truncated": res.truncated_count})
    return rows
