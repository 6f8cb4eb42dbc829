"""KL-divergence machinery: most favorable subsets, critical sets, the covariance
of the centered log-likelihood-ratio vector and its Gaussian-max constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import itertools
import math

import numpy as np

from .errors import NonUniqueError, ResourceError, ValidationError
from .metrics import GMRLoss, LossSpec, check_condition_15, loss_matrix, loss_to_dict
from .model import Problem, SignalConfig, as_config, family_bits, membership

REL_TOL = 1e-9
ABS_TOL = 1e-12
NEAR_TIE_TOL = 1e-6
EIG_TOL = 1e-8
MAX_CRITICAL = 20_000


def _tied(x, ref: float, rel: float = REL_TOL) -> np.ndarray:
    return np.abs(np.asarray(x) - ref) <= max(ABS_TOL, rel * abs(ref))


def _kl_to(problem: Problem, A: SignalConfig, bits: np.ndarray) -> np.ndarray:
    """``KL(f_A | f_C)`` for every bitmask ``C`` in ``bits``."""
    I0, I1 = problem.info
    a = membership(np.array([A.bits]), problem.K)[0]
    c = membership(bits, problem.K)
    return (a & ~c) @ I1 + (~a & c) @ I0


def kl_configs(problem: Problem, A, C) -> float:
    A, C = as_config(A).check(problem.K), as_config(C).check(problem.K)
    return float(_kl_to(problem, A, np.array([C.bits]))[0])


def _kl_rows(problem: Problem, W: LossSpec, A: SignalConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Family bits, the loss matrix and ``KL_{A,D}`` for every decision D (``inf`` if H_D is empty)."""
    bits = family_bits(problem.family)
    L = loss_matrix(W, problem.family)
    kl = _kl_to(problem, A, bits)
    per_d = np.where(L > 0, kl[None, :], np.inf).min(axis=1)
    return bits, L, per_d


def _gmr_all(problem: Problem, W: LossSpec) -> bool:
    return isinstance(W, GMRLoss) and problem.family.kind == "all"


def _flip_costs(problem: Problem, A: SignalConfig) -> np.ndarray:
    """KL cost of flipping each stream away from ``A``."""
    I0, I1 = problem.info
    return np.where(membership(np.array([A.bits]), problem.K)[0], I1, I0)


def _gmr_kl_A_D(problem: Problem, m0: int, A: SignalConfig, D: SignalConfig) -> float:
    # the nearest C with |C ^ D| >= m0 flips the cheapest streams outside A ^ D
    e = len(A ^ D)
    if e >= m0:
        return 0.0
    w = _flip_costs(problem, A)
    outside = ~membership(np.array([(A ^ D).bits]), problem.K)[0]
    return float(np.sort(w[outside])[: m0 - e].sum())


def _gmr_structure(problem: Problem, m0: int, A: SignalConfig) -> tuple["MostFavorable", list[SignalConfig]]:
    """Closed form over all subsets: D = A is the unique maximizer with value the
    sum of the ``m0`` cheapest flips; the runner-up drops the ``m0``-th flip."""
    w = _flip_costs(problem, A)
    order = np.argsort(w, kind="stable")
    ws = w[order]
    kl_star = float(ws[:m0].sum())
    runner = float(ws[: m0 - 1].sum())
    near = bool(_tied(runner, kl_star, NEAR_TIE_TOL))
    mf = MostFavorable(kl_star, (A,), True, near)
    # flips strictly cheaper than the m0-th are forced; the rest come from its tie class
    pivot = ws[m0 - 1]
    tie = _tied(w, pivot)
    forced = [int(k) for k in np.flatnonzero((w < pivot) & ~tie)]
    pool = [int(k) for k in np.flatnonzero(tie)]
    need = m0 - len(forced)
    if math.comb(len(pool), need) > MAX_CRITICAL:
        raise ResourceError(f"critical set has {math.comb(len(pool), need)} members (limit {MAX_CRITICAL})")
    crit = []
    for extra in itertools.combinations(pool, need):
        X = SignalConfig.from_indices(forced + list(extra))
        crit.append(A ^ X)
    crit.sort(key=lambda c: c.bits)
    return mf, crit


def kl_A_D(problem: Problem, W: LossSpec, A, D) -> float:
    """Minimum KL from ``f_A`` to the configurations under which ``D`` is wrong."""
    A, D = as_config(A).check(problem.K), as_config(D).check(problem.K)
    if D not in problem.family:
        raise ValidationError(f"kl_A_D: decision {D} not in family")
    if _gmr_all(problem, W):
        W.validate(problem.K)
        return _gmr_kl_A_D(problem, W.m0, A, D)
    bits, _, per_d = _kl_rows(problem, W, A)
    value = per_d[np.searchsorted(bits, D.bits)]
    if not np.isfinite(value):
        raise ValidationError(f"kl_A_D: decision {D} has an empty unfavorable set")
    return float(value)


@dataclass(frozen=True)
class MostFavorable:
    kl_star: float
    maximizers: tuple[SignalConfig, ...]
    unique: bool
    near_tie: bool

    def __iter__(self):
        return iter((self.kl_star, self.maximizers, self.unique))


def most_favorable(problem: Problem, W: LossSpec, A) -> MostFavorable:
    """Maximize ``KL_{A,D}`` over decisions D.

    Ties are declared at relative tolerance ``REL_TOL``; ``near_tie`` flags a
    runner-up within ``NEAR_TIE_TOL`` that was nonetheless treated as distinct.
    GMR losses over the unrestricted family use a closed form, so large ``K``
    is fine; other losses enumerate the family.
    """
    A = as_config(A).check(problem.K)
    if _gmr_all(problem, W):
        W.validate(problem.K)
        return _gmr_structure(problem, W.m0, A)[0]
    return _most_favorable_enum(problem, W, A)


def _most_favorable_enum(problem: Problem, W: LossSpec, A: SignalConfig) -> MostFavorable:
    if not check_condition_15(W, problem.family):
        raise ValidationError("most_favorable: some decision has an empty unfavorable set")
    bits, _, per_d = _kl_rows(problem, W, A)
    kl_star = float(per_d.max())
    tied = _tied(per_d, kl_star)
    near = _tied(per_d, kl_star, NEAR_TIE_TOL) & ~tied
    maxi = tuple(SignalConfig(int(b)) for b in bits[tied])
    return MostFavorable(kl_star, maxi, len(maxi) == 1, bool(near.any()))


def critical_set(problem: Problem, W: LossSpec, A) -> tuple[list[SignalConfig], int]:
    """Wrong configurations for the most favorable decision that attain ``KL_{A,*}``."""
    A = as_config(A).check(problem.K)
    if _gmr_all(problem, W):
        W.validate(problem.K)
        crit = _gmr_structure(problem, W.m0, A)[1]
        return crit, len(crit)
    mf = _most_favorable_enum(problem, W, A)
    if not mf.unique:
        raise NonUniqueError(f"critical_set: most favorable subset at {A} is not unique: {list(mf.maximizers)}")
    return _critical_enum(problem, W, A, mf)


def _critical_enum(problem: Problem, W: LossSpec, A: SignalConfig, mf: MostFavorable) -> tuple[list[SignalConfig], int]:
    bits = family_bits(problem.family)
    d = mf.maximizers[0]
    row = W.table(np.array([d.bits]), bits)[0]
    kl = _kl_to(problem, A, bits)
    sel = (row > 0) & _tied(kl, mf.kl_star)
    crit = [SignalConfig(int(b)) for b in bits[sel]]
    return crit, len(crit)


def _sign_matrix(A: SignalConfig, crit: list[SignalConfig], K: int) -> np.ndarray:
    a = membership(np.array([A.bits]), K)[0]
    c = membership(np.array([x.bits for x in crit]), K)
    return (a & ~c).astype(float) - (~a & c).astype(float)


def sigma_matrix(problem: Problem, W: LossSpec, A, mode: str = "analytic", n_mc: int = 100_000,
                 rng: np.random.Generator | int | None = None, return_se: bool = False):
    """Covariance under ``P_A`` of the centered vector of one-step LLR differences
    ``log f_A - log f_C`` over the critical set.

    ``mode="analytic"`` uses the per-stream LLR variance ``mu^2/sigma^2``
    (Gaussian streams only); ``mode="montecarlo"`` samples ``n_mc`` single
    observation vectors. With ``return_se`` the entrywise standard errors are
    returned as a second array (zeros in analytic mode).
    """
    A = as_config(A)
    crit, _ = critical_set(problem, W, A)
    kl_star = kl_configs(problem, A, crit[0])
    S = _sign_matrix(A, crit, problem.K)
    if mode == "analytic":
        if not problem.all_gaussian:
            raise ValidationError("sigma_matrix: analytic mode needs all-Gaussian streams")
        sig = (S * problem.llr_variance) @ S.T
        se = np.zeros_like(sig)
    elif mode == "montecarlo":
        rng = np.random.default_rng(rng)
        inc = problem.sample_increments(np.array([A.bits]), n_mc, rng)[0]
        R = inc @ S.T - kl_star
        R = R - R.mean(axis=0)
        prod = R[:, :, None] * R[:, None, :]
        sig = prod.sum(axis=0) / (n_mc - 1)
        se = prod.std(axis=0, ddof=1) / np.sqrt(n_mc)
    else:
        raise ValidationError(f"sigma_matrix: unknown mode {mode!r}")
    return (sig, se) if return_se else sig


def h_estimate(sigma, n_mc: int = 1_000_000, rng: np.random.Generator | int | None = None) -> tuple[float, float]:
    """Monte Carlo ``E max_j Y_j`` for ``Y ~ N(0, sigma)`` with its standard error.

    Sampling goes through a symmetric eigendecomposition so rank-deficient
    matrices are fine. ``r == 1`` returns ``(0.0, 0.0)`` without sampling.
    """
    sig = np.atleast_2d(np.asarray(sigma, dtype=float))
    r = sig.shape[0]
    if sig.shape != (r, r):
        raise ValidationError(f"h_estimate: sigma must be square, got {sig.shape}")
    scale = max(float(np.abs(sig).max()), 1e-300)
    if not np.allclose(sig, sig.T, rtol=0.0, atol=1e-10 * scale):
        raise ValidationError("h_estimate: sigma is not symmetric")
    if r == 1:
        if sig[0, 0] < -EIG_TOL * scale:
            raise ValidationError("h_estimate: negative variance")
        return 0.0, 0.0
    if n_mc < 1000:
        raise ValidationError("h_estimate: n_mc must be >= 1000")
    w, V = np.linalg.eigh(0.5 * (sig + sig.T))
    if w.min() < -EIG_TOL * max(abs(w).max(), 1e-300):
        raise ValidationError(f"h_estimate: sigma is indefinite (min eigenvalue {w.min():.3g})")
    root = V * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(rng)
    chunk = max(1, min(n_mc, 2**22 // r))
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_mc:
        n = min(chunk, n_mc - done)
        m = (rng.standard_normal((n, r)) @ root.T).max(axis=1)
        total += m.sum()
        total_sq += (m * m).sum()
        done += n
    mean = total / n_mc
    var = max(total_sq / n_mc - mean * mean, 0.0) * n_mc / (n_mc - 1)
    return float(mean), float(np.sqrt(var / n_mc))


@dataclass
class DivergenceReport:
    A: SignalConfig
    kl_star: float
    d_star: SignalConfig
    unique: bool
    maximizers: list[SignalConfig]
    critical_set: list[SignalConfig]
    r: int
    sigma: np.ndarray
    h: float | None
    h_se: float
    near_tie: bool = False
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "A": self.A.to_list(),
            "kl_star": self.kl_star,
            "d_star": self.d_star.to_list(),
            "unique": self.unique,
            "maximizers": [c.to_list() for c in self.maximizers],
            "critical_set": [c.to_list() for c in self.critical_set],
            "r": self.r,
            "sigma": np.asarray(self.sigma).tolist(),
            "h": self.h,
            "h_se": self.h_se,
            "near_tie": self.near_tie,
            "meta": self.meta,
        }


def analyze(problem: Problem, W: LossSpec, A, sigma_mode: str = "analytic", n_mc: int = 1_000_000,
            seed: int | None = 0) -> DivergenceReport:
    """Full divergence report at truth ``A``.

    For a non-unique most favorable subset the critical set is undefined: the
    report carries ``r = 0``, an empty ``sigma`` and ``h = None``.
    """
    A = as_config(A).check(problem.K)
    mf = most_favorable(problem, W, A)
    meta = {"rel_tol": REL_TOL, "abs_tol": ABS_TOL, "near_tie_tol": NEAR_TIE_TOL,
            "sigma_mode": sigma_mode, "n_mc": n_mc, "seed": seed, "loss": loss_to_dict(W)}
    if not mf.unique:
        return DivergenceReport(A, mf.kl_star, mf.maximizers[0], False, list(mf.maximizers), [], 0,
                                np.zeros((0, 0)), None, 0.0, mf.near_tie, meta)
    crit, r = critical_set(problem, W, A)
    mode = sigma_mode
    if mode == "analytic" and not problem.all_gaussian:
        mode = "montecarlo"
        meta["sigma_mode"] = mode
    rng = np.random.default_rng(seed)
    sig = sigma_matrix(problem, W, A, mode=mode, n_mc=n_mc, rng=rng)
    h, h_se = h_estimate(sig, n_mc=max(n_mc, 1000), rng=rng)
    return DivergenceReport(A, mf.kl_star, mf.maximizers[0], True, list(mf.maximizers), crit, r,
                            sig, h, h_se, mf.near_tie, meta)
