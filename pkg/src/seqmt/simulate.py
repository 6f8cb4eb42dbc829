"""Monte Carlo estimation of expected sample size and error metrics.

Replications are grouped into fixed-size blocks. Block ``j`` of a run draws
from ``SeedSequence(seed, spawn_key=(*key, j))``, so results depend only on
``(seed, key, reps)`` and never on how blocks are spread over workers. Blocks
are reduced in index order.
"""
from __future__ import annotations

import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .divergence import _kl_to, _tied, critical_set
from .errors import NumericError, ResourceError, ValidationError
from .metrics import GMRLoss
from .model import Problem, SignalConfig, as_config, family_bits, membership
from .rules import RuleSpec, rule_name, thresholds_str

BLOCK_SIZE = 2048
MAX_FAMILY_TABLE = 4096
TRUNCATION_WARN = 1e-3
_CELL_BUDGET = 2**22


# ---------------------------------------------------------------------------
# events


def _popcount(x: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(x, dtype=np.int64)).astype(np.int64)


@dataclass(frozen=True)
class Event:
    """A per-replication error functional of (decision, truth)."""

    kind: str
    param: int | None = None

    _PROB = ("gmr", "gfwer_fp", "gfwer_fn", "wrong_decision")
    _RATIO = ("fdp_mean", "fnp_mean")

    def __post_init__(self) -> None:
        if self.kind not in self._PROB + self._RATIO:
            raise ValidationError(f"unknown metric {self.kind!r}; expected one of {', '.join(self._PROB + self._RATIO)}")
        needs = self.kind in ("gmr", "gfwer_fp", "gfwer_fn")
        if needs and (self.param is None or self.param < 1):
            raise ValidationError(f"metric {self.kind} needs a positive integer parameter, e.g. {self.kind}(1)")
        if not needs and self.param is not None:
            raise ValidationError(f"metric {self.kind} takes no parameter")

    @classmethod
    def parse(cls, text: str | "Event") -> "Event":
        if isinstance(text, Event):
            return text
        m = re.fullmatch(r"\s*([a-z_]+)\s*(?:\(\s*(\d+)\s*\))?\s*", text)
        if not m:
            raise ValidationError(f"cannot parse metric {text!r}")
        return cls(m.group(1), None if m.group(2) is None else int(m.group(2)))

    @property
    def is_probability(self) -> bool:
        return self.kind in self._PROB

    def __str__(self) -> str:
        return self.kind if self.param is None else f"{self.kind}({self.param})"

    def values(self, D: np.ndarray, A: np.ndarray, K: int) -> np.ndarray:
        D = np.asarray(D, dtype=np.int64)
        A = np.asarray(A, dtype=np.int64)
        if self.kind == "gmr":
            return (_popcount(D ^ A) >= self.param).astype(float)
        if self.kind == "gfwer_fp":
            return (_popcount(D & ~A) >= self.param).astype(float)
        if self.kind == "gfwer_fn":
            return (_popcount(A & ~D) >= self.param).astype(float)
        if self.kind == "wrong_decision":
            return (D != A).astype(float)
        if self.kind == "fdp_mean":
            return _popcount(D & ~A) / np.maximum(_popcount(D), 1)
        return _popcount(A & ~D) / np.maximum(K - _popcount(D), 1)


# ---------------------------------------------------------------------------
# proposals


@dataclass(frozen=True)
class ISProposal:
    """Mixture of ``P_C`` over component configurations with normalized weights."""

    configs: tuple[SignalConfig, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        cfgs = tuple(as_config(c) for c in self.configs)
        if not cfgs or len(set(cfgs)) != len(cfgs):
            raise ValidationError("ISProposal: components must be nonempty and distinct")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(cfgs),) or np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValidationError("ISProposal: need one positive finite weight per component")
        object.__setattr__(self, "configs", cfgs)
        object.__setattr__(self, "weights", tuple(float(x) for x in w / w.sum()))

    @classmethod
    def uniform(cls, configs: Sequence) -> "ISProposal":
        return cls(tuple(configs), tuple(1.0 for _ in configs))

    @property
    def components(self) -> list[tuple[SignalConfig, float]]:
        return list(zip(self.configs, self.weights))

    def to_dict(self) -> dict:
        return {"components": [{"config": c.to_list(), "weight": w} for c, w in self.components]}


def default_proposal(problem: Problem, truth, event: Event | str) -> ISProposal:
    """Uniform mixture over the family members nearest in KL to ``truth`` among
    those whose announcement as the decision would trigger ``event``.

    For GMR this is exactly the critical set at ``truth``.
    """
    event = Event.parse(event)
    truth = as_config(truth).check(problem.K)
    if event.kind == "gmr" and problem.family.kind == "all":
        return ISProposal.uniform(critical_set(problem, GMRLoss(event.param), truth)[0])
    bits = family_bits(problem.family)
    hit = event.values(bits, np.full(bits.shape, truth.bits), problem.K) > 0
    if not hit.any():
        raise ValidationError(f"default_proposal: no family member triggers {event} under truth {truth}")
    kl = _kl_to(problem, truth, bits[hit])
    near = bits[hit][_tied(kl, float(kl.min()))]
    return ISProposal.uniform([SignalConfig(int(b)) for b in near])


# ---------------------------------------------------------------------------
# engine


@dataclass
class PathBatch:
    """Per-replication outcomes in replication order."""

    T: np.ndarray
    D: np.ndarray
    truncated: np.ndarray
    truth: np.ndarray
    log_w: np.ndarray | None = None

    @classmethod
    def concat(cls, parts: list["PathBatch"]) -> "PathBatch":
        lw = None if parts[0].log_w is None else np.concatenate([p.log_w for p in parts])
        return cls(np.concatenate([p.T for p in parts]), np.concatenate([p.D for p in parts]),
                   np.concatenate([p.truncated for p in parts]), np.concatenate([p.truth for p in parts]), lw)


def _width(rule: RuleSpec, K: int) -> int:
    fam = getattr(rule, "family", None)
    return K if fam is None else max(K, fam.size())


def run_paths(rule: RuleSpec, problem: Problem, sample_bits: np.ndarray, horizon: int,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Simulate one path per entry of ``sample_bits`` (the generating configuration).

    Returns stopping times, decisions, truncation flags and the LLR vector at
    the stopping time.
    """
    n, K = len(sample_bits), problem.K
    T = np.full(n, horizon, dtype=np.int64)
    D = np.zeros(n, dtype=np.int64)
    trunc = np.zeros(n, dtype=bool)
    lam_T = np.zeros((n, K))
    active = np.arange(n)
    lam = np.zeros((n, K))
    t = 0
    chunk = 16
    width = _width(rule, K)
    while active.size and t < horizon:
        steps = max(1, min(chunk, horizon - t, _CELL_BUDGET // max(active.size * width, 1)))
        inc = problem.sample_increments(sample_bits[active], steps, rng)
        path = lam[active, None, :] + np.cumsum(inc, axis=1)
        stop, dec = rule.criterion(path)
        hit = stop.any(axis=1)
        first = np.argmax(stop, axis=1)
        idx = active[hit]
        T[idx] = t + first[hit] + 1
        D[idx] = dec[hit, first[hit]]
        lam_T[idx] = path[hit, first[hit]]
        lam[active] = path[:, -1]
        active = active[~hit]
        t += steps
        chunk = min(chunk * 2, 4096)
    if active.size:
        trunc[active] = True
        lam_T[active] = lam[active]
        D[active] = rule.forced(lam[active])
    return T, D, trunc, lam_T


def _block_rng(seed: int, key: tuple[int, ...], block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(*key, block)))


def _run_block(args) -> PathBatch:
    rule, problem, truth_bits, horizon, seed, key, block, n, proposal = args
    rng = _block_rng(seed, key, block)
    truths = np.full(n, truth_bits, dtype=np.int64)
    if proposal is None:
        T, D, trunc, _ = run_paths(rule, problem, truths, horizon, rng)
        return PathBatch(T, D, trunc, truths)
    comp_bits = np.array([c.bits for c in proposal.configs], dtype=np.int64)
    logq = np.log(np.asarray(proposal.weights))
    pick = rng.choice(len(comp_bits), size=n, p=np.asarray(proposal.weights))
    T, D, trunc, lam_T = run_paths(rule, problem, comp_bits[pick], horizon, rng)
    M = membership(comp_bits, problem.K).astype(float)
    a = membership(np.array([truth_bits]), problem.K)[0].astype(float)
    with np.errstate(over="ignore", invalid="ignore"):
        log_w = lam_T @ a - logsumexp(logq[None, :] + lam_T @ M.T, axis=1)
    if not np.all(np.isfinite(log_w)):
        bad = int(np.flatnonzero(~np.isfinite(log_w))[0])
        raise NumericError(f"importance weight is not finite in block {block}, replication {bad} "
                           f"(T={T[bad]}, lambda={lam_T[bad].tolist()})")
    return PathBatch(T, D, trunc, truths, log_w)


def simulate_paths(rule: RuleSpec, problem: Problem, truth, reps: int, horizon: int, seed: int,
                   key: Sequence[int] = (), proposal: ISProposal | None = None, workers: int = 1) -> PathBatch:
    """Run ``reps`` replications under ``truth`` (or under ``proposal`` with likelihood-ratio weights)."""
    if reps < 1:
        raise ValidationError(f"reps must be >= 1, got {reps}")
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    rule.validate(problem.K)
    truth = as_config(truth).check(problem.K)
    if proposal is not None:
        for c in proposal.configs:
            c.check(problem.K)
    key = tuple(int(k) for k in key)
    sizes = [BLOCK_SIZE] * (reps // BLOCK_SIZE) + ([reps % BLOCK_SIZE] if reps % BLOCK_SIZE else [])
    tasks = [(rule, problem, truth.bits, horizon, int(seed), key, j, n, proposal) for j, n in enumerate(sizes)]
    if workers <= 1 or len(tasks) == 1:
        parts = [_run_block(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block, tasks))
    return PathBatch.concat(parts)


def default_horizon(rule: RuleSpec, problem: Problem) -> int:
    """Fifty times a crude mean-time scale ``threshold / min information``."""
    I0, I1 = problem.info
    th = rule.thresholds()
    scale = math.log(1.0 / th["c"]) if "c" in th else max(th.values())
    return int(math.ceil(50.0 * max(scale, 1.0) / float(min(I0.min(), I1.min())))) + 10


# ---------------------------------------------------------------------------
# estimators


def wilson_interval(hits: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = hits / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if hits == 0 else max(0.0, centre - half)
    hi = 1.0 if hits == n else min(1.0, centre + half)
    return lo, hi


@dataclass
class ErrorEstimate:
    event: str
    estimate: float
    se: float
    reps: int
    hits: int
    truncated: int
    ci: tuple[float, float] | None = None
    method: str = "mc"

    def __iter__(self):
        return iter((self.estimate, self.se))


@dataclass
class SimResult:
    reps: int
    ess_mean: float
    ess_se: float
    metric_estimates: dict[str, tuple[float, float]]
    truncated_count: int
    seed: int
    truth: SignalConfig = field(default_factory=SignalConfig)
    rule: str = ""
    thresholds: str = ""
    intervals: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def unreliable(self) -> bool:
        return self.truncated_count > TRUNCATION_WARN * self.reps


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = x.size
    m = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return m, se


def _crude(event: Event, batch: PathBatch, K: int) -> ErrorEstimate:
    v = event.values(batch.D, batch.truth, K)
    m, se = _mean_se(v)
    hits = int(np.count_nonzero(v))
    ci = wilson_interval(hits, v.size) if event.is_probability else None
    return ErrorEstimate(str(event), m, se, v.size, hits, int(batch.truncated.sum()), ci, "mc")


def estimate_ess(rule: RuleSpec, problem: Problem, truth, reps: int, horizon: int | None = None, seed: int = 0,
                 events: Sequence[str | Event] = (), workers: int = 1, key: Sequence[int] = ()) -> SimResult:
    """Mean stopping time under ``P_truth`` plus crude estimates of any requested events."""
    horizon = horizon or default_horizon(rule, problem)
    truth = as_config(truth)
    batch = simulate_paths(rule, problem, truth, reps, horizon, seed, key=key, workers=workers)
    ess, ess_se = _mean_se(batch.T.astype(float))
    metrics, intervals = {}, {}
    for e in events:
        est = _crude(Event.parse(e), batch, problem.K)
        metrics[est.event] = (est.estimate, est.se)
        if est.ci is not None:
            intervals[est.event] = est.ci
    return SimResult(reps, ess, ess_se, metrics, int(batch.truncated.sum()), int(seed), truth,
                     rule_name(rule), thresholds_str(rule), intervals)


def estimate_error_mc(rule: RuleSpec, problem: Problem, truth, event: str | Event, reps: int,
                      horizon: int | None = None, seed: int = 0, workers: int = 1,
                      key: Sequence[int] = ()) -> ErrorEstimate:
    horizon = horizon or default_horizon(rule, problem)
    event = Event.parse(event)
    batch = simulate_paths(rule, problem, truth, reps, horizon, seed, key=key, workers=workers)
    return _crude(event, batch, problem.K)


def estimate_error_is(rule: RuleSpec, problem: Problem, truth, event: str | Event,
                      proposal: ISProposal | None, reps: int, horizon: int | None = None, seed: int = 0,
                      workers: int = 1, key: Sequence[int] = ()) -> ErrorEstimate:
    """Importance-sampling estimate of ``P_truth(event)`` with balance-heuristic mixture weights."""
    horizon = horizon or default_horizon(rule, problem)
    event = Event.parse(event)
    if not event.is_probability:
        raise ValidationError(f"importance sampling supports probability events only, got {event}")
    truth = as_config(truth).check(problem.K)
    proposal = proposal or default_proposal(problem, truth, event)
    if not problem.all_gaussian and any(c != truth for c in proposal.configs):
        raise ValidationError("importance sampling needs densities; deterministic streams only admit the "
                              "proposal concentrated on the truth")
    batch = simulate_paths(rule, problem, truth, reps, horizon, seed, key=key, proposal=proposal, workers=workers)
    v = event.values(batch.D, batch.truth, problem.K) * np.exp(batch.log_w)
    m, se = _mean_se(v)
    return ErrorEstimate(str(event), m, se, reps, int(np.count_nonzero(v)), int(batch.truncated.sum()),
                         (max(0.0, m - 1.96 * se), m + 1.96 * se), "is")


@dataclass
class FamilyError:
    max_estimate: float
    max_se: float
    argmax: SignalConfig
    table: list[tuple[SignalConfig, ErrorEstimate]]

    def __iter__(self):
        return iter((self.max_estimate, self.argmax, self.table))


def max_error_over_family(rule: RuleSpec, problem: Problem, event: str | Event, reps: int,
                          horizon: int | None = None, seed: int = 0, use_is: bool = False,
                          truths: Sequence | None = None, workers: int = 1, allow_large: bool = False,
                          proposal_for: Callable[[SignalConfig], ISProposal] | None = None) -> FamilyError:
    """Evaluate ``event`` under every truth in the family (or the given ``truths``) and take the max.

    Each truth gets its own random sub-stream keyed by its bitmask, so the
    per-truth estimates do not depend on which other truths are evaluated.
    """
    event = Event.parse(event)
    horizon = horizon or default_horizon(rule, problem)
    if truths is None:
        if problem.family.size() > MAX_FAMILY_TABLE and not allow_large:
            raise ResourceError(f"max_error_over_family: family has {problem.family.size()} members "
                                f"(limit {MAX_FAMILY_TABLE}); pass truths= or allow_large=True")
        cfgs = [SignalConfig(int(b)) for b in family_bits(problem.family)]
    else:
        cfgs = [as_config(t).check(problem.K) for t in truths]
        if not cfgs:
            raise ValidationError("max_error_over_family: empty truths list")
    table = []
    for A in cfgs:
        key = (A.bits,)
        if use_is:
            prop = proposal_for(A) if proposal_for else default_proposal(problem, A, event)
            est = estimate_error_is(rule, problem, A, event, prop, reps, horizon, seed, workers, key)
        else:
            est = estimate_error_mc(rule, problem, A, event, reps, horizon, seed, workers, key)
        table.append((A, est))
    i = max(range(len(table)), key=lambda j: (table[j][1].estimate, -j))
    return FamilyError(table[i][1].estimate, table[i][1].se, table[i][0], table)
