"""Stopping and decision rules.

Every rule exposes a vectorized ``criterion(lam)`` over cumulative LLR arrays of
shape ``(..., K)``: it returns a boolean stop mask and the ``int64`` decision
bitmask that would be announced if stopping there. ``forced(lam)`` gives the
decision used when a run is cut off at the horizon. :class:`Policy` wraps a
rule for step-by-step use on a single path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Union

import numpy as np

from ._jsonutil import field as jfield
from .errors import ValidationError
from .metrics import LossSpec, loss_from_dict, loss_matrix, loss_to_dict
from .model import HypothesisFamily, LlrState, Problem, SignalConfig, advance, as_config, family_bits, mask_to_bits, membership

MAX_POSTERIOR_FAMILY = 2**15


def _positive(name: str, **vals: float) -> None:
    for k, v in vals.items():
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ValidationError(f"{name}: {k} must be a finite positive number, got {v!r}")


def _sign_bits(lam: np.ndarray) -> np.ndarray:
    return mask_to_bits(lam > 0)


def _bit_of(idx: np.ndarray) -> np.ndarray:
    return np.left_shift(np.int64(1), idx.astype(np.int64))


@dataclass(frozen=True)
class SumIntersection:
    """Stop once the ``m0`` smallest absolute LLRs sum to at least ``b``; decide the positive LLRs."""

    b: float
    m0: int = 1

    def __post_init__(self) -> None:
        _positive("SumIntersection", b=self.b)
        if self.m0 < 1:
            raise ValidationError(f"SumIntersection: m0 must be >= 1, got {self.m0}")

    def validate(self, K: int) -> None:
        if self.m0 > K:
            raise ValidationError(f"SumIntersection: m0={self.m0} exceeds K={K}")

    def criterion(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = np.abs(lam)
        m0 = self.m0
        small = np.partition(a, m0 - 1, axis=-1)[..., :m0] if m0 < a.shape[-1] else a
        return small.sum(axis=-1) >= self.b, _sign_bits(lam)

    def forced(self, lam: np.ndarray) -> np.ndarray:
        return _sign_bits(lam)

    def thresholds(self) -> dict:
        return {"b": self.b}


@dataclass(frozen=True)
class Intersection:
    """Stop once every LLR has left ``(-a, b)``; decide the positive LLRs."""

    a: float
    b: float

    def __post_init__(self) -> None:
        _positive("Intersection", a=self.a, b=self.b)

    def validate(self, K: int) -> None:
        pass

    def criterion(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = (lam >= self.b) | (lam <= -self.a)
        return out.all(axis=-1), _sign_bits(lam)

    def forced(self, lam: np.ndarray) -> np.ndarray:
        return _sign_bits(lam)

    def thresholds(self) -> dict:
        return {"a": self.a, "b": self.b}


@dataclass(frozen=True)
class Leap:
    """Leap rule for generalized familywise error control with parameters ``(m1, m2)``.

    Positive LLRs and absolute nonpositive LLRs are each sorted ascending and
    padded with ``+inf``. Criterion ``hat_i`` (i < m1) may flip the ``i``
    weakest nonpositive streams into the decision; criterion ``check_i``
    (1 <= i < m2) may drop the ``i`` weakest positive streams. Simultaneous
    criteria contribute the union of their decisions.
    """

    a: float
    b: float
    m1: int = 1
    m2: int = 1

    def __post_init__(self) -> None:
        _positive("Leap", a=self.a, b=self.b)
        if self.m1 < 1 or self.m2 < 1:
            raise ValidationError(f"Leap: m1, m2 must be >= 1, got ({self.m1}, {self.m2})")

    def validate(self, K: int) -> None:
        if self.m1 + self.m2 > K:
            raise ValidationError(f"Leap: m1 + m2 = {self.m1 + self.m2} exceeds K={K}")

    def criterion(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pos = lam > 0
        hat_idx = np.argsort(np.where(pos, lam, np.inf), axis=-1, kind="stable")
        hat = np.take_along_axis(np.where(pos, lam, np.inf), hat_idx, axis=-1)
        chk_idx = np.argsort(np.where(pos, np.inf, -lam), axis=-1, kind="stable")
        chk = np.take_along_axis(np.where(pos, np.inf, -lam), chk_idx, axis=-1)
        base = mask_to_bits(pos)
        # cumulative bitmask of the first i existing entries of each ordering
        hat_bits = np.cumsum(np.where(np.isfinite(hat), _bit_of(hat_idx), 0), axis=-1)
        chk_bits = np.cumsum(np.where(np.isfinite(chk), _bit_of(chk_idx), 0), axis=-1)
        m1, m2 = self.m1, self.m2
        stop = np.zeros(lam.shape[:-1], dtype=bool)
        dec = np.zeros(lam.shape[:-1], dtype=np.int64)
        for i in range(m1):
            fire = (hat[..., : m1 - i].sum(axis=-1) >= self.b) & (chk[..., i : i + m2].sum(axis=-1) >= self.a)
            d = base | chk_bits[..., i - 1] if i > 0 else base
            stop |= fire
            dec |= np.where(fire, d, 0)
        for i in range(1, m2):
            fire = (hat[..., i : i + m1].sum(axis=-1) >= self.b) & (chk[..., : m2 - i].sum(axis=-1) >= self.a)
            d = base & ~hat_bits[..., i - 1]
            stop |= fire
            dec |= np.where(fire, d, 0)
        return stop, dec

    def forced(self, lam: np.ndarray) -> np.ndarray:
        return _sign_bits(lam)

    def thresholds(self) -> dict:
        return {"a": self.a, "b": self.b}


def _top_m(lam: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-lam, axis=-1, kind="stable")
    s = np.take_along_axis(lam, order, axis=-1)
    bits = _bit_of(order[..., :m]).sum(axis=-1)
    return s, bits


@dataclass(frozen=True)
class Gap:
    """Stop once the m-th and (m+1)-th largest LLRs are ``b`` apart; decide the top ``m`` streams."""

    b: float
    m: int

    def __post_init__(self) -> None:
        _positive("Gap", b=self.b)

    def validate(self, K: int) -> None:
        if not 1 <= self.m < K:
            raise ValidationError(f"Gap: need 1 <= m < K, got m={self.m}, K={K}")

    def criterion(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s, bits = _top_m(lam, self.m)
        return s[..., self.m - 1] - s[..., self.m] >= self.b, bits

    def forced(self, lam: np.ndarray) -> np.ndarray:
        return _top_m(lam, self.m)[1]

    def thresholds(self) -> dict:
        return {"b": self.b}


class _PosteriorRule:
    """Shared machinery for rules built on per-configuration log-likelihoods."""

    family: HypothesisFamily
    W: LossSpec

    def _check_family(self) -> None:
        if self.family.size() > MAX_POSTERIOR_FAMILY:
            raise ValidationError(f"{type(self).__name__}: family of size {self.family.size()} exceeds {MAX_POSTERIOR_FAMILY}")
        self.W.validate(self.family.K)

    def validate(self, K: int) -> None:
        if K != self.family.K:
            raise ValidationError(f"{type(self).__name__}: family K={self.family.K} does not match K={K}")

    @cached_property
    def _bits(self) -> np.ndarray:
        return family_bits(self.family)

    @cached_property
    def _member(self) -> np.ndarray:
        return membership(self._bits, self.family.K).astype(float)

    @cached_property
    def _loss(self) -> np.ndarray:
        return loss_matrix(self.W, self.family)

    def log_lik(self, lam: np.ndarray) -> np.ndarray:
        """Log-likelihood of each family member relative to the all-null configuration."""
        return lam @ self._member.T

    def risk(self, lam: np.ndarray) -> np.ndarray:
        """Posterior expected loss of each decision under a uniform prior on the family."""
        L = self.log_lik(lam)
        L = L - L.max(axis=-1, keepdims=True)
        p = np.exp(L)
        p /= p.sum(axis=-1, keepdims=True)
        return p @ self._loss.T

    def forced(self, lam: np.ndarray) -> np.ndarray:
        return self._bits[np.argmin(self.risk(lam), axis=-1)]


@dataclass(frozen=True, eq=True)
class Lorden(_PosteriorRule):
    """Stop once the smallest posterior expected loss drops strictly below ``c``."""

    c: float
    W: LossSpec
    family: HypothesisFamily

    def __post_init__(self) -> None:
        _positive("Lorden", c=self.c)
        self._check_family()

    def criterion(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r = self.risk(lam)
        j = np.argmin(r, axis=-1)
        best = np.take_along_axis(r, j[..., None], axis=-1)[..., 0]
        return best < self.c, self._bits[j]

    def thresholds(self) -> dict:
        return {"c": self.c}

    def __hash__(self) -> int:
        return hash((self.c, self.W, self.family))


@dataclass(frozen=True, eq=True)
class TildeMsprt(_PosteriorRule):
    """Auxiliary rule: stop once some ``(B, D)`` has ``L_B - max_{G wrong for D} L_G > log(1/c)``.

    The announced decision is ``D`` from the first qualifying pair in
    canonical ``(B, D)`` order. ``restrict_to`` limits the test to one pair.
    """

    c: float
    W: LossSpec
    family: HypothesisFamily
    restrict_to: tuple[SignalConfig, SignalConfig] | None = None

    def __post_init__(self) -> None:
        _positive("TildeMsprt", c=self.c)
        self._check_family()
        if self.restrict_to is not None:
            B, D = (as_config(x) for x in self.restrict_to)
            for x in (B, D):
                if x not in self.family:
                    raise ValidationError(f"TildeMsprt: restricted config {x} not in family")
            object.__setattr__(self, "restrict_to", (B, D))
        if not np.all((self._loss > 0).any(axis=1)):
            raise ValidationError("TildeMsprt: some decision has an empty unfavorable set")

    @property
    def log_inv_c(self) -> float:
        return math.log(1.0 / self.c)

    def criterion(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        L = self.log_lik(lam)
        wrong = self._loss > 0
        thr = self.log_inv_c
        if self.restrict_to is not None:
            B, D = self.restrict_to
            ib = int(np.searchsorted(self._bits, B.bits))
            idd = int(np.searchsorted(self._bits, D.bits))
            mx = np.where(wrong[idd], L, -np.inf).max(axis=-1)
            stop = L[..., ib] - mx > thr
            return stop, np.full(stop.shape, D.bits, dtype=np.int64)
        n = len(self._bits)
        # max over each unfavorable set, one decision at a time to bound memory
        maxH = np.empty(L.shape, dtype=float)
        for j in range(n):
            maxH[..., j] = np.where(wrong[j], L, -np.inf).max(axis=-1)
        best_gap = L - maxH.min(axis=-1, keepdims=True)
        okB = best_gap > thr
        stop = okB.any(axis=-1)
        ib = np.argmax(okB, axis=-1)
        LB = np.take_along_axis(L, ib[..., None], axis=-1)
        jd = np.argmax(LB - maxH > thr, axis=-1)
        return stop, self._bits[jd]

    def thresholds(self) -> dict:
        return {"c": self.c}

    def __hash__(self) -> int:
        return hash((self.c, self.W, self.family, self.restrict_to))


RuleSpec = Union[SumIntersection, Intersection, Leap, Gap, Lorden, TildeMsprt]

_KIND = {SumIntersection: "sum_intersection", Intersection: "intersection", Leap: "leap", Gap: "gap",
         Lorden: "lorden", TildeMsprt: "tilde"}


def rule_name(rule: RuleSpec) -> str:
    return _KIND[type(rule)]


def thresholds_str(rule: RuleSpec) -> str:
    return ";".join(f"{k}={v:.10g}" for k, v in rule.thresholds().items())


def rule_to_dict(rule: RuleSpec) -> dict:
    d = {"kind": rule_name(rule), **rule.thresholds()}
    if isinstance(rule, SumIntersection):
        d["m0"] = rule.m0
    elif isinstance(rule, Leap):
        d.update(m1=rule.m1, m2=rule.m2)
    elif isinstance(rule, Gap):
        d["m"] = rule.m
    elif not isinstance(rule, Intersection):
        d["loss"] = loss_to_dict(rule.W)
        d["family"] = rule.family.to_dict()
        if isinstance(rule, TildeMsprt) and rule.restrict_to is not None:
            d["restrict_to"] = [x.to_list() for x in rule.restrict_to]
    return d


def rule_from_dict(d: dict, K: int, path: str = "rule", family: HypothesisFamily | None = None) -> RuleSpec:
    """Parse rule JSON. Posterior rules default to ``family`` when the JSON omits one."""
    kind = jfield(d, "kind", path, str)
    try:
        if kind == "sum_intersection":
            rule = SumIntersection(jfield(d, "b", path, float), jfield(d, "m0", path, int, 1))
        elif kind == "intersection":
            rule = Intersection(jfield(d, "a", path, float), jfield(d, "b", path, float))
        elif kind == "leap":
            rule = Leap(jfield(d, "a", path, float), jfield(d, "b", path, float),
                        jfield(d, "m1", path, int, 1), jfield(d, "m2", path, int, 1))
        elif kind == "gap":
            rule = Gap(jfield(d, "b", path, float), jfield(d, "m", path, int))
        elif kind in ("lorden", "tilde"):
            W = loss_from_dict(jfield(d, "loss", path, dict), f"{path}.loss")
            if "family" in d:
                fam = HypothesisFamily.from_dict(d["family"], K, f"{path}.family")
            else:
                fam = family or HypothesisFamily.all_subsets(K)
            c = jfield(d, "c", path, float)
            if kind == "lorden":
                rule = Lorden(c, W, fam)
            else:
                rt = d.get("restrict_to")
                pair = None if rt is None else (SignalConfig.from_indices(rt[0]), SignalConfig.from_indices(rt[1]))
                rule = TildeMsprt(c, W, fam, pair)
        else:
            raise ValidationError(f"{path}.kind: unknown rule kind {kind!r}")
    except ValidationError as exc:
        if str(exc).startswith(path):
            raise
        raise ValidationError(f"{path}: {exc}") from None
    rule.validate(K)
    return rule


# ---------------------------------------------------------------------------
# single-path interface


@dataclass(frozen=True)
class PolicyOutcome:
    stopped: bool
    decision: SignalConfig | None = None

    @property
    def status(self) -> str:
        return "stop" if self.stopped else "continue"


@dataclass
class Policy:
    rule: RuleSpec
    K: int
    state: LlrState = field(init=False)
    done: bool = field(init=False, default=False)

    def __post_init__(self) -> None:
        self.rule.validate(self.K)
        self.state = LlrState.zero(self.K)

    def step(self, increments) -> PolicyOutcome:
        if self.done:
            raise ValidationError("Policy.step: policy has already stopped")
        self.state = advance(self.state, increments)
        stop, dec = self.rule.criterion(self.state.lam[None, :])
        if stop[0]:
            self.done = True
            return PolicyOutcome(True, SignalConfig(int(dec[0])))
        return PolicyOutcome(False)

    def forced_decision(self) -> SignalConfig:
        return SignalConfig(int(self.rule.forced(self.state.lam[None, :])[0]))


class RunResult(NamedTuple):
    T: int
    D: SignalConfig
    truncated: bool
    final_state: LlrState


def run_to_stop(rule: RuleSpec | Policy, problem: Problem, truth, horizon: int,
                rng: np.random.Generator | int | None = None) -> RunResult:
    """Feed increments sampled under ``truth`` until the rule stops or ``horizon`` is reached."""
    if horizon < 1:
        raise ValidationError(f"run_to_stop: horizon must be >= 1, got {horizon}")
    policy = rule if isinstance(rule, Policy) else Policy(rule, problem.K)
    truth = as_config(truth).check(problem.K)
    rng = np.random.default_rng(rng)
    chunk = 64
    while policy.state.t < horizon:
        n = min(chunk, horizon - policy.state.t)
        inc = problem.sample_increments(np.array([truth.bits]), n, rng)[0]
        for row in inc:
            out = policy.step(row)
            if out.stopped:
                return RunResult(policy.state.t, out.decision, False, policy.state)
        chunk *= 2
    return RunResult(policy.state.t, policy.forced_decision(), True, policy.state)


def first_stop(rule: RuleSpec, lam_paths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stopping times (1-based, 0 if never) and decisions on precomputed LLR paths of shape ``(n, t, K)``."""
    stop, dec = rule.criterion(np.asarray(lam_paths, dtype=float))
    hit = stop.any(axis=1)
    first = np.argmax(stop, axis=1)
    T = np.where(hit, first + 1, 0)
    D = np.where(hit, np.take_along_axis(dec, first[:, None], axis=1)[:, 0], -1)
    return T, D
