"""Conservative thresholds, Bayesian cost mappings and simulation-based threshold search."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

from ._jsonutil import field as jfield
from .errors import NumericError, ValidationError
from .model import HypothesisFamily, Problem
from .rules import Gap, Intersection, Leap, RuleSpec, SumIntersection
from .simulate import Event, max_error_over_family

CLASS_KINDS = ("gmr", "gfwer", "fdr", "kns", "bns")


@dataclass(frozen=True)
class ClassSpec:
    """An error-control class with its tolerances.

    ``gmr``: ``m0, alpha``; ``gfwer``: ``m1, m2, alpha, beta``; ``fdr``:
    ``alpha, beta``; ``kns``: ``m, alpha``; ``bns``: ``l, u, alpha, beta``.
    """

    kind: str
    alpha: float
    beta: float | None = None
    m0: int | None = None
    m1: int | None = None
    m2: int | None = None
    m: int | None = None
    l: int | None = None
    u: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in CLASS_KINDS:
            raise ValidationError(f"class: unknown kind {self.kind!r}")
        needs_beta = self.kind in ("gfwer", "fdr", "bns")
        for name, v in (("alpha", self.alpha), ("beta", self.beta)):
            if name == "beta" and not needs_beta:
                continue
            if v is None or not 0 < v <= 1:
                raise ValidationError(f"class {self.kind}: {name} must lie in (0, 1], got {v!r}")
        required = {"gmr": ("m0",), "gfwer": ("m1", "m2"), "kns": ("m",), "bns": ("l", "u"), "fdr": ()}[self.kind]
        for name in required:
            v = getattr(self, name)
            if not isinstance(v, int) or v < (0 if name == "l" else 1):
                raise ValidationError(f"class {self.kind}: {name} must be a positive int, got {v!r}")

    @classmethod
    def gmr(cls, m0: int, alpha: float) -> "ClassSpec":
        return cls("gmr", alpha, m0=m0)

    @classmethod
    def gfwer(cls, m1: int, m2: int, alpha: float, beta: float) -> "ClassSpec":
        return cls("gfwer", alpha, beta, m1=m1, m2=m2)

    @classmethod
    def fdr(cls, alpha: float, beta: float) -> "ClassSpec":
        return cls("fdr", alpha, beta)

    @classmethod
    def kns(cls, m: int, alpha: float) -> "ClassSpec":
        return cls("kns", alpha, m=m)

    @classmethod
    def bns(cls, l: int, u: int, alpha: float, beta: float) -> "ClassSpec":
        return cls("bns", alpha, beta, l=l, u=u)

    def validate(self, K: int) -> None:
        if self.kind == "gmr" and self.m0 > K:
            raise ValidationError(f"class gmr: m0={self.m0} exceeds K={K}")
        if self.kind == "gfwer" and self.m1 + self.m2 > K:
            raise ValidationError(f"class gfwer: m1 + m2 = {self.m1 + self.m2} exceeds K={K}")
        if self.kind == "kns" and not 1 <= self.m < K:
            raise ValidationError(f"class kns: need 1 <= m < K, got m={self.m}")
        if self.kind == "bns" and not 0 <= self.l < self.u <= K:
            raise ValidationError(f"class bns: need 0 <= l < u <= K, got l={self.l}, u={self.u}")

    def with_alpha(self, alpha: float, beta: float | None = None) -> "ClassSpec":
        d = asdict(self)
        d["alpha"] = alpha
        if beta is not None:
            d["beta"] = beta
        return ClassSpec(**d)

    def family(self, K: int) -> HypothesisFamily:
        if self.kind == "kns":
            return HypothesisFamily.fixed_size(K, self.m)
        if self.kind == "bns":
            return HypothesisFamily.bounded(K, self.l, self.u)
        return HypothesisFamily.all_subsets(K)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict, path: str = "class") -> "ClassSpec":
        kind = jfield(d, "kind", path, str)
        kw = {"kind": kind, "alpha": jfield(d, "alpha", path, float)}
        if "beta" in d:
            kw["beta"] = jfield(d, "beta", path, float)
        for name in ("m0", "m1", "m2", "m", "l", "u"):
            if name in d:
                kw[name] = jfield(d, name, path, int)
        try:
            return cls(**kw)
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class Thresholds:
    b: float
    a: float | None = None


def conservative_thresholds(spec: ClassSpec, K: int) -> Thresholds:
    """Closed-form thresholds guaranteeing the class constraint."""
    spec.validate(K)
    la = abs(math.log(spec.alpha))
    if spec.kind == "gmr":
        return Thresholds(la + math.log(math.comb(K, spec.m0)))
    if spec.kind == "gfwer":
        lb = abs(math.log(spec.beta))
        return Thresholds(la + math.log(2**spec.m1 * math.comb(K, spec.m1)),
                          lb + math.log(2**spec.m2 * math.comb(K, spec.m2)))
    if spec.kind == "fdr":
        return Thresholds(la + math.log(K), abs(math.log(spec.beta)) + math.log(K))
    if spec.kind == "kns":
        return Thresholds(la + math.log(spec.m * (K - spec.m)))
    raise ValidationError("conservative_thresholds: no closed-form threshold for the bounded-number class")


def cost_and_L(spec: ClassSpec, K: int, c_rate: float | None = None) -> tuple[float, float]:
    """Cost ``c`` and constant ``L`` tying the class to a Lorden problem.

    ``c_rate`` is the GFWER same-rate constant; it defaults to
    ``max(alpha/beta, beta/alpha)``.
    """
    spec.validate(K)
    a = spec.alpha
    if spec.kind == "gmr":
        n = math.comb(K, spec.m0)
        return 2.0**-K * a / n, 2.0**K * n
    if spec.kind == "gfwer":
        b = spec.beta
        n1 = 2**spec.m1 * math.comb(K, spec.m1)
        n2 = 2**spec.m2 * math.comb(K, spec.m2)
        rate = max(a / b, b / a) if c_rate is None else c_rate
        if rate <= 0:
            raise ValidationError(f"cost_and_L: c_rate must be positive, got {rate}")
        return 2.0**-K * min(b / n2, a / n1), (1 + rate) * 2.0**K * max(n1, n2)
    if spec.kind == "kns":
        n = math.comb(K, spec.m) * spec.m * (K - spec.m)
        return a / n, float(n)
    raise ValidationError(f"cost_and_L: no direct cost mapping for class {spec.kind}")


def default_rule(spec: ClassSpec, K: int, th: Thresholds | None = None) -> RuleSpec:
    th = th or conservative_thresholds(spec, K)
    if spec.kind == "gmr":
        return SumIntersection(th.b, spec.m0)
    if spec.kind == "gfwer":
        return Leap(th.a, th.b, spec.m1, spec.m2)
    if spec.kind == "fdr":
        return Intersection(th.a, th.b)
    if spec.kind == "kns":
        return Gap(th.b, spec.m)
    raise ValidationError("default_rule: the bounded-number class has no rule in this package")


def default_events(spec: ClassSpec) -> list[tuple[Event, float]]:
    """Events controlled by the class with their tolerance."""
    if spec.kind == "gmr":
        return [(Event("gmr", spec.m0), spec.alpha)]
    if spec.kind == "gfwer":
        return [(Event("gfwer_fp", spec.m1), spec.alpha), (Event("gfwer_fn", spec.m2), spec.beta)]
    if spec.kind == "fdr":
        return [(Event("fdp_mean"), spec.alpha), (Event("fnp_mean"), spec.beta)]
    if spec.kind == "kns":
        return [(Event("wrong_decision"), spec.alpha)]
    raise ValidationError("default_events: the bounded-number class is not supported")


def rule_factory(spec: ClassSpec, K: int) -> Callable[[float], RuleSpec]:
    """Rules indexed by the scalar ``b``; two-threshold rules keep the conservative ``a/b`` ratio."""
    cons = conservative_thresholds(spec, K)
    ratio = None if cons.a is None else cons.a / cons.b

    def make(b: float) -> RuleSpec:
        return default_rule(spec, K, Thresholds(b, None if ratio is None else ratio * b))

    return make


@dataclass
class CalibrationResult:
    b_star: float
    achieved: float
    se: float
    probes: list[dict] = field(default_factory=list)
    converged: bool = True
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"b_star": self.b_star, "achieved": self.achieved, "se": self.se, "probes": self.probes,
                "converged": self.converged, "meta": self.meta}


def nonconservative_search(spec: ClassSpec, problem: Problem, target: float | None = None, tol: float = 0.0,
                           reps: int = 10_000, horizon: int | None = None, seed: int = 0, use_is: bool = False,
                           factory: Callable[[float], RuleSpec] | None = None, event: Event | str | None = None,
                           b_lo: float = 0.1, b_hi: float | None = None, xtol: float = 1e-3, max_iter: int = 40,
                           truths=None, workers: int = 1) -> CalibrationResult:
    """Bisection for the threshold at which the max-over-family error meets ``target``.

    The error is assumed nonincreasing in ``b``. For the known-number class an
    unrestricted problem family is replaced by the fixed-size family. Each probe reuses ``seed``, so
    probes share random numbers as far as the paths allow. The search stops
    once ``|achieved - target| <= max(tol, 2 se)``; failing that, when the
    bracket is narrower than ``xtol`` it returns the upper end.
    """
    K = problem.K
    spec.validate(K)
    if spec.kind in ("kns", "bns") and problem.family.kind == "all":
        problem = problem.with_family(spec.family(K))
    ev, default_target = default_events(spec)[0]
    event = Event.parse(event) if event is not None else ev
    target = default_target if target is None else target
    if not 0 < target < 1:
        raise ValidationError(f"nonconservative_search: target must lie in (0, 1), got {target}")
    factory = factory or rule_factory(spec, K)
    b_hi = conservative_thresholds(spec, K).b if b_hi is None else b_hi
    if not 0 < b_lo < b_hi:
        raise ValidationError(f"nonconservative_search: need 0 < b_lo < b_hi, got [{b_lo}, {b_hi}]")
    probes: list[dict] = []

    def probe(b: float) -> tuple[float, float]:
        res = max_error_over_family(factory(b), problem, event, reps, horizon, seed, use_is=use_is,
                                    truths=truths, workers=workers)
        probes.append({"b": b, "estimate": res.max_estimate, "se": res.max_se, "argmax": res.argmax.to_list()})
        return res.max_estimate, res.max_se

    def close(est: float, se: float) -> bool:
        return abs(est - target) <= max(tol, 2.0 * se)

    meta = {"method": "bisection", "event": str(event), "target": target, "tol": tol, "xtol": xtol,
            "max_iter": max_iter, "reps": reps, "use_is": use_is, "seed": seed, "bracket": [b_lo, b_hi]}
    est_hi, se_hi = probe(b_hi)
    if close(est_hi, se_hi):
        return CalibrationResult(b_hi, est_hi, se_hi, probes, True, meta)
    if est_hi > target:
        raise NumericError(f"nonconservative_search: error {est_hi:.4g} (se {se_hi:.2g}) at the upper bracket "
                           f"b={b_hi:.6g} exceeds target {target:.4g}")
    est_lo, se_lo = probe(b_lo)
    if est_lo <= target or close(est_lo, se_lo):
        return CalibrationResult(b_lo, est_lo, se_lo, probes, close(est_lo, se_lo), meta)
    lo, hi, best = b_lo, b_hi, (b_hi, est_hi, se_hi)
    for _ in range(max_iter):
        if hi - lo < xtol:
            break
        mid = 0.5 * (lo + hi)
        est, se = probe(mid)
        if close(est, se):
            return CalibrationResult(mid, est, se, probes, True, meta)
        if est > target:
            lo = mid
        else:
            hi, best = mid, (mid, est, se)
    return CalibrationResult(best[0], best[1], best[2], probes, False, meta)
