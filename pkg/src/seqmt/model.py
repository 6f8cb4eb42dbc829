"""Data-stream models, signal configurations, hypothesis families and LLR state.

Streams are indexed ``0..K-1``. A signal configuration is a bitset over stream
indices; its integer value is the canonical order used for every tie-break in
the package.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence, Union

import numpy as np

from ._jsonutil import field as jfield
from ._jsonutil import join
from .errors import ResourceError, ValidationError

MAX_ENUMERATION_K = 25
MAX_FAMILY_SIZE = 2**25


@dataclass(frozen=True)
class GaussianMeanShift:
    """``N(0, sigma^2)`` under the null versus ``N(mu, sigma^2)`` under the alternative."""

    mu: float
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise ValidationError("GaussianMeanShift: mu and sigma must be finite")
        if self.sigma <= 0:
            raise ValidationError(f"GaussianMeanShift: sigma must be > 0, got {self.sigma}")
        if self.mu == 0:
            raise ValidationError("GaussianMeanShift: mu must be nonzero")


@dataclass(frozen=True)
class DeterministicDrift:
    """Test model whose LLR increment is exactly ``d0`` under H0 and ``d1`` under H1."""

    d0: float
    d1: float

    def __post_init__(self) -> None:
        if not (self.d0 < 0 < self.d1):
            raise ValidationError(f"DeterministicDrift: need d0 < 0 < d1, got d0={self.d0}, d1={self.d1}")


StreamSpec = Union[GaussianMeanShift, DeterministicDrift]


def info_numbers(spec: StreamSpec) -> tuple[float, float]:
    """KL numbers ``(I0, I1)`` of a stream: ``KL(f0|f1)`` and ``KL(f1|f0)``."""
    if isinstance(spec, GaussianMeanShift):
        i = spec.mu**2 / (2.0 * spec.sigma**2)
        return i, i
    if isinstance(spec, DeterministicDrift):
        return -spec.d0, spec.d1
    raise ValidationError(f"unknown stream spec {spec!r}")


def llr_increment(spec: StreamSpec, x: float) -> float:
    """Single-observation ``log f1(x)/f0(x)``."""
    if not isinstance(spec, GaussianMeanShift):
        raise ValidationError("llr_increment: DeterministicDrift has no observation density")
    s2 = spec.sigma**2
    return (spec.mu / s2) * x - spec.mu**2 / (2.0 * s2)


def sample_llr_increment(spec: StreamSpec, under_alternative: bool, rng: np.random.Generator) -> float:
    if isinstance(spec, DeterministicDrift):
        return spec.d1 if under_alternative else spec.d0
    x = rng.normal(spec.mu if under_alternative else 0.0, spec.sigma)
    return llr_increment(spec, x)


# ---------------------------------------------------------------------------
# signal configurations


@dataclass(frozen=True, order=True)
class SignalConfig:
    """Subset of stream indices stored as a bitset (bit k set <=> stream k carries a signal)."""

    bits: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.bits, (int, np.integer)) or isinstance(self.bits, bool) or self.bits < 0:
            raise ValidationError(f"SignalConfig: bits must be a nonnegative int, got {self.bits!r}")
        object.__setattr__(self, "bits", int(self.bits))

    @classmethod
    def from_indices(cls, indices: Iterable[int]) -> "SignalConfig":
        bits = 0
        for k in indices:
            k = int(k)
            if k < 0:
                raise ValidationError(f"SignalConfig: negative stream index {k}")
            bits |= 1 << k
        return cls(bits)

    @property
    def indices(self) -> tuple[int, ...]:
        b, out, k = self.bits, [], 0
        while b:
            if b & 1:
                out.append(k)
            b >>= 1
            k += 1
        return tuple(out)

    def __len__(self) -> int:
        return self.bits.bit_count()

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, k: object) -> bool:
        return isinstance(k, (int, np.integer)) and k >= 0 and bool(self.bits >> int(k) & 1)

    def __or__(self, other: "SignalConfig") -> "SignalConfig":
        return SignalConfig(self.bits | other.bits)

    def __and__(self, other: "SignalConfig") -> "SignalConfig":
        return SignalConfig(self.bits & other.bits)

    def __sub__(self, other: "SignalConfig") -> "SignalConfig":
        return SignalConfig(self.bits & ~other.bits)

    def __xor__(self, other: "SignalConfig") -> "SignalConfig":
        return SignalConfig(self.bits ^ other.bits)

    def complement(self, K: int) -> "SignalConfig":
        return SignalConfig(((1 << K) - 1) & ~self.bits)

    def check(self, K: int) -> "SignalConfig":
        if self.bits >> K:
            raise ValidationError(f"SignalConfig {self} has streams outside 0..{K - 1}")
        return self

    def to_list(self) -> list[int]:
        return list(self.indices)

    def __repr__(self) -> str:
        return "{" + ", ".join(map(str, self.indices)) + "}"


def as_config(x: SignalConfig | int | Iterable[int]) -> SignalConfig:
    """Coerce a config, a raw bitmask int, or an iterable of indices."""
    if isinstance(x, SignalConfig):
        return x
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return SignalConfig(int(x))
    return SignalConfig.from_indices(x)


EMPTY = SignalConfig(0)


# ---------------------------------------------------------------------------
# hypothesis families


@dataclass(frozen=True)
class HypothesisFamily:
    """The admissible collection of signal subsets.

    Build with :meth:`all_subsets`, :meth:`fixed_size`, :meth:`bounded` or
    :meth:`explicit` rather than the raw constructor.
    """

    kind: str
    K: int
    m: int | None = None
    l: int | None = None
    u: int | None = None
    members: tuple[SignalConfig, ...] = ()

    def __post_init__(self) -> None:
        K = self.K
        if not isinstance(K, int) or K < 1:
            raise ValidationError(f"family: K must be an int >= 1, got {K!r}")
        if K > 62:
            raise ValidationError("family: K > 62 does not fit the 64-bit bitset representation")
        if self.kind == "all":
            pass
        elif self.kind == "fixed":
            if self.m is None or not 1 <= self.m < K:
                raise ValidationError(f"fixed-size family needs 1 <= m < K, got m={self.m}, K={K}")
        elif self.kind == "bounded":
            if self.l is None or self.u is None or not 0 <= self.l < self.u <= K:
                raise ValidationError(f"bounded family needs 0 <= l < u <= K, got l={self.l}, u={self.u}, K={K}")
        elif self.kind == "explicit":
            members = tuple(sorted({as_config(c).check(K) for c in self.members}))
            if not members:
                raise ValidationError("explicit family must be nonempty")
            object.__setattr__(self, "members", members)
        else:
            raise ValidationError(f"unknown family kind {self.kind!r}")

    @classmethod
    def all_subsets(cls, K: int) -> "HypothesisFamily":
        return cls("all", K)

    @classmethod
    def fixed_size(cls, K: int, m: int) -> "HypothesisFamily":
        return cls("fixed", K, m=m)

    @classmethod
    def bounded(cls, K: int, l: int, u: int) -> "HypothesisFamily":
        return cls("bounded", K, l=l, u=u)

    @classmethod
    def explicit(cls, K: int, members: Iterable[SignalConfig | Iterable[int]]) -> "HypothesisFamily":
        return cls("explicit", K, members=tuple(as_config(c) for c in members))

    def size(self) -> int:
        if self.kind == "all":
            return 2**self.K
        if self.kind == "fixed":
            return math.comb(self.K, self.m)
        if self.kind == "bounded":
            return sum(math.comb(self.K, j) for j in range(self.l, self.u + 1))
        return len(self.members)

    def __contains__(self, config: object) -> bool:
        c = as_config(config)
        if c.bits >> self.K:
            return False
        if self.kind == "all":
            return True
        if self.kind == "fixed":
            return len(c) == self.m
        if self.kind == "bounded":
            return self.l <= len(c) <= self.u
        return c in self.members

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "fixed":
            d["m"] = self.m
        elif self.kind == "bounded":
            d.update(l=self.l, u=self.u)
        elif self.kind == "explicit":
            d["members"] = [c.to_list() for c in self.members]
        return d

    @classmethod
    def from_dict(cls, d: dict, K: int, path: str = "family") -> "HypothesisFamily":
        kind = jfield(d, "kind", path, str)
        if kind == "all":
            return cls.all_subsets(K)
        if kind == "fixed":
            return cls.fixed_size(K, jfield(d, "m", path, int))
        if kind == "bounded":
            return cls.bounded(K, jfield(d, "l", path, int), jfield(d, "u", path, int))
        if kind == "explicit":
            raw = jfield(d, "members", path, list)
            return cls.explicit(K, [_indices(x, join(join(path, "members"), i)) for i, x in enumerate(raw)])
        raise ValidationError(f"{join(path, 'kind')}: unknown family kind {kind!r}")


def _indices(x, path: str) -> SignalConfig:
    if not isinstance(x, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in x):
        raise ValidationError(f"{path}: expected a list of stream indices")
    return SignalConfig.from_indices(x)


def family_enumerate(family: HypothesisFamily) -> list[SignalConfig]:
    """Members of the family in canonical (bitset integer) order."""
    return [SignalConfig(int(b)) for b in family_bits(family)]


def family_bits(family: HypothesisFamily) -> np.ndarray:
    """Members as a sorted ``int64`` array of bitmasks. Cached per family."""
    return _family_bits_cached(family).copy()


_BITS_CACHE: dict[HypothesisFamily, np.ndarray] = {}


def _family_bits_cached(family: HypothesisFamily) -> np.ndarray:
    hit = _BITS_CACHE.get(family)
    if hit is not None:
        return hit
    K = family.K
    if family.kind == "all":
        if K > MAX_ENUMERATION_K:
            raise ResourceError(f"refusing to enumerate all 2^{K} subsets (limit K <= {MAX_ENUMERATION_K})")
        bits = np.arange(2**K, dtype=np.int64)
    elif family.kind == "explicit":
        bits = np.array([c.bits for c in family.members], dtype=np.int64)
    else:
        if family.size() > MAX_FAMILY_SIZE:
            raise ResourceError(f"family has {family.size()} members (limit {MAX_FAMILY_SIZE})")
        sizes = [family.m] if family.kind == "fixed" else range(family.l, family.u + 1)
        out = [sum(1 << k for k in combo) for j in sizes for combo in itertools.combinations(range(K), j)]
        bits = np.array(sorted(out), dtype=np.int64)
    bits.setflags(write=False)
    if len(_BITS_CACHE) > 256:
        _BITS_CACHE.clear()
    _BITS_CACHE[family] = bits
    return bits


def membership(bits: np.ndarray | Sequence[int], K: int) -> np.ndarray:
    """Boolean matrix ``M[i, k] = stream k in config i``."""
    b = np.asarray(bits, dtype=np.int64)
    return ((b[..., None] >> np.arange(K, dtype=np.int64)) & 1).astype(bool)


def mask_to_bits(mask: np.ndarray) -> np.ndarray:
    """Collapse a boolean ``(..., K)`` array to ``int64`` bitmasks."""
    K = mask.shape[-1]
    weights = np.left_shift(np.int64(1), np.arange(K, dtype=np.int64))
    return (mask.astype(np.int64) * weights).sum(axis=-1)


# ---------------------------------------------------------------------------
# problem


@dataclass(frozen=True)
class Problem:
    K: int
    streams: tuple[StreamSpec, ...]
    family: HypothesisFamily

    def __post_init__(self) -> None:
        object.__setattr__(self, "streams", tuple(self.streams))
        if len(self.streams) != self.K:
            raise ValidationError(f"problem: {len(self.streams)} streams given for K={self.K}")
        if self.family.K != self.K:
            raise ValidationError(f"problem: family K={self.family.K} does not match K={self.K}")

    @classmethod
    def homogeneous_gaussian(cls, K: int, mu: float = 1.0, sigma: float = 1.0,
                             family: HypothesisFamily | None = None) -> "Problem":
        return cls(K, tuple(GaussianMeanShift(mu, sigma) for _ in range(K)), family or HypothesisFamily.all_subsets(K))

    @classmethod
    def gaussian(cls, mus: Sequence[float], sigmas: Sequence[float] | float = 1.0,
                 family: HypothesisFamily | None = None) -> "Problem":
        K = len(mus)
        sig = [sigmas] * K if np.isscalar(sigmas) else list(sigmas)
        return cls(K, tuple(GaussianMeanShift(float(m), float(s)) for m, s in zip(mus, sig)),
                   family or HypothesisFamily.all_subsets(K))

    @classmethod
    def deterministic(cls, K: int, d0: float = -0.5, d1: float = 0.5,
                      family: HypothesisFamily | None = None) -> "Problem":
        return cls(K, tuple(DeterministicDrift(d0, d1) for _ in range(K)), family or HypothesisFamily.all_subsets(K))

    def with_family(self, family: HypothesisFamily) -> "Problem":
        return Problem(self.K, self.streams, family)

    @cached_property
    def info(self) -> tuple[np.ndarray, np.ndarray]:
        """Arrays ``(I0, I1)`` of per-stream KL numbers."""
        pairs = [info_numbers(s) for s in self.streams]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    @property
    def all_gaussian(self) -> bool:
        return all(isinstance(s, GaussianMeanShift) for s in self.streams)

    @cached_property
    def _sampling_arrays(self):
        gauss = np.array([isinstance(s, GaussianMeanShift) for s in self.streams])
        mu = np.array([s.mu if isinstance(s, GaussianMeanShift) else 0.0 for s in self.streams])
        sigma = np.array([s.sigma if isinstance(s, GaussianMeanShift) else 0.0 for s in self.streams])
        coef = np.where(gauss, mu / np.where(gauss, sigma, 1.0) ** 2, 0.0)
        offset = np.where(gauss, -mu**2 / (2.0 * np.where(gauss, sigma, 1.0) ** 2), 0.0)
        d0 = np.array([s.d0 if isinstance(s, DeterministicDrift) else 0.0 for s in self.streams])
        d1 = np.array([s.d1 if isinstance(s, DeterministicDrift) else 0.0 for s in self.streams])
        return gauss, mu, sigma, coef, offset, d0, d1

    @cached_property
    def llr_variance(self) -> np.ndarray:
        """Per-stream variance of one LLR increment (same under both hypotheses)."""
        gauss, mu, sigma, *_ = self._sampling_arrays
        return np.where(gauss, mu**2 / np.where(gauss, sigma, 1.0) ** 2, 0.0)

    def sample_increments(self, truths: np.ndarray, steps: int, rng: np.random.Generator) -> np.ndarray:
        """Draw LLR increments of shape ``(n, steps, K)``; row i is generated under ``truths[i]``.

        Observations are drawn from the stream densities and mapped through the
        LLR, exactly as :func:`sample_llr_increment` does one at a time.
        """
        truths = np.asarray(truths, dtype=np.int64)
        alt = membership(truths, self.K)[:, None, :]
        gauss, mu, sigma, coef, offset, d0, d1 = self._sampling_arrays
        z = rng.standard_normal((truths.shape[0], steps, self.K))
        inc = coef * (mu * alt + sigma * z) + offset
        if not gauss.all():
            inc = np.where(gauss, inc, np.where(alt, d1, d0))
        return inc

    def configs(self) -> list[SignalConfig]:
        return family_enumerate(self.family)

    def to_dict(self) -> dict:
        streams = []
        for s in self.streams:
            if isinstance(s, GaussianMeanShift):
                streams.append({"kind": "gaussian", "mu": s.mu, "sigma": s.sigma})
            else:
                streams.append({"kind": "deterministic", "d0": s.d0, "d1": s.d1})
        return {"K": self.K, "streams": streams, "family": self.family.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, path: str = "problem") -> "Problem":
        K = jfield(d, "K", path, int)
        if K < 1:
            raise ValidationError(f"{join(path, 'K')}: must be >= 1")
        raw = jfield(d, "streams", path, list)
        streams = []
        for i, s in enumerate(raw):
            p = join(join(path, "streams"), i)
            kind = jfield(s, "kind", p, str)
            try:
                if kind == "gaussian":
                    streams.append(GaussianMeanShift(jfield(s, "mu", p, float), jfield(s, "sigma", p, float, 1.0)))
                elif kind == "deterministic":
                    streams.append(DeterministicDrift(jfield(s, "d0", p, float), jfield(s, "d1", p, float)))
                else:
                    raise ValidationError(f"{join(p, 'kind')}: unknown stream kind {kind!r}")
            except ValidationError as exc:
                if str(exc).startswith(p):
                    raise
                raise ValidationError(f"{p}: {exc}") from None
        family = HypothesisFamily.from_dict(jfield(d, "family", path, dict, {"kind": "all"}), K, join(path, "family"))
        return cls(K, tuple(streams), family)


# ---------------------------------------------------------------------------
# LLR state


@dataclass
class LlrState:
    t: int
    lam: np.ndarray = field(repr=False)

    @classmethod
    def zero(cls, K: int) -> "LlrState":
        return cls(0, np.zeros(K))

    def copy(self) -> "LlrState":
        return LlrState(self.t, self.lam.copy())


def advance(state: LlrState, increments: Sequence[float] | np.ndarray) -> LlrState:
    inc = np.asarray(increments, dtype=float)
    if inc.shape != state.lam.shape:
        raise ValidationError(f"advance: expected {state.lam.shape[0]} increments, got {inc.shape}")
    return LlrState(state.t + 1, state.lam + inc)
