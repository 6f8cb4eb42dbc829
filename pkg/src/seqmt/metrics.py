"""Loss functions W(D|A), per-class error events and loss-matrix extremes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from ._jsonutil import field as jfield
from ._jsonutil import join
from .errors import ResourceError, ValidationError
from .model import HypothesisFamily, SignalConfig, as_config, family_bits

MAX_LOSS_MATRIX = 4096


def _popcount(x: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(x, dtype=np.int64)).astype(np.int64)


@dataclass(frozen=True)
class GMRLoss:
    """1 when the decision differs from the truth in at least ``m0`` streams."""

    m0: int

    def __post_init__(self) -> None:
        if not isinstance(self.m0, int) or self.m0 < 1:
            raise ValidationError(f"GMR loss: m0 must be an int >= 1, got {self.m0!r}")

    def validate(self, K: int) -> None:
        if self.m0 > K:
            raise ValidationError(f"GMR loss: m0={self.m0} exceeds K={K}")

    def table(self, d_bits: np.ndarray, a_bits: np.ndarray) -> np.ndarray:
        diff = _popcount(np.asarray(d_bits)[:, None] ^ np.asarray(a_bits)[None, :])
        return (diff >= self.m0).astype(float)


@dataclass(frozen=True)
class GFWERLoss:
    """1 when the decision has at least ``m1`` false positives or ``m2`` false negatives."""

    m1: int
    m2: int

    def __post_init__(self) -> None:
        if self.m1 < 1 or self.m2 < 1:
            raise ValidationError(f"GFWER loss: need m1, m2 >= 1, got ({self.m1}, {self.m2})")

    def validate(self, K: int) -> None:
        # m1 + m2 <= K is a constraint of the error-control class, not of the loss
        if max(self.m1, self.m2) > K:
            raise ValidationError(f"GFWER loss: m1, m2 must not exceed K={K}, got ({self.m1}, {self.m2})")

    def table(self, d_bits: np.ndarray, a_bits: np.ndarray) -> np.ndarray:
        d = np.asarray(d_bits)[:, None]
        a = np.asarray(a_bits)[None, :]
        fp = _popcount(d & ~a) >= self.m1
        fn = _popcount(a & ~d) >= self.m2
        return (fp | fn).astype(float)


@dataclass(frozen=True)
class ZeroOneLoss:
    def validate(self, K: int) -> None:
        pass

    def table(self, d_bits: np.ndarray, a_bits: np.ndarray) -> np.ndarray:
        return (np.asarray(d_bits)[:, None] != np.asarray(a_bits)[None, :]).astype(float)


@dataclass(frozen=True)
class MatrixLoss:
    """Arbitrary loss table over an explicit list of configurations.

    ``table[i][j]`` is ``W(members[i] | members[j])``: rows index the decision,
    columns the true configuration.
    """

    members: tuple[SignalConfig, ...]
    table_: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        members = tuple(as_config(c) for c in self.members)
        n = len(members)
        if n == 0 or len(set(members)) != n:
            raise ValidationError("matrix loss: members must be nonempty and distinct")
        arr = np.asarray(self.table_, dtype=float)
        if arr.shape != (n, n):
            raise ValidationError(f"matrix loss: table must be {n}x{n}, got {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValidationError("matrix loss: entries must be finite and >= 0")
        if np.any(np.diag(arr) != 0):
            raise ValidationError("matrix loss: diagonal entries W(A|A) must be 0")
        order = np.argsort([c.bits for c in members], kind="stable")
        members = tuple(members[i] for i in order)
        arr = arr[np.ix_(order, order)]
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "table_", tuple(tuple(float(v) for v in row) for row in arr))

    def validate(self, K: int) -> None:
        for c in self.members:
            c.check(K)

    def _index(self, bits: np.ndarray) -> np.ndarray:
        keys = np.array([c.bits for c in self.members], dtype=np.int64)
        bits = np.asarray(bits, dtype=np.int64)
        idx = np.searchsorted(keys, bits)
        idx_c = np.minimum(idx, len(keys) - 1)
        if np.any(keys[idx_c] != bits):
            bad = bits[keys[idx_c] != bits][0]
            raise ValidationError(f"matrix loss: configuration {SignalConfig(int(bad))} is not a member")
        return idx_c

    def table(self, d_bits: np.ndarray, a_bits: np.ndarray) -> np.ndarray:
        arr = np.asarray(self.table_)
        return arr[np.ix_(self._index(d_bits), self._index(a_bits))]


LossSpec = Union[GMRLoss, GFWERLoss, ZeroOneLoss, MatrixLoss]


def loss_value(W: LossSpec, D: SignalConfig, A: SignalConfig) -> float:
    D, A = as_config(D), as_config(A)
    return float(W.table(np.array([D.bits]), np.array([A.bits]))[0, 0])


def loss_matrix(W: LossSpec, family: HypothesisFamily) -> np.ndarray:
    """``L[i, j] = W(D_i | A_j)`` over the family in canonical order."""
    W.validate(family.K)
    if family.size() > MAX_LOSS_MATRIX:
        raise ResourceError(f"loss_matrix: family has {family.size()} members (limit {MAX_LOSS_MATRIX})")
    bits = family_bits(family)
    return W.table(bits, bits)


def gmr_event(D: SignalConfig, A: SignalConfig, m0: int) -> bool:
    return len(as_config(D) ^ as_config(A)) >= m0


def gfwer_fp_event(D: SignalConfig, A: SignalConfig, m1: int) -> bool:
    return len(as_config(D) - as_config(A)) >= m1


def gfwer_fn_event(D: SignalConfig, A: SignalConfig, m2: int) -> bool:
    return len(as_config(A) - as_config(D)) >= m2


def fdp(D: SignalConfig, A: SignalConfig, K: int) -> float:
    D, A = as_config(D), as_config(A)
    return len(D - A) / max(len(D), 1)


def fnp(D: SignalConfig, A: SignalConfig, K: int) -> float:
    D, A = as_config(D), as_config(A)
    return len(A - D) / max(K - len(D), 1)


def loss_extremes(W: LossSpec, family: HypothesisFamily) -> tuple[float, float]:
    """Smallest nonzero entry and largest entry of the loss over ``family x family``."""
    L = loss_matrix(W, family)
    pos = L[L > 0]
    if pos.size == 0:
        raise ValidationError("loss_extremes: loss matrix is identically zero on this family")
    return float(pos.min()), float(L.max())


def unfavorable_set(W: LossSpec, family: HypothesisFamily, D: SignalConfig) -> list[SignalConfig]:
    """Configurations ``C`` in the family under which deciding ``D`` is incorrect."""
    D = as_config(D)
    if D not in family:
        raise ValidationError(f"unfavorable_set: decision {D} not in family")
    bits = family_bits(family)
    row = W.table(np.array([D.bits]), bits)[0]
    return [SignalConfig(int(b)) for b in bits[row > 0]]


def check_condition_15(W: LossSpec, family: HypothesisFamily) -> bool:
    """True iff every decision in the family has a configuration that makes it wrong."""
    L = loss_matrix(W, family)
    return bool(np.all(L.max(axis=1) > 0))


# ---------------------------------------------------------------------------
# JSON


def loss_to_dict(W: LossSpec) -> dict:
    if isinstance(W, GMRLoss):
        return {"kind": "gmr", "m0": W.m0}
    if isinstance(W, GFWERLoss):
        return {"kind": "gfwer", "m1": W.m1, "m2": W.m2}
    if isinstance(W, ZeroOneLoss):
        return {"kind": "zero_one"}
    return {"kind": "matrix", "members": [c.to_list() for c in W.members], "table": [list(r) for r in W.table_]}


def loss_from_dict(d: dict, path: str = "loss") -> LossSpec:
    kind = jfield(d, "kind", path, str)
    if kind == "gmr":
        return GMRLoss(jfield(d, "m0", path, int))
    if kind == "gfwer":
        return GFWERLoss(jfield(d, "m1", path, int), jfield(d, "m2", path, int))
    if kind == "zero_one":
        return ZeroOneLoss()
    if kind == "matrix":
        members = jfield(d, "members", path, list)
        table = jfield(d, "table", path, list)
        cfgs = []
        for i, m in enumerate(members):
            if not isinstance(m, list):
                raise ValidationError(f"{join(join(path, 'members'), i)}: expected a list of indices")
            cfgs.append(SignalConfig.from_indices(m))
        return MatrixLoss(tuple(cfgs), tuple(tuple(r) for r in table))
    raise ValidationError(f"{join(path, 'kind')}: unknown loss kind {kind!r}")
