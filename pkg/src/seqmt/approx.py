"""First- and second-order approximations of the minimal expected sample size."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .calibrate import ClassSpec
from .divergence import DivergenceReport
from .errors import NonUniqueError, ValidationError


@dataclass(frozen=True)
class EssApprox:
    fo: float
    so: float
    kl_star: float
    h: float
    r: int
    arg: float

    def to_dict(self) -> dict:
        return asdict(self)


def generic_expansion(log_inv_c: float, kl_star: float, h: float, r: int) -> EssApprox:
    """``log(1/c)/KL`` plus ``h sqrt(log(1/c)) / KL^{3/2}`` when the critical set has ``r >= 2`` members."""
    if not log_inv_c > 0:
        raise ValidationError(f"generic_expansion: log(1/c) must be positive, got {log_inv_c}")
    if not kl_star > 0:
        raise ValidationError(f"generic_expansion: kl_star must be positive, got {kl_star}")
    if h is None or h < 0:
        raise ValidationError(f"generic_expansion: h must be >= 0, got {h}")
    if r < 1:
        raise ValidationError(f"generic_expansion: r must be >= 1, got {r}")
    fo = log_inv_c / kl_star
    so = fo + (h * math.sqrt(log_inv_c) / kl_star**1.5 if r >= 2 else 0.0)
    return EssApprox(fo, so, kl_star, h if r >= 2 else 0.0, r, log_inv_c)


def class_expansion(spec: ClassSpec, report: DivergenceReport) -> EssApprox:
    """Class-level expansion: ``|log alpha|`` stands in for ``log(1/c)``."""
    if not report.unique:
        raise NonUniqueError(f"class_expansion: most favorable subset at {report.A} is not unique "
                             f"({len(report.maximizers)} maximizers)")
    return generic_expansion(abs(math.log(spec.alpha)), report.kl_star, report.h, report.r)


def homogeneous_gmr_closed_form(K: int, m0: int, mu: float, sigma: float, alpha: float, h: float) -> EssApprox:
    """Closed form for ``K`` identical Gaussian streams, truth = no signals."""
    if not (mu**2 > 0 and sigma**2 > 0):
        raise ValidationError("homogeneous_gmr_closed_form: mu and sigma must be nonzero")
    if not 1 <= m0 <= K:
        raise ValidationError(f"homogeneous_gmr_closed_form: need 1 <= m0 <= K, got m0={m0}, K={K}")
    if not 0 < alpha < 1:
        raise ValidationError(f"homogeneous_gmr_closed_form: alpha must lie in (0, 1), got {alpha}")
    la = abs(math.log(alpha))
    scale = 2 * sigma**2 / (m0 * mu**2)
    r = math.comb(K, m0)
    corr = scale**1.5 * h * math.sqrt(la) if r >= 2 else 0.0
    return EssApprox(scale * la, scale * la + corr, 1.0 / scale, h if r >= 2 else 0.0, r, la)
