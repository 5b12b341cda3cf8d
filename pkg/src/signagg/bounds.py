"""PAC-Bayes risk certification for the signed-output posterior.

The certified quantity is the expected linear loss of the stochastic
classifier; because the signed output satisfies E[loss_01] = loss_lin(E[out]),
the same number certifies the expected 0-1 risk.  The certificate is

    bound = phi_inverse(lambda / m, risk + penalty(kl, lambda))

with phi_inverse(gamma, t) = (1 - exp(-gamma t)) / (1 - exp(-gamma)) and

    penalty = (alpha / lambda) * (kl - log(delta)
              + 2 * log(log(alpha^2 lambda) / log(alpha))),

valid simultaneously for every lambda > 1/alpha at confidence 1 - delta, so
the reported bound may be minimised over a lambda grid.  Arguments >= 1 are
clipped: a vacuous certificate is reported as exactly 1.0.
"""

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

DEFAULT_DELTA = 0.05
DEFAULT_ALPHA = 2.0
GRID_SIZE = 512
GRID_LOW_FLOOR = 1.0 + 1e-6


class InvalidBoundConfig(ValueError):
    """Bound parameters outside their valid domain."""


@dataclass(frozen=True)
class BoundConfig:
    """Sample size, confidence and the free parameters of the certificate."""

    m: int
    delta: float = DEFAULT_DELTA
    alpha: float = DEFAULT_ALPHA
    lam: float = None

    def __post_init__(self):
        if int(self.m) < 1:
            raise InvalidBoundConfig(f"m must be a positive integer, got {self.m}")
        object.__setattr__(self, "m", int(self.m))
        if not 0.0 < self.delta < 1.0:
            raise InvalidBoundConfig(f"delta must lie in (0, 1), got {self.delta}")
        if not self.alpha > 1.0:
            raise InvalidBoundConfig(f"alpha must exceed 1, got {self.alpha}")
        lam = float(self.m) if self.lam is None else float(self.lam)
        if not (math.isfinite(lam) and lam > 0.0):
            raise InvalidBoundConfig(f"lambda must be finite and positive, got {self.lam}")
        object.__setattr__(self, "lam", lam)


@dataclass
class BoundReport:
    """One evaluated certificate with every input echoed for auditing."""

    empirical_linear_risk: float
    kl: float
    penalty: float
    bound_value: float
    minimizing_lambda: float
    vacuous: bool
    m: int
    delta: float
    alpha: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)


def phi_inverse(gamma: float, t: float) -> float:
    """(1 - exp(-gamma * t)) / (1 - exp(-gamma)); upper-inverts the Catoni
    transform.  Requires gamma > 0; satisfies phi_inverse(gamma, t) >= t on
    [0, 1] and fixes 0 and 1."""
    if not gamma > 0.0:
        raise InvalidBoundConfig(f"gamma must be positive, got {gamma}")
    return float(math.expm1(-gamma * t) / math.expm1(-gamma))


def _log_log_ratio(alpha: float, lam):
    ratio = np.log(alpha * alpha * np.asarray(lam, dtype=np.float64)) / math.log(alpha)
    if np.any(ratio <= 1.0):
        raise InvalidBoundConfig(
            f"log(alpha^2 lambda)/log(alpha) must exceed 1 (alpha={alpha}, lambda={lam})"
        )
    return ratio


def penalty(kl: float, cfg: BoundConfig) -> float:
    """Complexity term (alpha/lambda) * (kl - log delta + 2 log log-ratio)."""
    if kl < 0.0:
        raise InvalidBoundConfig(f"kl must be nonnegative, got {kl}")
    ratio = _log_log_ratio(cfg.alpha, cfg.lam)
    return float(
        (cfg.alpha / cfg.lam) * (kl - math.log(cfg.delta) + 2.0 * math.log(ratio))
    )


def _check_risk(risk: float) -> float:
    if not 0.0 <= risk <= 1.0:
        raise InvalidBoundConfig(f"empirical risk must lie in [0, 1], got {risk}")
    return float(risk)


def bound(risk: float, kl: float, cfg: BoundConfig) -> BoundReport:
    """Certificate at one fixed lambda; vacuous results are exactly 1.0."""
    risk = _check_risk(risk)
    pen = penalty(kl, cfg)
    arg = risk + pen
    if arg >= 1.0:
        value, vacuous = 1.0, True
    else:
        value, vacuous = phi_inverse(cfg.lam / cfg.m, arg), False
    return BoundReport(
        empirical_linear_risk=risk,
        kl=float(kl),
        penalty=pen,
        bound_value=float(value),
        minimizing_lambda=cfg.lam,
        vacuous=vacuous,
        m=cfg.m,
        delta=cfg.delta,
        alpha=cfg.alpha,
    )


def default_lambda_grid(m: int) -> np.ndarray:
    """Geometric grid of GRID_SIZE lambdas on [max(1+1e-6, m/1000), 100 m]."""
    low = max(GRID_LOW_FLOOR, m * 1e-3)
    return np.geomspace(low, 100.0 * m, GRID_SIZE)


def min_bound_over_lambda(
    risk: float,
    kl: float,
    m: int,
    delta: float = DEFAULT_DELTA,
    alpha: float = DEFAULT_ALPHA,
    grid: np.ndarray = None,
) -> BoundReport:
    """Best certificate over a lambda grid; ties resolve to smaller lambda."""
    risk = _check_risk(risk)
    if kl < 0.0:
        raise InvalidBoundConfig(f"kl must be nonnegative, got {kl}")
    probe = BoundConfig(m=m, delta=delta, alpha=alpha, lam=None)  # validates m/delta/alpha
    lams = default_lambda_grid(probe.m) if grid is None else np.asarray(grid, dtype=np.float64)
    if lams.ndim != 1 or lams.size == 0:
        raise InvalidBoundConfig("lambda grid must be a nonempty 1-D array")
    ratio = _log_log_ratio(alpha, lams)
    pens = (alpha / lams) * (kl - math.log(delta) + 2.0 * np.log(ratio))
    args = np.minimum(risk + pens, 1.0)
    gammas = lams / probe.m
    values = np.expm1(-gammas * args) / np.expm1(-gammas)
    values[args >= 1.0] = 1.0
    best = 0
    for i in range(1, lams.size):
        if values[i] < values[best]:
            best = i
    return BoundReport(
        empirical_linear_risk=risk,
        kl=float(kl),
        penalty=float(pens[best]),
        bound_value=float(values[best]),
        minimizing_lambda=float(lams[best]),
        vacuous=bool(args[best] >= 1.0),
        m=probe.m,
        delta=delta,
        alpha=alpha,
    )


def objective(risk: float, kl: float, lam: float) -> float:
    """Training surrogate risk + kl / lambda (the bound's monotone core)."""
    if not lam > 0.0:
        raise InvalidBoundConfig(f"lambda must be positive, got {lam}")
    return float(risk + kl / lam)


def lambda_gradient(risk: float, kl: float, cfg: BoundConfig) -> float:
    """d bound / d lambda of the unclipped certificate at fixed risk and kl.

    Used by the lambda-optimising trainer; computed on the smooth composition
    even where the reported bound would clip to 1.
    """
    risk = _check_risk(risk)
    ratio = float(_log_log_ratio(cfg.alpha, cfg.lam))
    lam, alpha, m = cfg.lam, cfg.alpha, cfg.m
    pen = penalty(kl, cfg)
    dpen = -pen / lam + 2.0 * alpha / (lam * lam * math.log(alpha) * ratio)
    gamma = lam / m
    t = risk + pen
    e_g = -math.expm1(-gamma)  # 1 - exp(-gamma)
    e_t = -math.expm1(-gamma * t)
    exp_gt = math.exp(-gamma * t)
    dphi_dt = gamma * exp_gt / e_g
    dphi_dgamma = (t * exp_gt * e_g - e_t * math.exp(-gamma)) / (e_g * e_g)
    return float(dphi_dgamma / m + dphi_dt * dpen)
