"""Privacy-loss bookkeeping for the subsampled Gaussian mechanism.

The moments accountant keeps, for each integer order ``lam``, the log of the
``lam``-th moment of the privacy-loss variable.  Log-moments add up across
steps, and a tail bound turns them into an (epsilon, delta) pair:

    epsilon(delta) = min_lam (alpha(lam) - ln delta) / lam
    delta(epsilon) = min_lam exp(alpha(lam) - lam * epsilon)

One step's log-moment is computed by adaptive quadrature of the two
likelihood-ratio expectations between ``N(0, s^2)`` and the mixture
``(1-q) N(0, s^2) + q N(1, s^2)``.

For comparison, :func:`linear_composition` is the plain ``(n eps, n delta)``
rule (some texts call this "strong composition"; that name is kept as an
alias).
"""
from __future__ import annotations

import copy
import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .dp import gaussian_sigma_for

DEFAULT_MAX_LAMBDA = 32
QUAD_RTOL = 1e-10


class QuadratureError(ArithmeticError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual estimate {residual:.3e})")
        self.residual = residual


class InfeasibleBudgetError(ValueError):
    pass


def _log_normal_pdf(z, mu, sigma):
    return -0.5 * ((z - mu) / sigma) ** 2 - math.log(sigma * math.sqrt(2 * math.pi))


def _log_mixture(z, q, sigma):
    a = _log_normal_pdf(z, 0.0, sigma)
    if q == 0:
        return a
    b = _log_normal_pdf(z, 1.0, sigma)
    if q == 1:
        return b
    return np.logaddexp(math.log1p(-q) + a, math.log(q) + b)


def _log_expectation(log_integrand, lo, hi, peaks):
    """``log \\int_lo^hi exp(log_integrand(z)) dz`` with the integrand rescaled by its peak."""
    grid = np.linspace(lo, hi, 4001)
    grid = np.concatenate([grid, np.clip(peaks, lo, hi)])
    vals = log_integrand(grid)
    shift = float(np.max(vals))
    z_peak = float(grid[int(np.argmax(vals))])
    breaks = sorted({float(np.clip(p, lo, hi)) for p in (*peaks, z_peak)} - {lo, hi})

    def f(z):
        return math.exp(float(log_integrand(np.float64(z))) - shift)

    value, abserr, info = integrate.quad(
        f, lo, hi, points=breaks or None, epsabs=0.0, epsrel=QUAD_RTOL, limit=500, full_output=1
    )[:3]
    if not value > 0 or abserr > max(1e3 * QUAD_RTOL, 1e-8) * value:
        raise QuadratureError("log-moment quadrature did not converge", abserr / value if value > 0 else math.inf)
    return shift + math.log(value)


@functools.lru_cache(maxsize=65536)
def step_log_moment(q: float, sigma: float, lam: int) -> float:
    """Log-moment of order ``lam`` for one subsampled Gaussian step.

    ``log max(E1, E2)`` where ``E1 = E_{nu0}[(nu0/nu)^lam]`` and
    ``E2 = E_{nu}[(nu/nu0)^lam]``, ``nu0 = N(0, sigma^2)``,
    ``nu = (1-q) N(0, sigma^2) + q N(1, sigma^2)``.
    """
    q = float(q)
    sigma = float(sigma)
    lam = int(lam)
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if lam < 1:
        raise ValueError("lambda must be >= 1")
    if q == 0.0:
        return 0.0
    # The E2 integrand peaks near z = lam + 1 and the E1 integrand (q -> 1)
    # near z = -lam; keep both peaks at least 20 sigma inside the interval.
    r = max(sigma * (20 + lam), lam + 20 * sigma)
    lo, hi = -r, 1.0 + r

    def log_e1(z):
        l0 = _log_normal_pdf(z, 0.0, sigma)
        return (lam + 1) * l0 - lam * _log_mixture(z, q, sigma)

    def log_e2(z):
        lm = _log_mixture(z, q, sigma)
        return (lam + 1) * lm - lam * _log_normal_pdf(z, 0.0, sigma)

    a1 = _log_expectation(log_e1, lo, hi, (0.0, -float(lam)))
    a2 = _log_expectation(log_e2, lo, hi, (1.0, float(lam + 1)))
    # both expectations are >= 1 analytically; quadrature noise may dip below
    return max(a1, a2, 0.0)


@dataclass
class MomentLedger:
    """Accumulated log-moments for a run at fixed (q, sigma).

    ``alpha`` is derived from ``steps_recorded`` rather than summed step by
    step, so ledgers that recorded the same number of steps agree bit for bit
    however the steps were batched.
    """

    q: float
    sigma: float
    max_lambda: int = DEFAULT_MAX_LAMBDA
    steps_recorded: int = 0

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("q must lie in [0, 1]")
        if self.q > 0 and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.max_lambda < 1:
            raise ValueError("max_lambda must be >= 1")

    @property
    def lambdas(self) -> np.ndarray:
        return np.arange(1, self.max_lambda + 1)

    def step_moments(self) -> np.ndarray:
        if self.q == 0:
            return np.zeros(self.max_lambda)
        return np.array([step_log_moment(self.q, self.sigma, int(l)) for l in self.lambdas])

    @property
    def alpha(self) -> np.ndarray:
        if self.steps_recorded == 0:
            return np.zeros(self.max_lambda)
        return self.steps_recorded * self.step_moments()

    def clone(self) -> "MomentLedger":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "sigma": self.sigma,
            "max_lambda": self.max_lambda,
            "steps_recorded": self.steps_recorded,
            "alpha": [float(a) for a in self.alpha],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MomentLedger":
        return cls(d["q"], d["sigma"], d["max_lambda"], d["steps_recorded"])


def accumulate(ledger: MomentLedger, n_steps: int) -> MomentLedger:
    """New ledger with ``n_steps`` more steps at the ledger's (q, sigma)."""
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    out = ledger.clone()
    out.steps_recorded += n_steps
    return out


def eps_for_delta(ledger: MomentLedger, delta: float) -> float:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return float(np.min((ledger.alpha - math.log(delta)) / ledger.lambdas))


def delta_for_eps(ledger: MomentLedger, epsilon: float) -> float:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    # minimise in log space; a bound above 1 says nothing, so cap there
    return float(min(1.0, math.exp(min(0.0, float(np.min(ledger.alpha - ledger.lambdas * epsilon))))))


def linear_composition(eps0: float, delta0: float, n: int) -> tuple[float, float]:
    """``(n * eps0, n * delta0)``: n adaptive calls to an (eps0, delta0)-DP mechanism."""
    if eps0 < 0 or not 0 <= delta0 <= 1 or n < 0:
        raise ValueError("invalid composition arguments")
    return n * eps0, n * delta0


strong_composition = linear_composition


def linear_epsilon(sigma: float, steps: int, delta: float) -> float:
    """Total epsilon from linear composition of ``steps`` Gaussian releases.

    Each step is charged the epsilon at which noise multiplier ``sigma`` is
    the Gaussian-mechanism calibration for per-step delta ``delta / (2 steps)``.
    """
    if steps == 0:
        return 0.0
    delta0 = delta / (2 * steps)
    eps0 = gaussian_sigma_for(1.0, delta0, 1.0) / sigma
    return linear_composition(eps0, delta0, steps)[0]


def linear_delta(sigma: float, steps: int, epsilon: float) -> float:
    """Total delta from linear composition when ``epsilon`` is split evenly over ``steps``."""
    if steps == 0:
        return 0.0
    eps0 = epsilon / steps
    delta0 = min(1.0, 1.25 * math.exp(-0.5 * (sigma * eps0) ** 2))
    return min(1.0, linear_composition(eps0, delta0, steps)[1])


def epsilon_spent(q: float, sigma: float, steps: int, delta: float, max_lambda: int = DEFAULT_MAX_LAMBDA) -> float:
    return eps_for_delta(accumulate(MomentLedger(q, sigma, max_lambda), steps), delta)


def calibrate_sigma(
    epsilon_target: float,
    delta: float,
    q: float,
    steps: int,
    lo: float = 0.3,
    hi: float = 100.0,
    resolution: float = 1e-4,
    max_lambda: int = DEFAULT_MAX_LAMBDA,
) -> float:
    """Smallest noise multiplier (to relative ``resolution``) keeping ``steps`` steps within budget.

    One constant sigma is used for every step, which spends the budget evenly
    over the whole run.
    """
    if not epsilon_target > 0 or steps < 1:
        raise ValueError("need epsilon_target > 0 and steps >= 1")

    def ok(s):
        return epsilon_spent(q, s, steps, delta, max_lambda) <= epsilon_target

    if not ok(hi):
        raise InfeasibleBudgetError(
            f"epsilon {epsilon_target} at delta {delta} is out of reach for q={q}, T={steps} with sigma <= {hi}"
        )
    if ok(lo):
        return lo
    # ok(lo) is False, ok(hi) is True; bisect in log space
    while hi / lo - 1.0 > resolution:
        mid = math.sqrt(lo * hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi
