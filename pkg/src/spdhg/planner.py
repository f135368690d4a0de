"""Closed-form step sizes for serial sampling when ``g`` and every ``f_i*`` are strongly convex.

With ``kappa_i = ||A_i||^2 / (mu_g mu_i)`` and ``kappa_tilde_i = 1 + kappa_i / rho^2``
the three plans trade off the extrapolation (= linear rate) ``theta`` against
the sampling probabilities.  All plans are pure values; nothing here runs a
solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sampling import serial_sampling
from .solvers import StepPlan

__all__ = [
    "DegenerateProfileError",
    "ConditionProfile",
    "PlanReport",
    "plan_uniform",
    "plan_importance",
    "plan_optimal",
    "rate_zhang_xiao",
    "verify_plan",
]

_REL = 1e-12


class DegenerateProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionProfile:
    mu_g: float
    mu: tuple[float, ...]
    norms: tuple[float, ...]
    rho: float = 0.99
    kappa: np.ndarray = field(init=False, repr=False, compare=False)
    kappa_tilde: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mu = tuple(float(m) for m in np.atleast_1d(self.mu))
        norms = tuple(float(a) for a in np.atleast_1d(self.norms))
        if len(mu) != len(norms):
            raise ValueError("mu and norms need one entry per block")
        if not self.mu_g > 0 or min(mu) <= 0:
            raise DegenerateProfileError("planning needs mu_g > 0 and mu_i > 0")
        if min(norms) < 0:
            raise ValueError("operator norms are nonnegative")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        kappa = np.array(norms) ** 2 / (self.mu_g * np.array(mu))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "norms", norms)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "kappa_tilde", 1 + kappa / self.rho ** 2)

    @property
    def n(self) -> int:
        return len(self.mu)

    @classmethod
    def from_kappa(cls, kappa, mu_g: float = 1.0, mu=None, rho: float = 0.99) -> "ConditionProfile":
        """Profile with the given condition numbers (operator norms are derived)."""
        kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
        mu = np.ones_like(kappa) if mu is None else np.broadcast_to(np.asarray(mu, dtype=float), kappa.shape)
        return cls(mu_g, tuple(mu), tuple(np.sqrt(kappa * mu_g * mu)), rho)

    def rescaled(self, alpha: float, beta) -> "ConditionProfile":
        """Profile of the problem in variables ``alpha x`` and ``beta_i y_i``.

        ``g(x / alpha)`` is ``mu_g / alpha^2``-convex, ``f_i*(y_i / beta_i)`` is
        ``mu_i / beta_i^2``-convex and the coupling becomes
        ``<A_i x, y_i> = <beta_i^-1 A_i alpha^-1 (alpha x), beta_i y_i>``.
        """
        beta = np.broadcast_to(np.asarray(beta, dtype=float), (self.n,))
        return ConditionProfile(self.mu_g / alpha ** 2, tuple(np.array(self.mu) / beta ** 2),
                                tuple(np.array(self.norms) / (alpha * beta)), self.rho)


def _check_n(profile, n):
    if n is None:
        return profile.n
    if n != profile.n:
        raise ValueError(f"profile has {profile.n} blocks, asked for {n}")
    return n


def _plan(profile, tau, sigma, theta, p) -> StepPlan:
    return StepPlan(tau=float(tau), sigma=tuple(float(s) for s in sigma), theta=float(theta),
                    sampling=serial_sampling(p), variant="linear")


def plan_uniform(profile: ConditionProfile, n: int | None = None) -> StepPlan:
    """Uniform probabilities ``1/n`` with the smallest admissible ``theta``."""
    n = _check_n(profile, n)
    m = float(np.max(np.sqrt(profile.kappa_tilde)))
    if m <= 1:
        raise DegenerateProfileError("max kappa_tilde = 1: some coupling is zero")
    theta = 1 - 2 / (n + n * m)
    sigma = (1 / np.array(profile.mu)) / (m - 1)
    tau = (1 / profile.mu_g) / (n - 2 + n * m)
    return _plan(profile, tau, sigma, theta, np.full(n, 1.0 / n))


def plan_importance(profile: ConditionProfile, n: int | None = None) -> StepPlan:
    """Probabilities proportional to ``sqrt(kappa_i)``."""
    n = _check_n(profile, n)
    sk = np.sqrt(profile.kappa)
    skt = np.sqrt(profile.kappa_tilde)
    if np.any(sk <= 0):
        raise DegenerateProfileError("importance sampling needs kappa_i > 0")
    total = sk.sum()
    nu = float(np.min(sk / (1 + skt)))
    sigma = nu / np.array(profile.mu) / (sk - 2 * nu)
    if np.any(sigma <= 0):
        raise DegenerateProfileError("importance plan has nonpositive dual steps")
    theta = 1 - 2 * nu / total
    tau = nu / profile.mu_g / (total - 2 * nu)
    return _plan(profile, tau, sigma, theta, sk / total)


def plan_optimal(profile: ConditionProfile, n: int | None = None) -> StepPlan:
    """Probabilities and steps that minimize ``theta``."""
    n = _check_n(profile, n)
    skt = np.sqrt(profile.kappa_tilde)
    if np.any(skt <= 1):
        raise DegenerateProfileError("kappa_tilde_i = 1: block has zero coupling")
    total = skt.sum()
    theta = 1 - 2 / (n + total)
    p = (1 + skt) / (n + total)
    p = p / p.sum()
    sigma = (1 / np.array(profile.mu)) / (skt - 1)
    tau = (1 / profile.mu_g) / (n - 2 + total)
    return _plan(profile, tau, sigma, theta, p)


def rate_zhang_xiao(profile: ConditionProfile, n: int | None = None) -> float:
    """Per-iteration rate ``1 - 1/(n + n sqrt(m) R / sqrt(mu_g mu_f))`` with ``m = 1``, ``R = max ||A_j||``."""
    n = _check_n(profile, n)
    mu = np.array(profile.mu)
    if np.ptp(mu) > _REL * mu.max():
        raise ValueError("the comparison rate assumes equal mu_i for all blocks")
    r = max(profile.norms)
    return 1 - 1 / (n + n * r / np.sqrt(profile.mu_g * mu[0]))


@dataclass
class PlanReport:
    ok: bool
    margins: dict
    failures: list

    def __str__(self):
        lines = [f"{k}: margin {v:.3e}" for k, v in self.margins.items()]
        lines += [f"FAILED {f}" for f in self.failures]
        return "\n".join(lines)


def verify_plan(plan: StepPlan, profile: ConditionProfile) -> PlanReport:
    """Check the linear-rate conditions of a serial plan.

    1. ``theta >= 1 / (1 + 2 mu_g tau)``
    2. ``theta >= (1 + 2 (1 - p_i) mu_i sigma_i) / (1 + 2 mu_i sigma_i)``
    3. ``tau sigma_i ||A_i||^2 theta <= rho^2 p_i``

    Each holds up to a relative tolerance of 1e-12; margins are ``lhs - rhs``
    of the form ``big >= small``, so negative margins indicate violations.
    """
    if plan.sampling.kind not in ("serial", "full"):
        raise ValueError("verify_plan handles serial (or full) plans")
    theta, tau = plan.theta, plan.tau
    sigma = np.asarray(plan.sigma)
    p = plan.sampling.marginals
    mu = np.array(profile.mu)
    a2 = np.array(profile.norms) ** 2
    margins, failures = {}, []

    def check(name, big, small):
        margins[name] = float(big - small)
        if big < small * (1 - _REL) - _REL * abs(small):
            failures.append(f"{name}: {big!r} < {small!r}")

    check("theta >= 1/(1+2 mu_g tau)", theta, 1 / (1 + 2 * profile.mu_g * tau))
    for i in range(len(sigma)):
        check(f"theta >= (1+2(1-p_i)mu_i sigma_i)/(1+2 mu_i sigma_i) [i={i}]", theta,
              (1 + 2 * (1 - p[i]) * mu[i] * sigma[i]) / (1 + 2 * mu[i] * sigma[i]))
    for i in range(len(sigma)):
        check(f"rho^2 p_i >= tau sigma_i ||A_i||^2 theta [i={i}]", profile.rho ** 2 * p[i],
              tau * sigma[i] * a2[i] * theta)
    return PlanReport(not failures, margins, failures)
