"""Convex functions with values, proximal operators and strong-convexity constants.

Every function is a :class:`ProxFunction` with

* ``value(x)`` returning a float, ``inf`` outside the domain,
* ``prox(sigma, z)`` returning ``argmin_x 0.5 * ||x - z||^2 / sigma + f(x)``,
* ``mu``, the strong-convexity constant (0 if not strongly convex).

Functions that come with an explicit Fenchel conjugate are returned as a
:class:`ConjugatePair`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operators import forward_difference, forward_difference_adjoint

__all__ = [
    "ProxFunction",
    "ConjugatePair",
    "ZeroFunction",
    "ZeroIndicator",
    "SquaredL2DataFit",
    "SquaredL2DataFitConjugate",
    "L1Norm",
    "BoxIndicator",
    "KLDivergence",
    "KLConjugate",
    "SmoothedKL",
    "SmoothedKLConjugate",
    "Huber",
    "HuberConjugate",
    "TVProxFGP",
    "AddSquaredL2",
    "sq_l2_datafit",
    "l1_norm",
    "L1Distance",
    "ShiftedBoxConjugate",
    "l1_distance",
    "box_indicator",
    "kl_value",
    "kl_conjugate",
    "kl_pair",
    "smoothed_kl_conjugate",
    "smoothed_kl_pair",
    "huber_conjugate",
    "huber_pair",
    "tv_prox_fgp",
    "add_sq_l2",
    "moreau_conjugate_prox",
    "isotropic_tv",
]

INF = float("inf")


class ProxFunction:
    mu: float = 0.0
    domain: str = "R^d"

    def value(self, x) -> float:
        raise NotImplementedError

    def prox(self, sigma: float, z) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x) -> float:
        return self.value(x)


@dataclass(frozen=True)
class ConjugatePair:
    primal: ProxFunction
    conjugate: ProxFunction


def moreau_conjugate_prox(pair: ConjugatePair, sigma: float, z) -> np.ndarray:
    """``prox_{sigma f*}(z) = z - sigma * prox_{f / sigma}(z / sigma)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    z = np.asarray(z, dtype=float)
    return z - sigma * pair.primal.prox(1.0 / sigma, z / sigma)


class ZeroFunction(ProxFunction):
    def value(self, x):
        return 0.0

    def prox(self, sigma, z):
        return np.array(z, dtype=float)


class ZeroIndicator(ProxFunction):
    """Indicator of the origin; pins the variable to zero."""

    domain = "{0}"

    def value(self, x):
        return 0.0 if not np.any(np.asarray(x)) else INF

    def prox(self, sigma, z):
        return np.zeros_like(z, dtype=float)


class SquaredL2DataFit(ProxFunction):
    """``1/(2 alpha) ||x - b||^2``."""

    def __init__(self, b, alpha: float):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        self.b = np.asarray(b, dtype=float)
        self.alpha = float(alpha)
        self.mu = 1.0 / self.alpha

    def value(self, x):
        d = np.asarray(x) - self.b
        return float(np.vdot(d, d)) / (2 * self.alpha)

    def prox(self, sigma, z):
        return (self.alpha * np.asarray(z) + sigma * self.b) / (self.alpha + sigma)


class SquaredL2DataFitConjugate(ProxFunction):
    """``alpha/2 ||z||^2 + <z, b>``, the conjugate of :class:`SquaredL2DataFit`."""

    def __init__(self, b, alpha: float):
        self.b = np.asarray(b, dtype=float)
        self.alpha = float(alpha)
        self.mu = self.alpha

    def value(self, z):
        z = np.asarray(z)
        return 0.5 * self.alpha * float(np.vdot(z, z)) + float(np.vdot(z, self.b))

    def prox(self, sigma, z):
        return (np.asarray(z) - sigma * self.b) / (1 + sigma * self.alpha)


class L1Norm(ProxFunction):
    def __init__(self, alpha: float = 1.0):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        self.alpha = float(alpha)

    def value(self, x):
        return self.alpha * float(np.abs(x).sum())

    def prox(self, sigma, z):
        z = np.asarray(z, dtype=float)
        return np.sign(z) * np.maximum(np.abs(z) - self.alpha * sigma, 0.0)


class L1Distance(ProxFunction):
    """``alpha ||x - c||_1``."""

    def __init__(self, c, alpha: float = 1.0):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        self.c = np.asarray(c, dtype=float)
        self.alpha = float(alpha)

    def value(self, x):
        return self.alpha * float(np.abs(np.asarray(x) - self.c).sum())

    def prox(self, sigma, z):
        d = np.asarray(z, dtype=float) - self.c
        return self.c + np.sign(d) * np.maximum(np.abs(d) - self.alpha * sigma, 0.0)


class ShiftedBoxConjugate(ProxFunction):
    """``<c, y>`` on ``|y| <= alpha``, the conjugate of :class:`L1Distance`."""

    def __init__(self, c, alpha: float = 1.0):
        self.c = np.asarray(c, dtype=float)
        self.alpha = float(alpha)
        self.domain = f"|y| <= {alpha}"

    def value(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(np.abs(y) > self.alpha):
            return INF
        return float(np.vdot(self.c, y))

    def prox(self, sigma, z):
        return np.clip(np.asarray(z, dtype=float) - sigma * self.c, -self.alpha, self.alpha)


class BoxIndicator(ProxFunction):
    """Indicator of ``{x : lo <= x <= hi}``; bounds may be ``-inf``/``inf``."""

    def __init__(self, lo=-INF, hi=INF):
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        if np.any(lo >= hi):
            raise ValueError("box needs lo < hi")
        self.lo, self.hi = lo, hi
        self.domain = f"[{lo}, {hi}]"

    def value(self, x):
        x = np.asarray(x)
        return 0.0 if np.all((x >= self.lo) & (x <= self.hi)) else INF

    def prox(self, sigma, z):
        return np.clip(z, self.lo, self.hi)


def _check_nonneg(b, r, strict=False):
    b, r = np.asarray(b, dtype=float), np.asarray(r, dtype=float)
    bad = (b <= 0).any() or (r <= 0).any() if strict else (b < 0).any() or (r < 0).any()
    if bad:
        kind = "positive" if strict else "nonnegative"
        raise ValueError(f"data b and background r must be {kind}")
    return b, np.broadcast_to(r, b.shape).astype(float)


def kl_value(b, r):
    """Return the KL data term ``y -> sum y + r - b + b log(b / (y + r))`` as a callable."""
    b, r = _check_nonneg(b, r)

    def value(y) -> float:
        s = np.asarray(y, dtype=float) + r
        if np.any((s <= 0) & (b > 0)) or np.any(s < 0):
            return INF
        with np.errstate(divide="ignore", invalid="ignore"):
            logterm = np.where(b > 0, b * np.log(np.where(b > 0, b, 1.0) / np.where(s > 0, s, 1.0)), 0.0)
        return float(np.sum(s - b + logterm))

    return value


class KLDivergence(ProxFunction):
    domain = "y + r > 0"

    def __init__(self, b, r):
        self.b, self.r = _check_nonneg(b, r)
        self._value = kl_value(self.b, self.r)

    def value(self, y):
        return self._value(y)

    def prox(self, sigma, z):
        # substitute w = u + r: w^2 + (sigma - r - z) w - sigma b = 0, positive root
        c = np.asarray(z, dtype=float) + self.r - sigma
        w = 0.5 * (c + np.sqrt(c * c + 4 * sigma * self.b))
        return w - self.r


def _kl_conj_prox(z, sigma, b, r):
    a = np.asarray(z, dtype=float) - 1 + sigma * r
    root = np.sqrt(a * a + 4 * sigma * b)
    pos = a > 0
    out = np.empty_like(a)
    # 1 - 2 sigma b / (a + root) avoids cancellation when a >> 0
    out[pos] = 1 - 2 * sigma * b[pos] / (a[pos] + root[pos])
    out[~pos] = 0.5 * (a[~pos] + 2 - root[~pos])
    # keep strictly inside the domain where the log term is active
    edge = (b > 0) & (out >= 1)
    out[edge] = np.nextafter(1.0, 0.0)
    return out


def _kl_conj_terms(z, b, r):
    z = np.asarray(z, dtype=float)
    feasible = (z < 1) | ((z == 1) & (b == 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        logt = np.where(b > 0, -b * np.log1p(-np.minimum(z, 1 - 1e-300)), 0.0)
    return np.where(feasible, -z * r + logt, INF)


class KLConjugate(ProxFunction):
    """``sum -z r - b log(1 - z)`` on ``z <= 1`` (``z < 1`` where ``b > 0``)."""

    domain = "z <= 1"

    def __init__(self, b, r):
        self.b, self.r = _check_nonneg(b, r)

    def value(self, z):
        return float(np.sum(_kl_conj_terms(z, self.b, self.r)))

    def prox(self, sigma, z):
        return _kl_conj_prox(np.broadcast_to(z, self.b.shape), sigma, self.b, self.r)


def kl_conjugate(b, r) -> KLConjugate:
    return KLConjugate(b, r)


def kl_pair(b, r) -> ConjugatePair:
    return ConjugatePair(KLDivergence(b, r), KLConjugate(b, r))


class SmoothedKL(ProxFunction):
    """KL divergence continued quadratically for ``y < 0``; needs ``b, r > 0``."""

    def __init__(self, b, r):
        self.b, self.r = _check_nonneg(b, r, strict=True)
        self._conj = SmoothedKLConjugate(self.b, self.r)

    def value(self, y):
        y = np.asarray(y, dtype=float)
        b, r = self.b, self.r
        pos = y >= 0
        ys = np.where(pos, y, 0.0)
        logb = b * np.log(b / (ys + r))
        quad = b / (2 * r * r) * y * y + (1 - b / r) * y + r - b + b * np.log(b / r)
        return float(np.sum(np.where(pos, ys + r - b + logb, quad)))

    def prox(self, sigma, z):
        z = np.asarray(z, dtype=float)
        return z - sigma * self._conj.prox(1.0 / sigma, z / sigma)


class SmoothedKLConjugate(ProxFunction):
    """Conjugate of :class:`SmoothedKL`, ``min(r^2 / b)``-strongly convex."""

    domain = "z < 1"

    def __init__(self, b, r):
        self.b, self.r = _check_nonneg(b, r, strict=True)
        self.threshold = 1 - self.b / self.r
        self.mu = float(np.min(self.r ** 2 / self.b))

    def value(self, z):
        z = np.asarray(z, dtype=float)
        b, r = self.b, self.r
        if np.any(z >= 1):
            return INF
        quad = (r * r / (2 * b) * z * z + (r - r * r / b) * z + r * r / (2 * b)
                + 1.5 * b - 2 * r - b * np.log(b / r))
        logb = -r * z - b * np.log1p(-z)
        return float(np.sum(np.where(z < self.threshold, quad, logb)))

    def prox(self, sigma, z):
        z = np.broadcast_to(np.asarray(z, dtype=float), self.b.shape)
        b, r = self.b, self.r
        low = z < self.threshold
        out = _kl_conj_prox(z, sigma, b, r)
        out[low] = (b[low] * z[low] - sigma * r[low] * b[low] + sigma * r[low] ** 2) / (b[low] + sigma * r[low] ** 2)
        return out

    def gradient(self, z):
        """Derivative of the value; continuous across the branch point."""
        z = np.asarray(z, dtype=float)
        b, r = self.b, self.r
        quad = r * r / b * z + r - r * r / b
        logb = -r + b / (1 - z)
        return np.where(z < self.threshold, quad, logb)


def smoothed_kl_conjugate(b, r) -> SmoothedKLConjugate:
    return SmoothedKLConjugate(b, r)


def smoothed_kl_pair(b, r) -> ConjugatePair:
    return ConjugatePair(SmoothedKL(b, r), SmoothedKLConjugate(b, r))


class Huber(ProxFunction):
    """``alpha * sum_j (|y_j| if |y_j| > eta else y_j^2 / (2 eta) + eta / 2)``."""

    def __init__(self, alpha: float, eta: float):
        if not (alpha > 0 and eta > 0):
            raise ValueError("alpha and eta must be positive")
        self.alpha, self.eta = float(alpha), float(eta)

    def value(self, y):
        a = np.abs(np.asarray(y, dtype=float))
        return self.alpha * float(np.sum(np.where(a > self.eta, a, a * a / (2 * self.eta) + self.eta / 2)))

    def prox(self, sigma, z):
        z = np.asarray(z, dtype=float)
        lam = self.alpha * sigma
        small = np.abs(z) <= self.eta + lam
        return np.where(small, z * self.eta / (self.eta + lam), z - lam * np.sign(z))


class HuberConjugate(ProxFunction):
    """``eta/(2 alpha) ||z||^2 - alpha eta / 2`` per entry on ``|z| <= alpha``."""

    def __init__(self, alpha: float, eta: float):
        if not (alpha > 0 and eta > 0):
            raise ValueError("alpha and eta must be positive")
        self.alpha, self.eta = float(alpha), float(eta)
        self.mu = self.eta / self.alpha
        self.domain = f"|z| <= {alpha}"

    def value(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(np.abs(z) > self.alpha):
            return INF
        return float(np.sum(self.eta / (2 * self.alpha) * z * z - self.alpha * self.eta / 2))

    def prox(self, sigma, z):
        z = np.asarray(z, dtype=float)
        return np.clip(z / (1 + sigma * self.eta / self.alpha), -self.alpha, self.alpha)


def huber_conjugate(alpha: float, eta: float) -> HuberConjugate:
    return HuberConjugate(alpha, eta)


def huber_pair(alpha: float, eta: float) -> ConjugatePair:
    return ConjugatePair(Huber(alpha, eta), HuberConjugate(alpha, eta))


def sq_l2_datafit(b, alpha: float) -> ConjugatePair:
    return ConjugatePair(SquaredL2DataFit(b, alpha), SquaredL2DataFitConjugate(b, alpha))


def l1_norm(alpha: float = 1.0) -> ConjugatePair:
    return ConjugatePair(L1Norm(alpha), BoxIndicator(-alpha, alpha))


def l1_distance(c, alpha: float = 1.0) -> ConjugatePair:
    return ConjugatePair(L1Distance(c, alpha), ShiftedBoxConjugate(c, alpha))


def box_indicator(lo: float, hi: float) -> BoxIndicator:
    return BoxIndicator(lo, hi)


def isotropic_tv(x) -> float:
    """``sum_j sqrt((D_1 x)_j^2 + (D_2 x)_j^2)`` with forward differences."""
    g1, g2 = forward_difference(x, 1), forward_difference(x, 0)
    return float(np.sum(np.sqrt(g1 * g1 + g2 * g2)))


class TVProxFGP(ProxFunction):
    """``alpha * TV(x)`` (+ nonnegativity) with an inexact prox by FGP on the dual.

    The dual iterate ``state`` is kept between calls and used as a warm start,
    so an instance must belong to a single solver run.
    """

    def __init__(self, alpha: float, nonneg: bool = True, iters: int = 20, warm=None):
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if iters < 1:
            raise ValueError("iters must be >= 1")
        self.alpha = float(alpha)
        self.nonneg = bool(nonneg)
        self.iters = int(iters)
        self.state = None if warm is None else np.array(warm, dtype=float)
        self.domain = "x >= 0" if nonneg else "R^d"

    def _project(self, x):
        return np.maximum(x, 0.0) if self.nonneg else x

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if self.nonneg and np.any(x < 0):
            return INF
        return self.alpha * isotropic_tv(x)

    def prox_objective(self, x, z, sigma) -> float:
        d = np.asarray(x) - z
        return 0.5 * float(np.vdot(d, d)) / sigma + self.value(x)

    def reset(self):
        self.state = None

    def prox(self, sigma, z):
        z = np.asarray(z, dtype=float)
        lam = sigma * self.alpha
        if lam == 0:
            return self._project(z)
        p = self.state if self.state is not None and self.state.shape == (2,) + z.shape \
            else np.zeros((2,) + z.shape)
        r, t = p.copy(), 1.0
        step = 1.0 / (8.0 * lam)
        for _ in range(self.iters):
            x = self._project(z - lam * (forward_difference_adjoint(r[0], 1) + forward_difference_adjoint(r[1], 0)))
            q = r + step * np.stack([forward_difference(x, 1), forward_difference(x, 0)])
            q /= np.maximum(1.0, np.sqrt(q[0] ** 2 + q[1] ** 2))
            t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            r = q + (t - 1) / t_new * (q - p)
            p, t = q, t_new
        self.state = p
        x = self._project(z - lam * (forward_difference_adjoint(p[0], 1) + forward_difference_adjoint(p[1], 0)))
        # an inexact dual solve must not do worse than the trivial candidate
        x0 = self._project(z)
        if self.prox_objective(x0, z, sigma) < self.prox_objective(x, z, sigma):
            return x0
        return x


def tv_prox_fgp(alpha: float, nonneg: bool = True, iters: int = 20, warm=None) -> TVProxFGP:
    return TVProxFGP(alpha, nonneg, iters, warm)


class AddSquaredL2(ProxFunction):
    """``base + mu/2 ||.||^2`` with its prox expressed through ``base.prox``."""

    def __init__(self, base: ProxFunction, mu: float):
        if not mu > 0:
            raise ValueError("mu must be positive")
        self.base = base
        self.extra = float(mu)
        self.mu = base.mu + self.extra
        self.domain = base.domain

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self.base.value(x) + 0.5 * self.extra * float(np.vdot(x, x))

    def prox(self, sigma, z):
        s = 1 + sigma * self.extra
        return self.base.prox(sigma / s, np.asarray(z, dtype=float) / s)


def add_sq_l2(base: ProxFunction, mu: float) -> AddSquaredL2:
    return AddSquaredL2(base, mu)
