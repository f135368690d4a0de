"""Distances to a saddle point, theorem constants and empirical rate fits.

With ``h(x, y) = g(x) + f*(y)`` and the subgradient ``q = (-A* y#, A x#)`` at a
saddle point ``w# = (x#, y#)``, the Bregman distance
``D_h^q(w, w#) = G(x) + F(y)`` splits into

* ``G(x) = g(x) - g(x#) + <A* y#, x - x#>``
* ``F(y) = sum_i F_i(y_i)``, ``F_i(y_i) = f_i*(y_i) - f_i*(y#_i) - <A_i x#, y_i - y#_i>``

and equals the partial primal-dual gap over the singleton ``{w#}``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .operators import uncounted
from .solvers import SaddleProblem, StepPlan, da_sigma, pdhg

__all__ = [
    "SaddleReferenceError",
    "SaddleReference",
    "dist_G",
    "dist_F",
    "dist_F_blocks",
    "dist_F_p",
    "bregman_gap",
    "theorem1_constant",
    "metric_distances",
    "dual_accel_bound",
    "activation_index",
    "fit_rate",
    "fixed_point_residual",
]


class SaddleReferenceError(RuntimeError):
    """A saddle reference failed its fixed-point certificate."""


def _sq(v) -> float:
    return float(np.vdot(v, v))


def fixed_point_residual(problem: SaddleProblem, x, y, tau: float | None = None, sigma=None) -> float:
    """Relative change of one full PDHG step started at ``(x, y)`` with ``y_bar = y``."""
    A = problem.A
    if tau is None:
        tau = 0.99 / problem.norm()
    if sigma is None:
        sigma = np.full(len(A), 0.99 / problem.norm())
    with uncounted(A):
        x1 = problem.g.prox(tau, x - tau * A.adjoint(y))
        ax = A.apply(x1)
    y1 = [fc.prox(s, yi + s * a) for fc, s, yi, a in zip(problem.f_conj, sigma, y, ax)]
    num = np.sqrt(_sq(x1 - x)) + np.sqrt(sum(_sq(a - b) for a, b in zip(y1, y)))
    den = 1 + np.sqrt(_sq(x)) + np.sqrt(sum(_sq(b) for b in y))
    return float(num / den)


def _reference_steps(problem: SaddleProblem, balance: float | None):
    """Deterministic parameters: linear-rate ones when everything is strongly convex."""
    L = problem.norm()
    mu_g, mu = problem.mu_g, problem.mu
    if mu_g > 0 and np.all(mu > 0):
        mf = float(mu.min())
        m = 2 * np.sqrt(mu_g * mf) / L
        return m / (2 * mu_g), np.full(len(mu), m / (2 * mf)), 1 / (1 + m)
    r = 1.0 if balance is None else balance
    return 0.99 / (L * r), np.full(len(mu), 0.99 * r / L), 1.0


def _pick_balance(problem, x0, y0, trial: int = 500, candidates=(1.0, 0.1, 0.01, 0.001, 10.0, 100.0)) -> float:
    """Step ratio with the smallest residual after a short run."""
    best, best_res = 1.0, np.inf
    with uncounted(problem.A):
        for b in candidates:
            tau, sigma, theta = _reference_steps(problem, b)
            x, y, _ = pdhg(problem, tau, sigma, trial, x0=x0, y0=y0, theta=theta)
            res = fixed_point_residual(problem, x, y)
            if res < best_res:
                best, best_res = b, res
    return best


@dataclass
class SaddleReference:
    """Approximate saddle point certified by a small fixed-point residual."""

    x: np.ndarray
    y: list
    residual: float
    tol: float
    meta: dict = field(default_factory=dict)

    @classmethod
    def compute(cls, problem: SaddleProblem, tol: float = 1e-11, max_iter: int = 200_000,
                x0=None, y0=None, balance: float | None = None, strict: bool = True,
                chunk: int = 5000) -> "SaddleReference":
        """Long deterministic PDHG run until the fixed-point residual is below ``tol``.

        The certificate is always :func:`fixed_point_residual` at the default
        steps ``0.99/||A||``, whatever steps the run itself used.  ``balance``
        scales ``sigma`` up and ``tau`` down by the same factor for problems that
        are not fully strongly convex; by default it is picked from short trial
        runs.  Operator work is not counted.
        """
        if balance is None and not (problem.mu_g > 0 and np.all(problem.mu > 0)):
            balance = _pick_balance(problem, x0, y0)
        tau, sigma, theta = _reference_steps(problem, balance)
        x, y = x0, y0
        done, res = 0, np.inf
        with uncounted(problem.A):
            while done < max_iter:
                x, y, info = pdhg(problem, tau, sigma, min(chunk, max_iter - done), x0=x, y0=y,
                                  theta=theta, tol=tol / 10)
                done += info["iterations"]
                res = fixed_point_residual(problem, x, y)
                if res <= tol:
                    break
        ref = cls(x, y, res, tol, {"iterations": done, "tau": tau, "sigma": [float(s) for s in sigma],
                                   "theta": theta, "balance": balance, "problem": problem.name})
        if strict and res > tol * 10:
            raise SaddleReferenceError(f"reference residual {res:.3e} above tolerance {tol:.1e} "
                                       f"after {done} iterations")
        return ref

    def validate(self, problem: SaddleProblem, tol: float | None = None) -> float:
        tol = self.tol * 10 if tol is None else tol
        res = fixed_point_residual(problem, self.x, self.y)
        if res > tol:
            raise SaddleReferenceError(f"fixed-point residual {res:.3e} exceeds {tol:.1e}")
        return res

    def subgradient(self, problem: SaddleProblem):
        """``q = (-A* y#, A x#)``."""
        with uncounted(problem.A):
            return -problem.A.adjoint(self.y), problem.A.apply(self.x)

    def objective(self, problem: SaddleProblem) -> float:
        return problem.objective(self.x)

    def save(self, path) -> None:
        """``<path>.npy`` holds x then the dual blocks, flattened; ``<path>.meta.json`` the shapes."""
        path = Path(path)
        flat = np.concatenate([self.x.ravel()] + [b.ravel() for b in self.y])
        np.save(Path(f"{path}.npy"), flat)
        meta = dict(self.meta, x_shape=list(self.x.shape), y_shapes=[list(b.shape) for b in self.y],
                    residual=self.residual, tol=self.tol)
        Path(f"{path}.meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path, problem: SaddleProblem | None = None) -> "SaddleReference":
        path = Path(path)
        flat = np.load(Path(f"{path}.npy"))
        meta = json.loads(Path(f"{path}.meta.json").read_text())
        xs = tuple(meta.pop("x_shape"))
        ys = [tuple(s) for s in meta.pop("y_shapes")]
        sizes = [int(np.prod(xs))] + [int(np.prod(s)) for s in ys]
        if flat.size != sum(sizes):
            raise SaddleReferenceError(f"{path} holds {flat.size} values, metadata expects {sum(sizes)}")
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        ref = cls(parts[0].reshape(xs), [p.reshape(s) for p, s in zip(parts[1:], ys)],
                  meta.pop("residual"), meta.pop("tol"), meta)
        if problem is not None:
            ref.validate(problem)
        return ref


def dist_G(x, ref: SaddleReference, problem: SaddleProblem, aty_ref=None) -> float:
    gx = problem.g.value(x)
    if not np.isfinite(gx):
        return np.inf
    if aty_ref is None:
        with uncounted(problem.A):
            aty_ref = problem.A.adjoint(ref.y)
    return float(gx - problem.g.value(ref.x) + np.vdot(aty_ref, np.asarray(x) - ref.x))


def dist_F_blocks(y, ref: SaddleReference, problem: SaddleProblem, ax_ref=None) -> np.ndarray:
    if ax_ref is None:
        with uncounted(problem.A):
            ax_ref = problem.A.apply(ref.x)
    out = np.empty(problem.n)
    for i, fc in enumerate(problem.f_conj):
        v = fc.value(y[i])
        if not np.isfinite(v):
            out[i] = np.inf
            continue
        out[i] = v - fc.value(ref.y[i]) - np.vdot(ax_ref[i], np.asarray(y[i]) - ref.y[i])
    return out


def dist_F(y, ref: SaddleReference, problem: SaddleProblem, ax_ref=None) -> float:
    return float(np.sum(dist_F_blocks(y, ref, problem, ax_ref)))


def dist_F_p(y, ref: SaddleReference, problem: SaddleProblem, p, ax_ref=None) -> float:
    """``sum_i (1/p_i - 1) F_i(y_i)``; zero under full sampling."""
    w = 1 / np.asarray(p, dtype=float) - 1
    blocks = dist_F_blocks(y, ref, problem, ax_ref)
    return float(np.sum(np.where(w > 0, w * blocks, 0.0)))


def bregman_gap(w, ref: SaddleReference, problem: SaddleProblem, q=None) -> float:
    """``D_h^q(w, w#) = G(x) + F(y)`` for ``w = (x, y)``; ``q`` may be precomputed."""
    x, y = w
    aty_ref, ax_ref = (None, None) if q is None else (-q[0], q[1])
    return dist_G(x, ref, problem, aty_ref) + dist_F(y, ref, problem, ax_ref)


def theorem1_constant(x0, y0, ref: SaddleReference, tau: float, sigma, p,
                      problem: SaddleProblem) -> float:
    """``1/2 ||x0 - x#||^2 / tau + 1/2 sum_i ||y0_i - y#_i||^2 / (p_i sigma_i) + F^p(y0)``."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (problem.n,))
    p = np.asarray(p, dtype=float)
    c = 0.5 * _sq(np.asarray(x0) - ref.x) / tau
    c += 0.5 * sum(_sq(np.asarray(a) - b) / (pi * si) for a, b, pi, si in zip(y0, ref.y, p, sigma))
    return float(c + dist_F_p(y0, ref, problem, p))


def metric_distances(w, ref: SaddleReference, plan: StepPlan, problem: SaddleProblem,
                     gamma_sq: float | None = None) -> dict:
    """Squared distances to ``w#`` in the metrics of the convergence theorems.

    Always: ``x_dist_sq``, ``y_dist_sq``.  ``dual_accel``: ``y_Y0`` with
    weights ``1/(p_i sigma_i) + 2 mu_i (1/p_i - 1)`` at the initial steps.
    ``linear``: ``x_X`` (weight ``1/tau + 2 mu_g``), ``y_Y`` (weights
    ``(1/sigma_i + 2 mu_i)/p_i``) and, given ``gamma_sq``, the Lyapunov value
    ``(1 - gamma_sq theta) x_X + y_Y``.
    """
    x, y = w
    dx = _sq(np.asarray(x) - ref.x)
    dy = np.array([_sq(np.asarray(a) - b) for a, b in zip(y, ref.y)])
    out = {"x_dist_sq": dx, "y_dist_sq": float(dy.sum())}
    p = plan.sampling.marginals
    mu = problem.mu
    if plan.variant == "dual_accel":
        s0 = da_sigma(plan.sigma_tilde, mu, p)
        out["y_Y0"] = float(np.sum((1 / (p * s0) + 2 * mu * (1 / p - 1)) * dy))
    elif plan.variant == "linear":
        sig = np.asarray(plan.sigma)
        out["x_X"] = (1 / plan.tau + 2 * problem.mu_g) * dx
        out["y_Y"] = float(np.sum((1 / sig + 2 * mu) / p * dy))
        if gamma_sq is not None:
            out["lyapunov"] = (1 - gamma_sq * plan.theta) * out["x_X"] + out["y_Y"]
    return out


def dual_accel_bound(sigma_tilde_k, sigma_tilde_0: float, c0: float):
    """``(sigma_tilde_K / sigma_tilde_0)^2 * c0`` bounding ``E ||y^K - y#||^2_{Y_0}``.

    ``c0 = ||x0 - x#||^2 / tau_0 + ||y0 - y#||^2_{Y_0}``.  Since
    ``K sigma_tilde_K -> 1`` this decays like ``c0 / (sigma_tilde_0 K)^2``.
    """
    return (np.asarray(sigma_tilde_k, dtype=float) / sigma_tilde_0) ** 2 * c0


def activation_index(iterations, values, bounds) -> int | None:
    """Smallest recorded ``K`` from which ``values <= bounds`` holds for every later record."""
    iterations, values, bounds = (np.asarray(a, dtype=float) for a in (iterations, values, bounds))
    ok = values <= bounds
    if not ok[-1]:
        return None
    bad = np.flatnonzero(~ok)
    j = 0 if bad.size == 0 else bad[-1] + 1
    return int(iterations[j])


def fit_rate(k, values, window=None, mode: str = "power") -> float:
    """Least-squares rate of a positive series.

    ``mode="power"``: slope of ``log(value)`` against ``log(k)``.
    ``mode="linear"``: contraction factor ``exp(slope)`` of ``log(value)`` against ``k``.
    ``window`` is an inclusive ``(k_min, k_max)`` range.  Nonpositive values are
    dropped with a warning.
    """
    k = np.asarray(k, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is not None:
        sel = (k >= window[0]) & (k <= window[1])
        k, v = k[sel], v[sel]
    good = np.isfinite(v) & (v > 0)
    if mode == "power":
        good &= k > 0
    if not good.all():
        warnings.warn(f"fit_rate dropped {int((~good).sum())} nonpositive or non-finite points")
        k, v = k[good], v[good]
    if k.size < 10:
        raise ValueError(f"fit_rate needs at least 10 points, got {k.size}")
    if mode == "power":
        return float(np.polyfit(np.log(k), np.log(v), 1)[0])
    if mode == "linear":
        return float(np.exp(np.polyfit(k, np.log(v), 1)[0]))
    raise ValueError(f"unknown mode {mode!r}")
