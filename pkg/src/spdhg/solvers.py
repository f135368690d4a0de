"""Primal-dual iterations for ``min_x max_y sum_i <A_i x, y_i> - f_i*(y_i) + g(x)``.

The stochastic engine updates only the sampled dual blocks and keeps
``A* y`` and ``A* y_bar`` in a cache, so one iteration costs exactly one
``A_i`` and one ``A_i*`` per sampled block.  Four variants share it:

``plain``
    constant steps and extrapolation ``theta`` (``theta = 1`` in the convex case)
``linear``
    same iteration with ``theta < 1`` from the planner (strongly convex case)
``primal_accel``
    ``theta_k = (1 + 2 mu_g tau_k)^-1/2``, ``tau <- theta tau``, ``sigma <- sigma / theta``
``dual_accel``
    ``sigma_i`` derived from a scalar ``sigma_tilde``, ``theta_k = (1 + 2 sigma_tilde_k)^-1/2``,
    ``tau <- tau / theta``, ``sigma_tilde <- theta sigma_tilde``

Parameters are updated after the prox steps and before the extrapolation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .operators import BlockOperator, op_norm, safe_norm, uncounted
from .proxlib import ProxFunction
from .sampling import Sampling, draw, eso_params, make_rng

__all__ = [
    "DivergenceError",
    "ConfigurationError",
    "CacheDriftWarning",
    "SaddleProblem",
    "StepPlan",
    "SolverState",
    "RunResult",
    "VARIANTS",
    "init_state",
    "adjoint_cache_update",
    "spdhg_step",
    "pa_spdhg_step",
    "da_spdhg_step",
    "step",
    "run",
    "pdhg",
    "check_plan",
    "da_sigma",
    "initial_step_sizes_general",
    "da_initial_steps",
]

VARIANTS = ("plain", "linear", "primal_accel", "dual_accel")


class DivergenceError(FloatingPointError):
    """Non-finite iterate; ``state`` holds the last finite state."""

    def __init__(self, iteration: int, state=None, what: str = "iterate"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration
        self.state = state


class ConfigurationError(ValueError):
    pass


class CacheDriftWarning(RuntimeWarning):
    pass


@dataclass
class SaddleProblem:
    """``Psi(x, y) = sum_i <A_i x, y_i> - f_i*(y_i) + g(x)``.

    ``f`` optionally holds the primal data terms ``f_i`` so that the objective
    ``g(x) + sum_i f_i(A_i x)`` can be reported.
    """

    A: BlockOperator
    f_conj: Sequence[ProxFunction]
    g: ProxFunction
    f: Sequence[ProxFunction] | None = None
    name: str = "problem"
    _norms: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.f_conj = list(self.f_conj)
        if len(self.f_conj) != len(self.A):
            raise ValueError(f"{len(self.f_conj)} dual functions for {len(self.A)} operator rows")
        if self.f is not None:
            self.f = list(self.f)
            if len(self.f) != len(self.A):
                raise ValueError("need one primal data term per block")

    @property
    def n(self) -> int:
        return len(self.A)

    @property
    def mu_g(self) -> float:
        return float(self.g.mu)

    @property
    def mu(self) -> np.ndarray:
        return np.array([float(fc.mu) for fc in self.f_conj])

    def block_norms(self, tol: float = 1e-10) -> np.ndarray:
        """Over-relaxed estimates of ``||A_i||``, cached and not counted as work."""
        if ("blocks", tol) not in self._norms:
            with uncounted(self.A):
                est = [safe_norm(op_norm(a, tol=tol), tol) for a in self.A]
            self._norms[("blocks", tol)] = np.array(est)
        return self._norms[("blocks", tol)]

    def norm(self, tol: float = 1e-10) -> float:
        """Over-relaxed estimate of ``||A||``."""
        if ("full", tol) not in self._norms:
            with uncounted(self.A):
                self._norms[("full", tol)] = safe_norm(op_norm(self.A, tol=tol), tol)
        return self._norms[("full", tol)]

    def objective(self, x) -> float:
        if self.f is None:
            raise ValueError("primal data terms f are not available")
        with uncounted(self.A):
            return self.g.value(x) + sum(fi.value(a.apply(x)) for fi, a in zip(self.f, self.A))

    def zeros(self):
        return np.zeros(self.A.in_shape.dims), self.A.zeros_dual()


@dataclass(frozen=True)
class StepPlan:
    """Step sizes, extrapolation and sampling for one run.

    For ``dual_accel`` give ``sigma_tilde``; ``sigma`` is then derived from it
    and ``mu_i`` when the run starts.
    """

    tau: float
    sigma: tuple | None
    theta: float
    sampling: Sampling
    variant: str = "plain"
    sigma_tilde: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")
        if self.variant == "dual_accel":
            st = self.sigma_tilde
            if st is None or not st > 0:
                raise ConfigurationError("dual_accel needs sigma_tilde > 0")
            p = self.sampling.marginals
            part = p < 1
            bound = float(np.min(p[part] / (2 * (1 - p[part])))) if part.any() else np.inf
            if not st < bound:
                raise ConfigurationError(
                    f"sigma_tilde = {st!r} violates sigma_tilde < min_i p_i / (2 (1 - p_i)) = {bound!r}")
        else:
            if self.sigma is None:
                raise ConfigurationError("sigma is required")
            sig = tuple(float(s) for s in np.broadcast_to(np.asarray(self.sigma, dtype=float),
                                                         (self.sampling.n,)))
            if min(sig) <= 0:
                raise ConfigurationError("sigma_i must be positive")
            object.__setattr__(self, "sigma", sig)
        if self.variant in ("plain", "linear") and not 0 < self.theta <= 1:
            raise ConfigurationError("theta must lie in (0, 1]")

    @property
    def n(self) -> int:
        return self.sampling.n

    def to_dict(self) -> dict:
        d = {"variant": self.variant, "tau": self.tau, "theta": self.theta,
             "sampling": self.sampling.to_dict()}
        if self.sigma is not None:
            d["sigma"] = list(self.sigma)
        if self.sigma_tilde is not None:
            d["sigma_tilde"] = self.sigma_tilde
        return d


def da_sigma(sigma_tilde: float, mu, p) -> np.ndarray:
    """Dual steps ``sigma_tilde / (mu_i [p_i - 2 (1 - p_i) sigma_tilde])``."""
    mu, p = np.asarray(mu, dtype=float), np.asarray(p, dtype=float)
    return sigma_tilde / (mu * (p - 2 * (1 - p) * sigma_tilde))


@dataclass
class SolverState:
    """Iterates, caches and parameters of one run; exclusively owned by it."""

    x: np.ndarray
    y: list
    y_bar: list
    aty: np.ndarray
    aty_bar: np.ndarray
    tau: float
    sigma: np.ndarray
    theta: float
    rng: np.random.Generator
    sigma_tilde: float | None = None
    k: int = 0
    last_subset: tuple = ()
    x_sum: np.ndarray | None = None
    y_acc: list | None = None
    y_mark: np.ndarray | None = None

    def ergodic(self):
        """``(1/k) sum_{j=1..k} (x^j, y^j)``; the initial point when ``k = 0``."""
        if self.k == 0:
            return self.x.copy(), [yi.copy() for yi in self.y]
        ys = [(acc + yi * (self.k - m)) / self.k for acc, yi, m in zip(self.y_acc, self.y, self.y_mark)]
        return self.x_sum / self.k, ys


def init_state(problem: SaddleProblem, plan: StepPlan, x0=None, y0=None, seed: int = 0,
               rng: np.random.Generator | None = None) -> SolverState:
    """``y_bar^0 = y^0`` and ``A* y^0`` (free when ``y^0 = 0``)."""
    xz, yz = problem.zeros()
    x = xz if x0 is None else np.array(x0, dtype=float).reshape(xz.shape)
    y = yz if y0 is None else [np.array(b, dtype=float).reshape(z.shape) for b, z in zip(y0, yz, strict=True)]
    if any(np.any(b) for b in y):
        aty = problem.A.adjoint(y)
    else:
        aty = np.zeros_like(x)
    if plan.variant == "dual_accel":
        sigma = da_sigma(plan.sigma_tilde, problem.mu, plan.sampling.marginals)
    else:
        sigma = np.array(plan.sigma, dtype=float)
    return SolverState(
        x=x, y=y, y_bar=[b.copy() for b in y], aty=aty, aty_bar=aty.copy(), tau=float(plan.tau),
        sigma=sigma, theta=float(plan.theta), sigma_tilde=plan.sigma_tilde,
        rng=rng if rng is not None else make_rng(seed),
        x_sum=np.zeros_like(x), y_acc=[np.zeros_like(b) for b in y], y_mark=np.zeros(len(y), dtype=int))


def adjoint_cache_update(cache, A: BlockOperator, y_new, y_old, S, theta: float, p):
    """Return ``(A* y_bar_new, A* y_new)`` from ``cache = A* y_old``.

    ``A* y_bar_new = A* y_old + sum_{i in S} (1 + theta / p_i) A_i* (y_new_i - y_old_i)``;
    only the blocks in ``S`` are touched.
    """
    plain = np.array(cache, dtype=float, copy=True)
    corr = np.zeros_like(plain)
    for i in S:
        ad = A[i].adjoint(y_new[i] - y_old[i])
        plain += ad
        corr += (theta / p[i]) * ad
    return plain + corr, plain


def _theta_now(problem, state, plan):
    if plan.variant == "primal_accel":
        return 1.0 / np.sqrt(1 + 2 * problem.mu_g * state.tau)
    if plan.variant == "dual_accel":
        return 1.0 / np.sqrt(1 + 2 * state.sigma_tilde)
    return plan.theta


def _iterate(problem: SaddleProblem, state: SolverState, plan: StepPlan) -> SolverState:
    A, p = problem.A, plan.sampling.marginals
    tau = state.tau
    x_new = problem.g.prox(tau, state.x - tau * state.aty_bar)
    if not np.all(np.isfinite(x_new)):
        raise DivergenceError(state.k + 1, state, "primal iterate")
    S = draw(plan.sampling, state.rng)

    if plan.variant == "dual_accel":
        st = state.sigma_tilde
        sig = {i: st / (problem.f_conj[i].mu * (p[i] - 2 * (1 - p[i]) * st)) for i in S}
    else:
        sig = {i: state.sigma[i] for i in S}

    y_old = state.y
    y_new = list(y_old)
    for i in S:
        yi = problem.f_conj[i].prox(sig[i], y_old[i] + sig[i] * A[i].apply(x_new))
        if not np.all(np.isfinite(yi)):
            raise DivergenceError(state.k + 1, state, f"dual block {i}")
        y_new[i] = yi

    theta = _theta_now(problem, state, plan)
    state.aty_bar, state.aty = adjoint_cache_update(state.aty, A, y_new, y_old, S, theta, p)

    for i in state.last_subset:
        state.y_bar[i] = y_new[i]
    k = state.k
    for i in S:
        state.y_bar[i] = y_new[i] + (theta / p[i]) * (y_new[i] - y_old[i])
        state.y_acc[i] += y_old[i] * (k - state.y_mark[i])
        state.y_mark[i] = k
    state.y = y_new
    state.x = x_new
    state.x_sum += x_new
    state.last_subset = S
    state.theta = theta
    state.k = k + 1

    if plan.variant == "primal_accel":
        state.tau = tau * theta
        state.sigma = state.sigma / theta
    elif plan.variant == "dual_accel":
        state.tau = tau / theta
        state.sigma_tilde = theta * state.sigma_tilde
        state.sigma = da_sigma(state.sigma_tilde, problem.mu, p)
    return state


def spdhg_step(problem: SaddleProblem, state: SolverState, plan: StepPlan) -> SolverState:
    """One iteration with constant steps (``plain`` or ``linear`` plans)."""
    if plan.variant not in ("plain", "linear"):
        raise ConfigurationError(f"spdhg_step runs plain/linear plans, got {plan.variant!r}")
    return _iterate(problem, state, plan)


def pa_spdhg_step(problem: SaddleProblem, state: SolverState, plan: StepPlan) -> SolverState:
    """One primal-accelerated iteration; needs ``mu_g > 0``."""
    if plan.variant != "primal_accel":
        raise ConfigurationError(f"pa_spdhg_step needs a primal_accel plan, got {plan.variant!r}")
    if not problem.mu_g > 0:
        raise ConfigurationError("primal acceleration needs mu_g > 0; use the plain variant")
    return _iterate(problem, state, plan)


def da_spdhg_step(problem: SaddleProblem, state: SolverState, plan: StepPlan) -> SolverState:
    """One dual-accelerated iteration; needs every ``mu_i > 0``."""
    if plan.variant != "dual_accel":
        raise ConfigurationError(f"da_spdhg_step needs a dual_accel plan, got {plan.variant!r}")
    if np.any(problem.mu <= 0):
        raise ConfigurationError("dual acceleration needs mu_i > 0 for every block")
    return _iterate(problem, state, plan)


_STEPS = {"plain": spdhg_step, "linear": spdhg_step, "primal_accel": pa_spdhg_step,
          "dual_accel": da_spdhg_step}


def step(problem, state, plan):
    return _STEPS[plan.variant](problem, state, plan)


def check_plan(problem: SaddleProblem, plan: StepPlan) -> list[str]:
    """Violated convergence conditions of ``plan`` on ``problem`` (empty if none).

    ESO parameters come from :func:`eso_params`, so only full and serial
    samplings are checked; arbitrary samplings are accepted as given.
    """
    issues = []
    mu, p = problem.mu, plan.sampling.marginals
    if plan.variant == "primal_accel" and not problem.mu_g > 0:
        issues.append("primal acceleration needs mu_g > 0")
    if plan.variant == "dual_accel" and np.any(mu <= 0):
        issues.append("dual acceleration needs mu_i > 0 for every block")
        return issues
    if plan.variant == "linear":
        if not problem.mu_g > 0 or np.any(mu <= 0):
            issues.append("the linear-rate variant needs mu_g > 0 and mu_i > 0")
            return issues
        if not plan.theta >= 1 / (1 + 2 * problem.mu_g * plan.tau) * (1 - 1e-12):
            issues.append("theta < 1/(1 + 2 mu_g tau)")
        sig = np.array(plan.sigma)
        low = (1 + 2 * (1 - p) * mu * sig) / (1 + 2 * mu * sig)
        for i in np.flatnonzero(plan.theta < low * (1 - 1e-12)):
            issues.append(f"theta < (1 + 2(1-p_i) mu_i sigma_i)/(1 + 2 mu_i sigma_i) for block {i}")
    if plan.sampling.kind == "arbitrary":
        return issues
    sigma = (da_sigma(plan.sigma_tilde, mu, p) if plan.variant == "dual_accel" else np.array(plan.sigma))
    norms = problem.block_norms() if plan.sampling.kind == "serial" else None
    with uncounted(problem.A):
        v = eso_params(plan.sampling, problem.A, plan.tau, sigma, norms=norms).v
    if plan.variant == "linear":
        bad = v >= p / plan.theta
        rel = "v_i < p_i / theta"
    elif plan.variant == "dual_accel":
        bad = v > p * (1 + 1e-9)
        rel = "v_i <= p_i"
    else:
        bad = v >= p
        rel = "v_i < p_i"
    for i in np.flatnonzero(bad):
        issues.append(f"ESO condition {rel} fails for block {i}: v_i = {v[i]:.6g}, p_i = {p[i]:.6g}")
    return issues


@dataclass
class RunResult:
    state: SolverState
    records: list
    evaluations: int
    iterations_per_epoch: float

    def series(self, name: str):
        """``(iterations, values)`` of one recorded metric."""
        it = [r["iteration"] for r in self.records if name in r]
        return np.array(it), np.array([r[name] for r in self.records if name in r], dtype=float)


def _schedule(K, every, at):
    if at is not None:
        pts = sorted({int(k) for k in at if 0 <= k <= K})
    else:
        every = max(1, int(round(every)))
        pts = list(range(0, K + 1, every))
        if pts[-1] != K:
            pts.append(K)
    return pts


def run(problem: SaddleProblem, plan: StepPlan, K: int, x0=None, y0=None,
        callbacks: Iterable[Callable] = (), every: float | None = None, at=None, seed: int = 0,
        rng=None, validate_every: int = 0, check: bool = True) -> RunResult:
    """Run ``K`` iterations of ``plan.variant``.

    Each callback is called as ``cb(iteration, epoch, state)`` at iteration 0,
    every ``every`` iterations (default: one epoch) or at the iterations in
    ``at``, and returns a mapping of metric names to floats.  Callbacks must
    not mutate the state; operator work they do is not counted.
    ``validate_every > 0`` recomputes ``A* y`` periodically and repairs the
    cache if it drifted.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if check:
        issues = check_plan(problem, plan)
        if issues:
            raise ConfigurationError("; ".join(issues))
    state = init_state(problem, plan, x0, y0, seed=seed, rng=rng)
    ipe = plan.sampling.iterations_per_epoch
    pts = _schedule(K, ipe if every is None else every, at)
    callbacks = list(callbacks)
    records = []
    start = problem.A.evaluations

    def record():
        rec = {"iteration": state.k, "epoch": state.k / ipe}
        with uncounted(problem.A):
            for cb in callbacks:
                rec.update(cb(state.k, state.k / ipe, state))
        records.append(rec)

    nxt = 0
    if pts and pts[0] == 0:
        record()
        nxt = 1
    do_step = _STEPS[plan.variant]
    for _ in range(K):
        prev = _snapshot(state)
        try:
            do_step(problem, state, plan)
        except DivergenceError as err:
            err.state = prev
            raise
        if validate_every and state.k % validate_every == 0:
            _validate_cache(problem, state)
        if nxt < len(pts) and state.k == pts[nxt]:
            record()
            nxt += 1
    return RunResult(state, records, problem.A.evaluations - start, ipe)


def _snapshot(state):
    # cheap handle on the last finite iterate: arrays are replaced, not mutated, by a step
    return (state.k, state.x, list(state.y))


def _validate_cache(problem, state):
    with uncounted(problem.A):
        direct = problem.A.adjoint(state.y)
    err = np.linalg.norm(direct - state.aty)
    if err > 1e-8 * (1 + np.linalg.norm(direct)):
        warnings.warn(f"adjoint cache drifted by {err:.3e} at iteration {state.k}; refreshed",
                      CacheDriftWarning)
        state.aty_bar = state.aty_bar + (direct - state.aty)
        state.aty = direct


def pdhg(problem: SaddleProblem, tau: float, sigma, K: int, x0=None, y0=None, theta: float = 1.0,
         accel: str | None = None, tol: float = 0.0, callback: Callable | None = None):
    """Deterministic PDHG with all blocks updated every iteration.

    ``accel`` is ``None``, ``"primal"`` (needs ``mu_g > 0``) or ``"dual"``
    (``sigma`` is then the scalar ``sigma_tilde``).  Stops early once the
    relative fixed-point residual of an iteration drops below ``tol``.
    Returns ``(x, y, info)``.
    """
    A = problem.A
    x, y = problem.zeros()
    if x0 is not None:
        x = np.array(x0, dtype=float)
    if y0 is not None:
        y = [np.array(b, dtype=float) for b in y0]
    mu = problem.mu
    if accel == "dual":
        st = float(sigma)
        sig = st / mu
    else:
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (len(A),)).copy()
    aty_bar = A.adjoint(y)
    res = np.inf
    k = 0
    for k in range(1, K + 1):
        x_new = problem.g.prox(tau, x - tau * aty_bar)
        ax = A.apply(x_new)
        y_new = [fc.prox(s, yi + s * axi) for fc, s, yi, axi in zip(problem.f_conj, sig, y, ax)]
        if accel == "primal":
            th = 1 / np.sqrt(1 + 2 * problem.mu_g * tau)
        elif accel == "dual":
            th = 1 / np.sqrt(1 + 2 * st)
        else:
            th = theta
        y_bar = [yn + th * (yn - yo) for yn, yo in zip(y_new, y)]
        aty_bar = A.adjoint(y_bar)
        dx = np.linalg.norm(x_new - x)
        dy = np.sqrt(sum(np.vdot(a - b, a - b) for a, b in zip(y_new, y)))
        scale = 1 + np.linalg.norm(x_new) + np.sqrt(sum(np.vdot(b, b) for b in y_new))
        res = float((dx + dy) / scale)
        x, y = x_new, y_new
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k, None, "primal iterate")
        if accel == "primal":
            tau, sig = tau * th, sig / th
        elif accel == "dual":
            tau, st = tau / th, st * th
            sig = st / mu
        if callback is not None:
            callback(k, x, y)
        if res < tol:
            break
    return x, y, {"iterations": k, "residual": res, "tau": tau, "sigma": sig}


def initial_step_sizes_general(A: BlockOperator, sampling: Sampling, gamma: float = 0.99, norms=None):
    """Steps ``(tau, sigma)`` for the convex case.

    serial: ``sigma_i = gamma / ||A_i||`` and ``tau = gamma min_i p_i / ||A_i||``, which is
    ``gamma / (n max_i ||A_i||)`` for uniform probabilities and gives
    ``v_i = sigma_i tau ||A_i||^2 <= gamma^2 p_i``;
    full: ``sigma_i = tau = gamma / ||A||``.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1); gamma = 1 violates the strict ESO condition")
    if sampling.kind == "serial":
        if norms is None:
            with uncounted(A):
                norms = [safe_norm(op_norm(a)) for a in A]
        norms = np.asarray(norms, dtype=float)
        sigma = gamma / norms
        tau = gamma * float(np.min(sampling.marginals / norms))
        return tau, sigma
    if sampling.kind == "full":
        if norms is None:
            with uncounted(A):
                nrm = safe_norm(op_norm(A))
        else:
            nrm = float(norms)
        return gamma / nrm, np.full(len(A), gamma / nrm)
    raise ValueError(f"no step-size recipe for {sampling.kind} samplings")


def da_initial_steps(norms, mu, p, tau0: float | None = None):
    """``tau_0 = 1/(n max ||A_i||)`` and the largest ``sigma_tilde_0`` with ``v_i <= p_i``.

    ``sigma_tilde_0 = min_i mu_i p_i^2 / (tau_0 ||A_i||^2 + 2 mu_i p_i (1 - p_i))``.
    """
    norms, mu, p = (np.asarray(a, dtype=float) for a in (norms, mu, p))
    if tau0 is None:
        tau0 = 1.0 / (len(norms) * norms.max())
    st = float(np.min(mu * p ** 2 / (tau0 * norms ** 2 + 2 * mu * p * (1 - p))))
    return tau0, st
