"""Desk-scale experiments, run configs, metric tables and the command line.

Experiments
-----------
``scalar_toy``
    ``x`` in R, ``g = x^2/2``, ``A_i x = a_i x``; ``absdev`` uses ``f_i(z) = |z - c_i|``
    with random ``a_i, c_i``, ``quadratic`` uses ``f_i(z) = z^2/2`` and ``a_i = 1``
    (saddle point at the origin, all condition numbers equal).
``tv_denoise``
    ``g = ||x - b||^2 / (2 alpha)``, two blocks ``||grad_i x||_1``.
``pet_tv``
    KL data terms over interleaved angle subsets of a toy parallel-beam
    projector, ``g = alpha TV + nonnegativity`` with an FGP prox.
``huber_deblur``
    smoothed KL after a motion blur plus two Huberized gradient blocks,
    ``g`` the box ``[0, 100]``.
``pet_linear``
    smoothed KL over angle subsets, ``g = alpha TV + mu/2 ||x||^2 + nonnegativity``.

Problem data depend only on ``data_seed``; the run seeds drive sampling only,
so seed averages estimate expectations over the sampling.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .operators import BlockOperator, conv2d, grad2d, sparse_matrix_op, toy_radon, uncounted
from .planner import ConditionProfile, plan_importance, plan_optimal, plan_uniform, verify_plan
from .proxlib import (
    AddSquaredL2,
    BoxIndicator,
    HuberConjugate,
    Huber,
    KLConjugate,
    KLDivergence,
    L1Norm,
    SmoothedKL,
    SmoothedKLConjugate,
    SquaredL2DataFit,
    SquaredL2DataFitConjugate,
    TVProxFGP,
    l1_distance,
)
from .sampling import DATA_STREAM, eso_params, full_sampling, make_rng, serial_sampling, validate_eso
from .solvers import SaddleProblem, StepPlan, da_initial_steps, initial_step_sizes_general, run

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "Experiment",
    "load_config",
    "dump_config",
    "phantom",
    "motion_blur_kernel",
    "build",
    "build_scalar_toy",
    "build_tv_denoise",
    "build_pet_tv",
    "build_huber_deblur",
    "build_pet_linear",
    "make_plan",
    "get_reference",
    "run_seed",
    "run_experiment",
    "cli",
    "main",
    "CSV_HEADER",
]

CSV_HEADER = ("seed", "epoch", "iteration", "metric", "value")
OUT_ENV = "SPDHG_OUT"
EXPERIMENTS = ("scalar_toy", "tv_denoise", "pet_tv", "huber_deblur", "pet_linear")
SAMPLINGS = ("uniform", "full", "importance", "optimal", "explicit")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    name: str = ""
    # problem
    size: int = 32
    n: int = 2
    alpha: float | None = None
    mu: float | None = None
    eta: float = 1.0
    noise: float = 0.1
    angles: int = 20
    bins: int | None = None
    intensity: float = 1.0
    background: list | float = 1.0
    kernel_size: int = 5
    fgp_iters: int = 20
    toy: str = "absdev"
    data_seed: int = 0
    # solver
    variant: str = "plain"
    sampling: str = "uniform"
    probabilities: list | None = None
    gamma: float = 0.99
    rho: float = 0.99
    # run
    seeds: int = 20
    seed0: int = 0
    epochs: float = 100.0
    iterations: int | None = None
    record: str = "epoch"
    n_records: int = 40
    fit_window: list | None = None
    reference_tol: float = 1e-11
    reference_iters: int = 200_000
    reference_fgp_iters: int = 200
    workers: int = 1
    out: str = ""

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if not self.name:
            self.name = f"{self.experiment}_{self.variant}_{self.sampling}"
        if self.sampling not in SAMPLINGS:
            raise ConfigError(f"unknown sampling {self.sampling!r}; expected one of {SAMPLINGS}")
        if self.sampling == "explicit" and not self.probabilities:
            raise ConfigError("sampling = 'explicit' needs a probabilities list")
        for key in ("size", "n", "angles", "seeds", "fgp_iters", "n_records"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ("gamma", "rho", "eta", "intensity", "epochs"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        if not self.gamma < 1:
            raise ConfigError("gamma must be < 1")
        if self.record not in ("epoch", "log"):
            raise ConfigError("record must be 'epoch' or 'log'")
        bg = np.atleast_1d(np.asarray(self.background, dtype=float))
        if np.any(bg <= 0) and self.experiment in ("huber_deblur", "pet_linear"):
            raise ConfigError("the smoothed KL needs a positive background")
        if np.any(bg < 0):
            raise ConfigError("background must be nonnegative")

    def hash(self) -> str:
        """Digest of the fields that determine the problem data."""
        keys = ("experiment", "size", "n", "alpha", "mu", "eta", "noise", "angles", "bins",
                "intensity", "background", "kernel_size", "toy", "data_seed")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ENV, "results"))


_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_SECTIONS = ("problem", "solver", "run")

PAPER_SCALE = {
    "pet_tv": {"size": 250, "angles": 200, "alpha": 0.2},
    "tv_denoise": {"size": 331, "alpha": 0.12},
    "huber_deblur": {"size": 408, "kernel_size": 15},
    "pet_linear": {"size": 250, "angles": 200},
}


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a TOML run config.

    Keys live at top level or in one of the sections ``[problem]``,
    ``[solver]`` and ``[run]``; deeper nesting is rejected.
    """
    import tomli

    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    flat = {}
    for key, val in raw.items():
        if isinstance(val, dict):
            if key not in _SECTIONS:
                raise ConfigError(f"{path}: unknown section [{key}]; allowed: {_SECTIONS}")
            for k, v in val.items():
                if isinstance(v, dict):
                    raise ConfigError(f"{path}: nested table [{key}.{k}] is not allowed")
                flat[k] = v
        else:
            flat[key] = val
    flat.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(flat) - _FIELDS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    if "experiment" not in flat:
        raise ConfigError(f"{path}: missing key 'experiment'")
    try:
        return ExperimentConfig(**flat)
    except TypeError as err:
        raise ConfigError(f"{path}: {err}") from None


def dump_config(cfg: ExperimentConfig, path) -> None:
    import tomli_w

    data = {k: v for k, v in dataclasses.asdict(cfg).items() if v is not None}
    Path(path).write_text(tomli_w.dumps(data))


def scale_config(cfg: ExperimentConfig, scale: str) -> ExperimentConfig:
    if scale == "desk":
        return cfg
    if scale != "paper":
        raise ConfigError(f"unknown scale {scale!r}")
    return dataclasses.replace(cfg, **PAPER_SCALE.get(cfg.experiment, {}))


# ---------------------------------------------------------------- data


def phantom(shape, intensity: float = 1.0) -> np.ndarray:
    """Piecewise-constant test image with values in ``[0, intensity]``."""
    h, w = shape
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    img = np.zeros((h, w))
    img[(xx / 0.85) ** 2 + (yy / 0.9) ** 2 <= 1] = 0.3
    img[(xx + 0.3) ** 2 + (yy + 0.25) ** 2 <= 0.25 ** 2] = 1.0
    img[(np.abs(xx - 0.35) <= 0.2) & (np.abs(yy - 0.3) <= 0.12)] = 0.6
    img[(xx - 0.25) ** 2 + (yy + 0.4) ** 2 <= 0.12 ** 2] = 0.8
    return intensity * img


def motion_blur_kernel(k: int) -> np.ndarray:
    """Normalized diagonal line of length ``k``."""
    ker = np.zeros((k, k))
    idx = np.arange(k)
    ker[idx, idx] = 1.0
    ker[idx[:-1], idx[1:]] = 0.5
    return ker / ker.sum()


@dataclass
class Experiment:
    problem: SaddleProblem
    truth: np.ndarray | None = None
    data: dict = field(default_factory=dict)


def _background(cfg, n):
    bg = np.atleast_1d(np.asarray(cfg.background, dtype=float))
    if bg.size == 1:
        return np.full(n, bg[0])
    if bg.size != n:
        raise ConfigError(f"background has {bg.size} entries for {n} blocks")
    return bg


def build_scalar_toy(cfg: ExperimentConfig, **_) -> Experiment:
    rng = make_rng(cfg.data_seed, DATA_STREAM)
    a = rng.uniform(0.5, 2.0, cfg.n)
    if cfg.toy == "quadratic":
        a = np.ones(cfg.n)
    rows = [sparse_matrix_op([(0, 0, ai)], (1,), (1,)) for ai in a]
    A = BlockOperator(rows)
    g = SquaredL2DataFit(np.zeros(1), 1.0)
    if cfg.toy == "quadratic":
        # shifted so that the zero start is not the saddle point
        g = SquaredL2DataFit(np.ones(1), 1.0)
        fc = [SquaredL2DataFitConjugate(np.zeros(1), 1.0) for _ in range(cfg.n)]
        f = [SquaredL2DataFit(np.zeros(1), 1.0) for _ in range(cfg.n)]
        c = np.zeros(cfg.n)
    elif cfg.toy == "absdev":
        c = rng.normal(0.0, 2.0, cfg.n)
        pairs = [l1_distance(np.array([ci])) for ci in c]
        fc, f = [pr.conjugate for pr in pairs], [pr.primal for pr in pairs]
    else:
        raise ConfigError(f"unknown toy {cfg.toy!r}")
    return Experiment(SaddleProblem(A, fc, g, f, name="scalar_toy"), None, {"a": a, "c": c})


def build_tv_denoise(cfg: ExperimentConfig, **_) -> Experiment:
    if cfg.n != 2:
        raise ConfigError("tv_denoise has exactly two dual blocks (horizontal and vertical)")
    shape = (cfg.size, cfg.size)
    alpha = 0.12 if cfg.alpha is None else cfg.alpha
    truth = phantom(shape, cfg.intensity)
    b = truth + cfg.noise * cfg.intensity * make_rng(cfg.data_seed, DATA_STREAM).standard_normal(shape)
    A = BlockOperator([grad2d(shape, "horizontal"), grad2d(shape, "vertical")])
    fc = [BoxIndicator(-1.0, 1.0) for _ in range(2)]
    f = [L1Norm(1.0) for _ in range(2)]
    return Experiment(SaddleProblem(A, fc, SquaredL2DataFit(b, alpha), f, name="tv_denoise"), truth, {"b": b})


def _pet_data(cfg):
    if cfg.size < 16:
        raise ConfigError("PET experiments need an image size of at least 16")
    shape = (cfg.size, cfg.size)
    radon = toy_radon(shape, cfg.angles, cfg.bins or cfg.size)
    try:
        rows = radon.blocks(cfg.n)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    truth = phantom(shape, cfg.intensity)
    bg = _background(cfg, cfg.n)
    rng = make_rng(cfg.data_seed, DATA_STREAM)
    means = [r.apply(truth) + bgi for r, bgi in zip(rows, bg)]
    b = [rng.poisson(m).astype(float) for m in means]
    r = [np.full(m.shape, bgi) for m, bgi in zip(means, bg)]
    return shape, rows, truth, b, r


def build_pet_tv(cfg: ExperimentConfig, fgp_iters: int | None = None) -> Experiment:
    shape, rows, truth, b, r = _pet_data(cfg)
    alpha = 0.2 if cfg.alpha is None else cfg.alpha
    g = TVProxFGP(alpha, nonneg=True, iters=fgp_iters or cfg.fgp_iters)
    fc = [KLConjugate(bi, ri) for bi, ri in zip(b, r)]
    f = [KLDivergence(bi, ri) for bi, ri in zip(b, r)]
    return Experiment(SaddleProblem(BlockOperator(rows), fc, g, f, name="pet_tv"), truth, {"b": b, "r": r})


def build_huber_deblur(cfg: ExperimentConfig, **_) -> Experiment:
    if cfg.n != 3:
        raise ConfigError("huber_deblur has exactly three blocks (blur and two gradients)")
    shape = (cfg.size, cfg.size)
    alpha = 0.1 if cfg.alpha is None else cfg.alpha
    truth = phantom(shape, 100.0 * cfg.intensity)
    blur = conv2d(motion_blur_kernel(cfg.kernel_size), shape)
    bg = float(_background(cfg, 1)[0])
    mean = blur.apply(truth) + bg
    b = make_rng(cfg.data_seed, DATA_STREAM).poisson(mean).astype(float)
    if np.any(b <= 0):
        raise ConfigError("zero counts in the blurred data; raise the background")
    r = np.full(shape, bg)
    A = BlockOperator([blur, grad2d(shape, "horizontal"), grad2d(shape, "vertical")])
    fc = [SmoothedKLConjugate(b, r), HuberConjugate(alpha, cfg.eta), HuberConjugate(alpha, cfg.eta)]
    f = [SmoothedKL(b, r), Huber(alpha, cfg.eta), Huber(alpha, cfg.eta)]
    g = BoxIndicator(0.0, 100.0)
    return Experiment(SaddleProblem(A, fc, g, f, name="huber_deblur"), truth, {"b": b, "r": r})


def build_pet_linear(cfg: ExperimentConfig, fgp_iters: int | None = None) -> Experiment:
    shape, rows, truth, b, r = _pet_data(cfg)
    if any(np.any(bi <= 0) for bi in b):
        raise ConfigError("zero counts in the sinogram; the smoothed KL needs b > 0, raise the background")
    alpha = 0.05 if cfg.alpha is None else cfg.alpha
    mu = 0.5 if cfg.mu is None else cfg.mu
    g = AddSquaredL2(TVProxFGP(alpha, nonneg=True, iters=fgp_iters or cfg.fgp_iters), mu)
    fc = [SmoothedKLConjugate(bi, ri) for bi, ri in zip(b, r)]
    f = [SmoothedKL(bi, ri) for bi, ri in zip(b, r)]
    return Experiment(SaddleProblem(BlockOperator(rows), fc, g, f, name="pet_linear"), truth, {"b": b, "r": r})


BUILDERS = {
    "scalar_toy": build_scalar_toy,
    "tv_denoise": build_tv_denoise,
    "pet_tv": build_pet_tv,
    "huber_deblur": build_huber_deblur,
    "pet_linear": build_pet_linear,
}


def build(cfg: ExperimentConfig, reference: bool = False) -> Experiment:
    """Fresh problem instance; ``reference=True`` uses more inner FGP iterations."""
    kw = {"fgp_iters": cfg.reference_fgp_iters} if reference else {}
    return BUILDERS[cfg.experiment](cfg, **kw)


# ---------------------------------------------------------------- planning


def profile_of(problem: SaddleProblem, rho: float) -> ConditionProfile:
    return ConditionProfile(problem.mu_g, tuple(problem.mu), tuple(problem.block_norms()), rho)


def make_plan(cfg: ExperimentConfig, problem: SaddleProblem) -> StepPlan:
    """Step sizes for the configured variant and sampling."""
    n = problem.n
    if cfg.variant == "linear":
        planners = {"uniform": plan_uniform, "importance": plan_importance, "optimal": plan_optimal}
        if cfg.sampling not in planners:
            raise ConfigError(f"the linear variant plans 'uniform', 'importance' or 'optimal', not {cfg.sampling!r}")
        return planners[cfg.sampling](profile_of(problem, cfg.rho), n)
    if cfg.sampling == "full":
        smp = full_sampling(n)
    elif cfg.sampling == "uniform":
        smp = serial_sampling(np.full(n, 1.0 / n))
    elif cfg.sampling == "explicit":
        smp = serial_sampling(cfg.probabilities)
    else:
        raise ConfigError(f"sampling {cfg.sampling!r} is only planned for the linear variant")
    if cfg.variant == "dual_accel":
        if smp.kind == "full":
            tau0 = cfg.gamma / problem.norm()
            st = float(problem.mu.min()) / problem.norm()
        else:
            tau0, st = da_initial_steps(problem.block_norms(), problem.mu, smp.marginals)
            tau0 = tau0 if smp.n > 1 else cfg.gamma * tau0
        return StepPlan(tau0, None, 1.0, smp, "dual_accel", sigma_tilde=st)
    norms = problem.block_norms() if smp.kind == "serial" else problem.norm()
    tau, sigma = initial_step_sizes_general(problem.A, smp, cfg.gamma, norms=norms)
    return StepPlan(tau, tuple(sigma), 1.0, smp, cfg.variant)


# ---------------------------------------------------------------- references


def _reference_path(cfg):
    return cfg.out_dir / f"{cfg.experiment}_{cfg.hash()}.reference"


def _analytic_reference(cfg, exp):
    """Closed-form saddle points of the scalar toys."""
    if cfg.experiment != "scalar_toy":
        return None
    a, c = exp.data["a"], exp.data["c"]
    if cfg.toy == "quadratic":
        # x - 1 + sum_i y_i = 0 and y_i = x
        s = 1.0 / (1 + a.size)
        return dg.SaddleReference(np.array([s]), [np.array([s]) for _ in a], 0.0, 0.0, {"analytic": True})
    # minimize x^2/2 + sum |a_i x - c_i|: piecewise quadratic, check kinks and smooth pieces
    cands = list(c / a)
    kinks = np.sort(c / a)
    edges = np.concatenate([[-np.inf], kinks, [np.inf]])
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid = (lo + hi) / 2 if np.isfinite(lo) and np.isfinite(hi) else (hi - 1 if np.isfinite(hi) else lo + 1)
        s = np.sign(a * mid - c)
        xs = -float(np.sum(a * s))
        if lo <= xs <= hi:
            cands.append(xs)
    obj = [0.5 * x * x + np.sum(np.abs(a * x - c)) for x in cands]
    xs = float(cands[int(np.argmin(obj))])
    # dual: y_i = sign(a_i x - c_i) off the kink; on a kink solve x + sum a_i y_i = 0
    y = np.sign(a * xs - c)
    on = np.isclose(a * xs, c, rtol=0, atol=1e-12)
    if on.any():
        rest = -xs - np.sum(a[~on] * y[~on])
        j = np.flatnonzero(on)
        y[j] = rest / np.sum(a[j]) if j.size else 0.0
        y[j[0]] = np.clip(y[j[0]], -1, 1)
    return dg.SaddleReference(np.array([xs]), [np.array([yi]) for yi in y], 0.0, 0.0, {"analytic": True})


def get_reference(cfg: ExperimentConfig, exp: Experiment | None = None, refresh: bool = False,
                  persist: bool = True) -> dg.SaddleReference:
    """Saddle reference for the config's problem data, cached on disk."""
    exp = exp or build(cfg, reference=True)
    ana = _analytic_reference(cfg, exp)
    if ana is not None:
        return ana
    path = _reference_path(cfg)
    ref_problem = build(cfg, reference=True).problem
    if not refresh and Path(f"{path}.npy").exists():
        try:
            return dg.SaddleReference.load(path, ref_problem)
        except dg.SaddleReferenceError as err:
            warnings.warn(f"stale reference {path}: {err}; recomputing")
    ref = dg.SaddleReference.compute(ref_problem, tol=cfg.reference_tol, max_iter=cfg.reference_iters)
    ref.meta["config_hash"] = cfg.hash()
    if persist:
        path.parent.mkdir(parents=True, exist_ok=True)
        ref.save(path)
    return ref


# ---------------------------------------------------------------- running


def _iterations(cfg, plan):
    if cfg.iterations is not None:
        return int(cfg.iterations)
    return max(1, int(round(cfg.epochs * plan.sampling.iterations_per_epoch)))


def _checkpoints(cfg, plan, K):
    if cfg.record == "log":
        pts = {int(k) for k in np.round(np.logspace(0, np.log10(K), cfg.n_records))}
        decades = {10 ** j for j in range(int(np.log10(K)) + 1)}
        return sorted({0, K} | pts | decades)
    return None


def _metric_callback(cfg, exp, ref, plan, phi_ref, phi_0, c1, gamma_sq, c_dual):
    problem = exp.problem
    q = ref.subgradient(problem)
    has_f = problem.f is not None

    def cb(k, epoch, state):
        out = {}
        w = (state.x, state.y)
        out["gap"] = dg.bregman_gap(w, ref, problem, q)
        if k > 0:
            out["ergodic_gap"] = dg.bregman_gap(state.ergodic(), ref, problem, q)
            if c1 is not None:
                out["theorem1_bound"] = c1 / k
        out.update(dg.metric_distances(w, ref, plan, problem, gamma_sq))
        if has_f:
            phi = problem.objective(state.x)
            out["objective"] = phi
            if phi_ref is not None and phi_0 > phi_ref:
                out["rel_objective"] = (phi - phi_ref) / (phi_0 - phi_ref)
        if plan.variant in ("primal_accel", "dual_accel"):
            out["tau"] = state.tau
        if plan.variant == "dual_accel":
            out["sigma_tilde"] = state.sigma_tilde
            out["dual_bound"] = float(dg.dual_accel_bound(state.sigma_tilde, plan.sigma_tilde, c_dual))
        if plan.variant == "linear":
            out["lyapunov_bound"] = plan.theta ** k * c_dual
        return out

    return cb


def run_seed(cfg: ExperimentConfig, seed: int, ref: dg.SaddleReference | None = None):
    """One seeded run; returns ``(rows, info)`` with rows ``(seed, epoch, iteration, metric, value)``."""
    exp = build(cfg)
    problem = exp.problem
    ref = ref if ref is not None else get_reference(cfg)
    plan = make_plan(cfg, problem)
    K = _iterations(cfg, plan)
    x0, y0 = problem.zeros()
    phi_ref = phi_0 = None
    if problem.f is not None:
        phi_ref = problem.objective(ref.x)
        phi_0 = problem.objective(x0)
    p = plan.sampling.marginals
    c1 = None
    if plan.variant == "plain":
        c1 = dg.theorem1_constant(x0, y0, ref, plan.tau, plan.sigma, p, problem)
    gamma_sq = c_dual = None
    if plan.variant == "linear":
        v = eso_params(plan.sampling, problem.A, plan.tau, plan.sigma, norms=problem.block_norms())
        gamma_sq = v.gamma_sq
        m = dg.metric_distances((x0, y0), ref, plan, problem)
        c_dual = m["x_X"] + m["y_Y"]
    if plan.variant == "dual_accel":
        m = dg.metric_distances((x0, y0), ref, plan, problem)
        c_dual = m["x_dist_sq"] / plan.tau + m["y_Y0"]
    cb = _metric_callback(cfg, exp, ref, plan, phi_ref, phi_0, c1, gamma_sq, c_dual)
    problem.A.reset_counters()
    res = run(problem, plan, K, x0, y0, callbacks=[cb], at=_checkpoints(cfg, plan, K), seed=seed)
    rows = []
    for rec in res.records:
        for key, val in rec.items():
            if key in ("iteration", "epoch"):
                continue
            rows.append((seed, rec["epoch"], rec["iteration"], key, float(val)))
    info = {"plan": plan.to_dict(), "iterations": K, "evaluations": res.evaluations,
            "iterations_per_epoch": res.iterations_per_epoch, "theorem1_constant": c1,
            "initial_metric": c_dual, "gamma_sq": gamma_sq}
    return rows, info


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for seed, epoch, it, key, val in rows:
            w.writerow((seed, repr(float(epoch)), it, key, repr(float(val))))


def _seed_job(args):
    cfg, seed, ref = args
    return run_seed(cfg, seed, ref)


def summarize(rows, cfg: ExperimentConfig, info: dict) -> dict:
    """Seed means per metric and fitted rates over ``cfg.fit_window`` (iterations)."""
    by = {}
    for seed, epoch, it, key, val in rows:
        by.setdefault(key, {}).setdefault(it, []).append(val)
    means = {}
    for key, d in by.items():
        its = np.array(sorted(d))
        means[key] = (its, np.array([np.mean(d[i]) for i in its]))
    fits = {}
    window = tuple(cfg.fit_window) if cfg.fit_window else None
    for key in ("ergodic_gap", "x_dist_sq", "y_Y0", "y_dist_sq", "lyapunov", "rel_objective"):
        if key not in means:
            continue
        its, vals = means[key]
        mode = "linear" if key == "lyapunov" else "power"
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fits[key] = dg.fit_rate(its, vals, window, mode)
        except ValueError:
            pass
    return {
        "name": cfg.name,
        "experiment": cfg.experiment,
        "variant": cfg.variant,
        "seeds": cfg.seeds,
        "fit_window": list(window) if window else None,
        "fits": fits,
        "info": info,
        "final_means": {k: float(v[1][-1]) for k, v in means.items()},
    }


def run_experiment(cfg: ExperimentConfig, ref: dg.SaddleReference | None = None) -> dict:
    """Run every seed, write ``<name>.csv`` and ``<name>.summary.json`` to ``cfg.out_dir``."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ref = ref if ref is not None else get_reference(cfg)
    seeds = [cfg.seed0 + s for s in range(cfg.seeds)]
    jobs = [(cfg, s, ref) for s in seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_seed_job, jobs))
    else:
        results = [_seed_job(j) for j in jobs]
    seed_dir = out / f"{cfg.name}.seeds"
    seed_dir.mkdir(exist_ok=True)
    all_rows = []
    for s, (rows, _) in zip(seeds, results):
        _write_rows(seed_dir / f"seed_{s}.csv", rows)
        all_rows.extend(rows)
    _write_rows(out / f"{cfg.name}.csv", all_rows)
    info = results[0][1]
    summary = summarize(all_rows, cfg, info)
    summary["files"] = {"table": str(out / f"{cfg.name}.csv")}
    (out / f"{cfg.name}.summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=float))
    return summary


# ---------------------------------------------------------------- CLI


def _config_from_args(args):
    path = args.config_opt or args.config
    if not path:
        raise ConfigError("no config given; pass a path or --config PATH")
    over = {"seeds": args.seeds, "out": args.out, "workers": getattr(args, "workers", None)}
    cfg = load_config(path, **over)
    return scale_config(cfg, args.scale)


def _cmd_run(cfg, args):
    summary = run_experiment(cfg)
    print(json.dumps({"name": summary["name"], "fits": summary["fits"],
                      "table": summary["files"]["table"]}, indent=1))


def _cmd_plan(cfg, args):
    exp = build(cfg)
    problem = exp.problem
    if problem.mu_g > 0 and np.all(problem.mu > 0):
        profile = profile_of(problem, cfg.rho)
        print(f"kappa: {np.array2string(profile.kappa, precision=4)}")
        thetas = {}
        for name, fn in (("uniform", plan_uniform), ("importance", plan_importance), ("optimal", plan_optimal)):
            pl = fn(profile)
            thetas[name] = pl.theta
            print(f"[{name}] theta = {pl.theta:.12g}  tau = {pl.tau:.6g}")
            print(f"  sigma = {np.array2string(np.array(pl.sigma), precision=6)}")
            print(f"  p     = {np.array2string(pl.sampling.marginals, precision=6)}")
            rep = verify_plan(pl, profile)
            print(f"  verify_plan: {'ok' if rep.ok else 'FAILED'}")
            for f in rep.failures:
                print(f"    {f}")
        if abs(thetas["uniform"] - thetas["optimal"]) <= 1e-12:
            print("theta_uniform = theta_optimal (equal condition numbers)")
    plan = make_plan(cfg, problem)
    print(f"[configured] {json.dumps(plan.to_dict())}")


def _cmd_validate_eso(cfg, args):
    exp = build(cfg)
    problem = exp.problem
    plan = make_plan(cfg, problem)
    if plan.variant == "dual_accel":
        from .solvers import da_sigma
        sigma = da_sigma(plan.sigma_tilde, problem.mu, plan.sampling.marginals)
    else:
        sigma = np.array(plan.sigma)
    norms = problem.block_norms() if plan.sampling.kind == "serial" else None
    v = eso_params(plan.sampling, problem.A, plan.tau, sigma, norms=norms)
    rep = validate_eso(plan.sampling, problem.A, plan.tau, sigma, v, trials=args.trials, probes=args.probes)
    print(f"sampling: {plan.sampling.kind}  v = {np.array2string(v.v, precision=6)}  "
          f"p = {np.array2string(plan.sampling.marginals, precision=6)}")
    print(f"max ratio = {rep.max_ratio:.12g}  ({'ok' if rep.ok else 'VIOLATED'})")
    if not rep.ok:
        print(rep.message)
        return 1
    return 0


def _cmd_reference(cfg, args):
    ref = get_reference(cfg, refresh=True)
    print(f"reference for {cfg.experiment}: residual {ref.residual:.3e} "
          f"({ref.meta.get('iterations', 0)} iterations) -> {_reference_path(cfg)}")


def _parser():
    ap = argparse.ArgumentParser(prog="spdhg", description="Stochastic primal-dual experiments.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="{run,plan,validate-eso,reference}")

    def common(p):
        p.add_argument("config", nargs="?", help="TOML run config")
        p.add_argument("--config", dest="config_opt", metavar="PATH", help="TOML run config")
        p.add_argument("--seeds", type=int, help="number of seeds (overrides the config)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./results)")
        p.add_argument("--scale", choices=("desk", "paper"), default="desk")
        return p

    common(sub.add_parser("run", help="run an experiment")).add_argument("--workers", type=int)
    common(sub.add_parser("plan", help="print planned step sizes"))
    v = common(sub.add_parser("validate-eso", help="check the ESO inequality for the configured plan"))
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--probes", type=int, default=10)
    common(sub.add_parser("reference", help="compute and store the saddle reference"))
    return ap


def cli(argv=None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    try:
        cfg = _config_from_args(args)
        cmd = {"run": _cmd_run, "plan": _cmd_plan, "validate-eso": _cmd_validate_eso,
               "reference": _cmd_reference}[args.command]
        status = cmd(cfg, args)
    except (ConfigError, dg.SaddleReferenceError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return int(status or 0)


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
