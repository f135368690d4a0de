"""Acceptance criteria 1-9.

Each criterion is one test named ``test_criterion_<n>``; ``conftest.py`` prints
a PASS/FAIL line per criterion at the end of the session.  Checks inside a
criterion are collected first and asserted together, so the printed detail
always shows every measured number.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_matrix_problem
from oracles import textbook_pdhg
from proxcatalog import D, catalog, coord_oracle, pairs, samples
from spdhg import harness as H
from spdhg import proxlib as pl
from spdhg.diagnostics import activation_index, fit_rate
from spdhg.operators import BlockOperator, MatrixOp
from spdhg.planner import ConditionProfile, plan_importance, plan_optimal, plan_uniform, rate_zhang_xiao
from spdhg.sampling import (coupling_bound, eso_params, full_sampling, serial_sampling, uniform_serial,
                            validate_eso)
from spdhg.solvers import SaddleProblem, StepPlan, init_state, initial_step_sizes_general, spdhg_step

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


class Checks:
    def __init__(self, record_property, budget):
        self.record, self.budget = record_property, budget
        self.failed, self.notes = [], []
        self.t0 = time.perf_counter()

    def __call__(self, ok, note):
        self.notes.append(note)
        if not ok:
            self.failed.append(note)

    def finish(self):
        dt = time.perf_counter() - self.t0
        self(dt < self.budget, f"runtime {dt:.1f}s < {self.budget:g}s")
        self.record("detail", "; ".join(self.notes))
        assert not self.failed, "; ".join(self.failed)


@pytest.fixture(scope="module")
def out(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def seed_means(rows, metric):
    d = {}
    for seed, epoch, it, key, val in rows:
        if key == metric:
            d.setdefault(it, []).append(val)
    its = np.array(sorted(d))
    return its, np.array([np.mean(d[i]) for i in its])


def run_config(name, out, **over):
    cfg = H.load_config(CONFIGS / f"{name}.toml", out=str(out), **over)
    ref = H.get_reference(cfg)
    rows, info = [], None
    for s in range(cfg.seeds):
        r, info = H.run_seed(cfg, cfg.seed0 + s, ref)
        rows += r
    return cfg, rows, info


# ---------------------------------------------------------------- 1


def _nonsmooth_problem(rng):
    A = BlockOperator([MatrixOp(rng.standard_normal((3, 5))) for _ in range(4)])
    fc = [pl.BoxIndicator(-1.0, 1.0), pl.SquaredL2DataFitConjugate(rng.standard_normal(3), 0.5),
          pl.ShiftedBoxConjugate(rng.standard_normal(3), 0.7), pl.BoxIndicator(-0.3, 2.0)]
    return SaddleProblem(A, fc, pl.AddSquaredL2(pl.BoxIndicator(0.0, np.inf), 0.1))


def test_criterion_1_deterministic_reduction(record_property):
    c = Checks(record_property, 10)
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        prob = random_matrix_problem(rng, 3, 5, 2, 0.5, 0.3) if seed % 2 else _nonsmooth_problem(rng)
        M = [a.matrix.toarray() for a in prob.A]
        L = np.linalg.norm(np.vstack(M), 2)
        tau, sigma = 0.95 / L, np.full(prob.n, 0.95 / L)
        x0 = rng.standard_normal(5)
        y0 = [rng.standard_normal(m.shape[0]) for m in M]
        ref = textbook_pdhg(M, prob.g.prox, [fc.prox for fc in prob.f_conj], tau, sigma, x0, y0, 100)
        plan = StepPlan(tau, sigma, 1.0, full_sampling(prob.n))
        st = init_state(prob, plan, x0, y0)
        for k in range(100):
            spdhg_step(prob, st, plan)
            xr, yr = ref[k]
            worst = max(worst, np.max(np.abs(st.x - xr)), *(np.max(np.abs(a - b)) for a, b in zip(st.y, yr)))
    c(worst <= 1e-12, f"max discrepancy {worst:.1e} <= 1e-12 (10 problems x 100 iterations)")
    c.finish()


# ---------------------------------------------------------------- 2


@pytest.mark.slow
def test_criterion_2_ergodic_gap_rate(record_property, out):
    c = Checks(record_property, 300)
    for name in ("scalar_toy", "tv_denoise"):
        cfg, rows, info = run_config(name, out)
        assert cfg.seeds == 20 and cfg.sampling == "uniform" and cfg.variant == "plain"
        its, gap = seed_means(rows, "ergodic_gap")
        slope = fit_rate(its, gap, (100, 10_000))
        c(-1.3 <= slope <= -0.8, f"{name} slope {slope:.3f} in [-1.3, -0.8]")
        C = info["theorem1_constant"]
        for K in (100, 1000, 10_000):
            m = gap[its == K][0]
            bound = C / K * (1 + 3 / np.sqrt(cfg.seeds))
            c(m <= bound, f"{name} K={K}: {m:.3g} <= {bound:.3g}")
    c.finish()


# ---------------------------------------------------------------- 3


@pytest.mark.slow
def test_criterion_3_dual_accelerated_rate(record_property, out):
    c = Checks(record_property, 600)
    cfg, rows, info = run_config("huber_deblur_da", out)
    assert cfg.n == 3 and cfg.sampling == "uniform" and cfg.variant == "dual_accel"
    its, y_y0 = seed_means(rows, "y_Y0")
    _, bound = seed_means(rows, "dual_bound")
    k_act = activation_index(its, y_y0, bound)
    c(k_act is not None, f"bound active from K~={k_act}")
    K = its[-1]
    lo = max(k_act or 0, K // 10)
    slope = fit_rate(its, y_y0, (lo, K))
    c(-2.4 <= slope <= -1.7, f"slope {slope:.3f} in [-2.4, -1.7] over [{lo}, {K}]")
    if k_act is not None:
        sel = its >= k_act
        c(bool(np.all(y_y0[sel] <= bound[sel])), f"y_Y0 <= bound at all {int(sel.sum())} records K >= {k_act}")
    c.finish()


# ---------------------------------------------------------------- 4


@pytest.mark.slow
def test_criterion_4_primal_accelerated_rate(record_property, out):
    c = Checks(record_property, 300)
    cfg, rows, _ = run_config("tv_denoise_pa", out)
    assert cfg.variant == "primal_accel"
    its, xd = seed_means(rows, "x_dist_sq")
    slope = fit_rate(its, xd, tuple(cfg.fit_window))
    c(-2.4 <= slope <= -1.7, f"primal distance slope {slope:.3f} in [-2.4, -1.7]")
    c.finish()


# ---------------------------------------------------------------- 5


def _first_epoch(its, values, tol, ipe):
    hit = np.flatnonzero(values <= tol)
    return np.inf if hit.size == 0 else its[hit[0]] / ipe


@pytest.mark.slow
def test_criterion_5_linear_rate(record_property, out):
    c = Checks(record_property, 600)
    for name in ("pet_linear_uniform", "pet_linear_optimal"):
        cfg, rows, info = run_config(name, out)
        theta = info["plan"]["theta"]
        its, lyap = seed_means(rows, "lyapunov")
        rate = fit_rate(its, lyap, mode="linear")
        c(0.9 * theta <= rate < 1, f"{name} contraction {rate:.4f} in [{0.9 * theta:.4f}, 1)")
        K = its[-1]
        final, cap = lyap[-1], theta ** K * info["initial_metric"] * 1.1
        c(final <= cap, f"{name} final {final:.3g} <= theta^K init 1.1 = {cap:.3g}")
    epochs = {}
    for kind in ("uniform", "optimal"):
        cfg, rows, info = run_config(f"pet_linear_asym_{kind}", out)
        ipe = info["iterations_per_epoch"]
        its, rel = seed_means(rows, "rel_objective")
        _, xd = seed_means(rows, "x_dist_sq")
        _, yd = seed_means(rows, "y_dist_sq")
        w = (xd + yd) / (xd[0] + yd[0])
        epochs[kind] = (_first_epoch(its, rel, 1e-8, ipe), _first_epoch(its, w, 1e-8, ipe))
    for j, what in enumerate(("relative objective", "relative distance")):
        u, o = epochs["uniform"][j], epochs["optimal"][j]
        c(o <= u + 1e-9, f"asymmetric {what} 1e-8: optimal {o:.0f} <= uniform {u:.0f} epochs")
    c.finish()


# ---------------------------------------------------------------- 6


def test_criterion_6_planner(record_property):
    c = Checks(record_property, 1)
    sym = ConditionProfile.from_kappa([8, 8], rho=1.0)
    for f in (plan_uniform, plan_importance, plan_optimal):
        c(abs(f(sym).theta - 0.75) <= 1e-12, f"{f.__name__} theta {f(sym).theta!r}")
    opt = plan_optimal(sym)
    uni = plan_uniform(sym)
    c(np.allclose(opt.sampling.marginals, 0.5, rtol=0, atol=1e-12), "p_opt = (1/2, 1/2)")
    for p in (opt, uni):
        c(np.allclose(p.sigma, 0.5, rtol=0, atol=1e-12) and abs(p.tau - 1 / 6) <= 1e-12, "sigma = 1/2, tau = 1/6")
    asym = ConditionProfile.from_kappa([8, 99], rho=1.0)
    t_opt, t_uni = plan_optimal(asym).theta, plan_uniform(asym).theta
    c(abs(t_opt - (1 - 2 / 15)) <= 1e-12 and t_opt < t_uni, f"asymmetric theta_opt {t_opt:.12f} < {t_uni:.12f}")
    rng = np.random.default_rng(0)
    worst = -np.inf
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        prof = ConditionProfile.from_kappa(10 ** rng.uniform(-2, 4, n), mu_g=10 ** rng.uniform(-1, 1),
                                           mu=np.full(n, 10 ** rng.uniform(-1, 1)), rho=rng.uniform(0.5, 1))
        worst = max(worst, plan_uniform(prof).theta - rate_zhang_xiao(prof))
    c(worst <= 1e-12, f"max theta_uni - theta_ZX over 1000 profiles = {worst:.2e}")
    c.finish()


# ---------------------------------------------------------------- 7


def test_criterion_7_eso(record_property):
    c = Checks(record_property, 30)
    worst, halved_caught = 0.0, 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 5))
        A = BlockOperator([MatrixOp(rng.standard_normal((int(rng.integers(1, 4)), 6))) for _ in range(n)])
        for s in (full_sampling(n), serial_sampling(rng.dirichlet(np.ones(n)) * 0.9 + 0.1 / n)):
            tau, sigma = float(rng.uniform(0.1, 2)), rng.uniform(0.1, 2, n)
            norms = [np.linalg.norm(a.matrix.toarray(), 2) for a in A] if s.kind == "serial" else None
            v = eso_params(s, A, tau, sigma, norms=norms)
            rep = validate_eso(s, A, tau, sigma, v, seed=seed)
            worst = max(worst, rep.max_ratio)
            halved_caught += not validate_eso(s, A, tau, sigma, v.scaled(0.5), seed=seed).ok
    c(worst <= 1 + 1e-9, f"max ESO ratio {worst:.12f} <= 1+1e-9 on 20 (operator, sampling) pairs")
    c(halved_caught == 20, f"halved v rejected {halved_caught}/20")
    rng = np.random.default_rng(99)
    A = BlockOperator([MatrixOp(rng.standard_normal((2, 4))) for _ in range(3)])
    tau, sigma = 0.7, np.array([0.3, 0.9, 0.5])
    s = serial_sampling([0.2, 0.3, 0.5])
    v = eso_params(s, A, tau, sigma, norms=[np.linalg.norm(a.matrix.toarray(), 2) for a in A])
    margin = np.inf
    for _ in range(100):
        x = rng.standard_normal(4)
        y = [rng.standard_normal(2) for _ in range(3)]
        yh = [rng.standard_normal(2) for _ in range(3)]
        lhs, rhs = coupling_bound(s, A, tau, sigma, v, x, y, yh, float(np.exp(rng.uniform(-2, 2))))
        margin = min(margin, lhs - rhs)
    c(margin >= -1e-9, f"coupling inequality min margin {margin:.3g} over 100 probes")
    c.finish()


# ---------------------------------------------------------------- 8


def test_criterion_8_prox(record_property):
    c = Checks(record_property, 60)
    cat = catalog()
    err = 0.0
    for name, (f, (lo, hi)) in cat.items():
        for sigma, z in samples(50):
            x = np.asarray(f.prox(sigma, z), dtype=float)
            for j in range(D):
                err = max(err, abs(x[j] - coord_oracle(f, sigma, z, x, j, lo, hi)))
    c(err <= 1e-6, f"prox vs numeric oracle max error {err:.1e} ({len(cat)} functions x 50)")
    moreau = 0.0
    for pair in pairs().values():
        for sigma, z in samples(50, seed=3):
            moreau = max(moreau, np.max(np.abs(pair.primal.prox(sigma, z)
                                               + sigma * pair.conjugate.prox(1 / sigma, z / sigma) - z)))
    c(moreau <= 1e-8, f"Moreau identity max error {moreau:.1e}")
    rng = np.random.default_rng(4)
    b, r = rng.uniform(0.5, 3, D), rng.uniform(0.5, 3, D)
    f = pl.SmoothedKLConjugate(b, r)
    t, h = f.threshold, 1e-6
    jump, c1 = 0.0, 0.0
    for sigma in (0.3, 1.0, 4.0):
        z_star = t + sigma * (r * r / b * t + r - r * r / b)
        jump = max(jump, np.max(np.abs(f.prox(sigma, z_star - 1e-9) - f.prox(sigma, z_star + 1e-9))))
    for j in range(D):
        e = np.eye(D)[j]
        for side in (-1e-4, 0.0, 1e-4):
            z = np.where(np.arange(D) == j, t, t - 0.5) + side * e
            fd = (f.value(z + h * e) - f.value(z - h * e)) / (2 * h)
            c1 = max(c1, abs(fd - f.gradient(z)[j]))
    c(jump <= 1e-6 and c1 <= 1e-6, f"smoothed-KL branch jump {jump:.1e}, derivative mismatch {c1:.1e}")
    fne = -np.inf
    for name, (f, _) in cat.items():
        for _ in range(50):
            sigma = float(rng.uniform(0.05, 5))
            z1, z2 = rng.normal(0, 3, D), rng.normal(0, 3, D)
            dp = f.prox(sigma, z1) - f.prox(sigma, z2)
            fne = max(fne, float(dp @ dp - dp @ (z1 - z2)))
    c(fne <= 1e-10, f"firm nonexpansiveness max excess {fne:.1e}")
    c.finish()


# ---------------------------------------------------------------- 9


def test_criterion_9_cost_model(record_property):
    c = Checks(record_property, 10)
    rng = np.random.default_rng(3)
    prob = random_matrix_problem(rng, n_blocks=5)
    bad = 0
    total = 0
    for s in (uniform_serial(5), serial_sampling([0.1, 0.1, 0.2, 0.3, 0.3]), full_sampling(5)):
        norms = prob.block_norms() if s.kind == "serial" else prob.norm()
        tau, sigma = initial_step_sizes_general(prob.A, s, norms=norms)
        plan = StepPlan(tau, sigma, 1.0, s)
        st = init_state(prob, plan, seed=1)
        for _ in range(300):
            before = prob.A.evaluations
            calls = [dict(a.calls) for a in prob.A]
            spdhg_step(prob, st, plan)
            S = set(st.last_subset)
            total += 1
            unsampled = any(a.calls != calls[i] for i, a in enumerate(prob.A) if i not in S)
            bad += (prob.A.evaluations - before != 2 * len(S)) or unsampled
    c(bad == 0, f"{total - bad}/{total} iterations cost exactly 2|S| block evaluations, none outside S")
    for name, sampling, per in (("scalar_toy", "uniform", 2), ("scalar_toy", "full", 20)):
        cfg = H.ExperimentConfig(experiment=name, n=10, sampling=sampling, seeds=1, iterations=200)
        _, info = H.run_seed(cfg, 0)
        c(info["evaluations"] == per * 200, f"harness {sampling}: {info['evaluations']} = {per} x 200")
    c.finish()
