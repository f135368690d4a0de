"""Catalog of prox functions with the per-coordinate bounds of their domains (test helper)."""
import numpy as np
from scipy.optimize import minimize_scalar

from spdhg import proxlib as pl

D = 3


def catalog(seed=0):
    rng = np.random.default_rng(seed)
    b = rng.uniform(0.5, 3.0, D)
    r = rng.uniform(0.5, 2.0, D)
    b0 = b.copy()
    b0[0] = 0.0
    c = rng.normal(0, 1, D)
    inf = np.inf
    return {
        "sq_l2_datafit": (pl.SquaredL2DataFit(c, 0.7), (-inf, inf)),
        "sq_l2_conjugate": (pl.SquaredL2DataFitConjugate(c, 0.7), (-inf, inf)),
        "l1_norm": (pl.L1Norm(1.3), (-inf, inf)),
        "l1_conjugate_box": (pl.BoxIndicator(-1.3, 1.3), (-1.3, 1.3)),
        "l1_distance": (pl.L1Distance(c, 0.8), (-inf, inf)),
        "l1_distance_conjugate": (pl.ShiftedBoxConjugate(c, 0.8), (-0.8, 0.8)),
        "box": (pl.BoxIndicator(0.0, 100.0), (0.0, 100.0)),
        "kl": (pl.KLDivergence(b0, r), (-r, inf)),
        "kl_conjugate": (pl.KLConjugate(b0, r), (-inf, 1.0)),
        "smoothed_kl": (pl.SmoothedKL(b, r), (-inf, inf)),
        "smoothed_kl_conjugate": (pl.SmoothedKLConjugate(b, r), (-inf, 1.0)),
        "huber": (pl.Huber(0.6, 0.9), (-inf, inf)),
        "huber_conjugate": (pl.HuberConjugate(0.6, 0.9), (-0.6, 0.6)),
        "add_sq_l2_box": (pl.AddSquaredL2(pl.BoxIndicator(0.0, np.inf), 0.8), (0.0, inf)),
        "zero": (pl.ZeroFunction(), (-inf, inf)),
    }


def pairs(seed=0):
    rng = np.random.default_rng(seed)
    b = rng.uniform(0.5, 3.0, D)
    b0 = b.copy()
    b0[1] = 0.0
    r = rng.uniform(0.5, 2.0, D)
    c = rng.normal(0, 1, D)
    return {
        "sq_l2_datafit": pl.sq_l2_datafit(c, 0.7),
        "l1_norm": pl.l1_norm(1.3),
        "l1_distance": pl.l1_distance(c, 0.8),
        "kl": pl.kl_pair(b0, r),
        "smoothed_kl": pl.smoothed_kl_pair(b, r),
        "huber": pl.huber_pair(0.6, 0.9),
    }


def coord_oracle(f, sigma, z, x, j, lo, hi):
    """Minimize the prox objective over coordinate ``j`` with the rest of ``x`` fixed."""
    lo = max(np.broadcast_to(lo, z.shape)[j], z[j] - 60.0)
    hi = min(np.broadcast_to(hi, z.shape)[j], z[j] + 60.0)

    def obj(t):
        w = x.copy()
        w[j] = t
        v = f.value(w)
        return 0.5 * (t - z[j]) ** 2 / sigma + (v if np.isfinite(v) else 1e300)

    # open domains: stay a hair inside so log terms stay finite
    eps = 1e-13 * max(1.0, abs(hi))
    res = minimize_scalar(obj, bounds=(lo, hi - eps if np.isfinite(hi) else hi),
                          method="bounded", options={"xatol": 1e-11, "maxiter": 2000})
    return res.x


def prox_objective(f, sigma, z, x):
    return 0.5 * float(np.sum((x - z) ** 2)) / sigma + f.value(x)


def samples(n=50, seed=1):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield float(np.exp(rng.uniform(np.log(0.05), np.log(5.0)))), rng.normal(0, 2.5, D)
