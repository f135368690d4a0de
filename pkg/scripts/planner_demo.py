"""Linear rates of the three serial plans against the Zhang-Xiao rate.

Prints theta for a symmetric and an asymmetric two-block profile, then for
the desk-scale PET problems with equal and with unequal backgrounds.
"""
from pathlib import Path

import numpy as np

from spdhg import harness as H
from spdhg.planner import ConditionProfile, plan_importance, plan_optimal, plan_uniform, rate_zhang_xiao

ROOT = Path(__file__).resolve().parents[1]


def show(label, prof):
    row = {f.__name__[5:]: f(prof).theta for f in (plan_uniform, plan_importance, plan_optimal)}
    try:
        row["zhang_xiao"] = rate_zhang_xiao(prof)
    except ValueError:
        row["zhang_xiao"] = np.nan
    p = plan_optimal(prof).sampling.marginals
    print(f"{label:28s} " + "  ".join(f"{k} {v:.6f}" for k, v in row.items())
          + f"  p_opt {np.array2string(p, precision=3)}")


def main():
    show("kappa (8, 8), rho 1", ConditionProfile.from_kappa([8, 8], rho=1.0))
    show("kappa (8, 99), rho 1", ConditionProfile.from_kappa([8, 99], rho=1.0))
    for name in ("pet_linear_uniform", "pet_linear_asym_uniform"):
        cfg = H.load_config(ROOT / "configs" / f"{name}.toml")
        prob = H.build(cfg).problem
        show(name, H.profile_of(prob, cfg.rho))


if __name__ == "__main__":
    main()
