"""Random block samplings, ESO parameters and their validation.

Block indices are 0-based throughout.  A sampling is a finite list of atoms
``(subset, probability)``; drawing picks one atom.  Marginals ``p_i`` are the
total probability of the atoms containing ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .operators import BlockOperator, op_norm, safe_norm

__all__ = [
    "ProperSamplingError",
    "UnsupportedSamplingError",
    "EsoViolation",
    "Sampling",
    "EsoParams",
    "EsoReport",
    "serial_sampling",
    "uniform_serial",
    "full_sampling",
    "arbitrary_sampling",
    "draw",
    "make_rng",
    "SOLVER_STREAM",
    "DATA_STREAM",
    "eso_params",
    "validate_eso",
    "coupling_bound",
]

SOLVER_STREAM = 0
DATA_STREAM = 1

_PROB_TOL = 1e-12


class ProperSamplingError(ValueError):
    """Some block has zero probability of being selected."""


class UnsupportedSamplingError(ValueError):
    pass


class EsoViolation(AssertionError):
    pass


def make_rng(seed: int, stream: int = SOLVER_STREAM) -> np.random.Generator:
    """Independent PCG64 stream ``stream`` derived from ``seed``.

    The solver draws from ``SOLVER_STREAM`` and data generation from
    ``DATA_STREAM``, so changing one never shifts the other.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(stream),))))


@dataclass(frozen=True)
class Sampling:
    n: int
    atoms: tuple[tuple[tuple[int, ...], float], ...]
    kind: str = "arbitrary"
    marginals: np.ndarray = field(init=False, repr=False, compare=False)
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.kind not in ("full", "serial", "arbitrary"):
            raise ValueError(f"unknown sampling kind {self.kind!r}")
        atoms = tuple((tuple(sorted(set(int(i) for i in s))), float(q)) for s, q in self.atoms)
        if not atoms:
            raise ValueError("sampling needs at least one atom")
        probs = np.array([q for _, q in atoms])
        if np.any(probs <= 0):
            raise ValueError("atom probabilities must be positive")
        if abs(probs.sum() - 1) > _PROB_TOL:
            raise ValueError(f"atom probabilities sum to {probs.sum()!r}, not 1")
        p = np.zeros(self.n)
        for s, q in atoms:
            if not s or s[0] < 0 or s[-1] >= self.n:
                raise ValueError(f"atom {s} is empty or out of range for n={self.n}")
            p[list(s)] += q
        if np.any(p <= 0):
            missing = [i for i in range(self.n) if p[i] <= 0]
            raise ProperSamplingError(f"blocks {missing} are never selected; sampling is not proper")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "marginals", np.minimum(p, 1.0))
        object.__setattr__(self, "_cum", np.cumsum(probs))

    @property
    def p(self) -> np.ndarray:
        return self.marginals

    @property
    def expected_size(self) -> float:
        return float(self.marginals.sum())

    @property
    def iterations_per_epoch(self) -> float:
        """Iterations whose expected operator work equals one full ``A`` and ``A*``."""
        return self.n / self.expected_size

    def to_dict(self) -> dict:
        if self.kind == "serial":
            return {"kind": "serial", "p": [float(q) for q in self.marginals]}
        if self.kind == "full":
            return {"kind": "full"}
        return {"kind": "arbitrary", "atoms": [list(s) for s, _ in self.atoms],
                "probs": [q for _, q in self.atoms]}


def serial_sampling(p: Sequence[float]) -> Sampling:
    """Select exactly one block, block ``i`` with probability ``p[i]``."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise ProperSamplingError("serial sampling needs p_i > 0 for every block")
    if abs(p.sum() - 1) > _PROB_TOL:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return Sampling(len(p), tuple(((i,), q) for i, q in enumerate(p)), kind="serial")


def uniform_serial(n: int) -> Sampling:
    return serial_sampling(np.full(n, 1.0 / n))


def full_sampling(n: int) -> Sampling:
    return Sampling(n, ((tuple(range(n)), 1.0),), kind="full")


def arbitrary_sampling(atoms, n: int | None = None) -> Sampling:
    """Sampling from explicit ``(subset, probability)`` atoms."""
    atoms = [(tuple(s), q) for s, q in atoms]
    if n is None:
        n = 1 + max(max(s) for s, _ in atoms)
    return Sampling(n, tuple(atoms), kind="arbitrary")


def draw(s: Sampling, rng: np.random.Generator) -> tuple[int, ...]:
    """One i.i.d. subset; single-atom samplings do not consume randomness."""
    if len(s.atoms) == 1:
        return s.atoms[0][0]
    j = int(np.searchsorted(s._cum, rng.random() * s._cum[-1], side="right"))
    return s.atoms[min(j, len(s.atoms) - 1)][0]


@dataclass(frozen=True)
class EsoParams:
    v: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if np.any(v < 0):
            raise ValueError("ESO parameters must be nonnegative")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))

    @property
    def gamma_sq(self) -> float:
        return float(np.max(self.v / self.p))

    def scaled(self, c: float) -> "EsoParams":
        return EsoParams(c * self.v, self.p)


def _as_sigma(sigma, n):
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,)).copy()
    if np.any(sigma <= 0):
        raise ValueError("step sizes must be positive")
    return sigma


def eso_params(s: Sampling, A: BlockOperator, tau: float, sigma, norms=None,
               tol: float = 1e-12) -> EsoParams:
    """ESO parameters of ``S^{1/2} A T^{1/2}`` for full or serial samplings.

    full: ``v_i = ||S^{1/2} A T^{1/2}||^2`` for every ``i``;
    serial: ``v_i = sigma_i tau ||A_i||^2``.  ``norms`` may supply ``||A_i||``
    for serial samplings.  Norm estimates are over-relaxed by :func:`safe_norm`.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    sigma = _as_sigma(sigma, s.n)
    if len(A) != s.n:
        raise ValueError(f"sampling has {s.n} blocks, operator has {len(A)}")
    if s.kind == "serial":
        if norms is None:
            norms = [safe_norm(op_norm(a, tol=tol), 1e-10) for a in A]
        v = sigma * tau * np.asarray(norms, dtype=float) ** 2
    elif s.kind == "full":
        c = safe_norm(op_norm(A.scaled(np.sqrt(sigma * tau)), tol=tol), 1e-10)
        v = np.full(s.n, c * c)
    else:
        raise UnsupportedSamplingError(
            "no closed-form ESO parameters for arbitrary samplings; supply v and check it with validate_eso")
    return EsoParams(v, s.marginals)


@dataclass
class EsoReport:
    ok: bool
    max_ratio: float
    worst_probe: int
    ratios: np.ndarray
    message: str = ""

    def raise_if_failed(self):
        if not self.ok:
            raise EsoViolation(self.message)


class _Eso:
    """Both sides of the ESO inequality as quadratic forms in ``z``, by atom enumeration."""

    def __init__(self, s, A, tau, sigma, v):
        self.s, self.A = s, A
        self.scale = np.sqrt(_as_sigma(sigma, s.n) * tau)
        vv = v.v if isinstance(v, EsoParams) else np.asarray(v, dtype=float)
        self.d = s.marginals * vv

    def lhs(self, z):
        total = 0.0
        for atom, q in self.s.atoms:
            u = sum(self.scale[i] * self.A[i].adjoint(z[i]) for i in atom)
            total += q * float(np.vdot(u, u))
        return total

    def lhs_operator(self, z):
        """``M z`` where ``lhs(z) = <z, M z>``."""
        out = [np.zeros_like(zi) for zi in z]
        for atom, q in self.s.atoms:
            u = sum(self.scale[i] * self.A[i].adjoint(z[i]) for i in atom)
            for i in atom:
                out[i] += q * self.scale[i] * self.A[i].apply(u)
        return out

    def rhs(self, z):
        return float(sum(di * np.vdot(zi, zi) for di, zi in zip(self.d, z)))


def validate_eso(s: Sampling, A: BlockOperator, tau: float, sigma, v, trials: int = 20,
                 probes: int = 10, seed: int = 0, atol: float = 1e-9) -> EsoReport:
    """Check ``E ||sum_{i in S} C_i* z_i||^2 <= sum_i p_i v_i ||z_i||^2``.

    The expectation is computed exactly by enumerating the atoms.  Each of the
    ``probes`` random starting points is refined by ``trials`` steps of the
    generalized power method on the two quadratic forms, which drives the
    ratio towards its supremum; so a too-small ``v`` is found reliably.
    """
    if trials < 1 or probes < 1:
        raise ValueError("trials and probes must be >= 1")
    eso = _Eso(s, A, tau, sigma, v)
    rng = np.random.default_rng(seed)
    d = np.where(eso.d > 0, eso.d, np.finfo(float).tiny)
    ratios = np.zeros(probes)
    for k in range(probes):
        z = [rng.standard_normal(sh.dims) for sh in A.out_shapes]
        best = 0.0
        for _ in range(trials):
            left, right = eso.lhs(z), eso.rhs(z)
            if left > right + atol:
                best = max(best, np.inf if right == 0 else left / right)
            elif right > 0:
                best = max(best, left / right)
            mz = eso.lhs_operator(z)
            z = [mi / di for mi, di in zip(mz, d)]
            nz = np.sqrt(sum(float(np.vdot(zi, zi)) for zi in z))
            if nz == 0:
                break
            z = [zi / nz for zi in z]
        ratios[k] = best
    worst = int(np.argmax(ratios))
    ok = bool(ratios[worst] <= 1 + atol)
    msg = "" if ok else f"ESO inequality violated at probe {worst}: ratio {ratios[worst]:.6g}"
    return EsoReport(ok, float(ratios[worst]), worst, ratios, msg)


def coupling_bound(s: Sampling, A: BlockOperator, tau: float, sigma, v, x, y, y_hat,
                   c: float = 1.0) -> tuple[float, float]:
    """Both sides of the expected coupling inequality, by atom enumeration.

    With ``y+`` equal to ``y_hat`` on the sampled blocks and ``y`` elsewhere,
    returns ``(lhs, rhs)`` with ``lhs = 2 E <Q A x, y+ - y>`` and
    ``rhs = -E{ ||x||^2 / (c tau) + c max_i(v_i/p_i) ||y+ - y||^2_{Q S^-1} }``;
    valid ESO parameters give ``lhs >= rhs``.
    """
    if not c > 0:
        raise ValueError("c must be positive")
    sigma = _as_sigma(sigma, s.n)
    p = s.marginals
    vv = v.v if isinstance(v, EsoParams) else np.asarray(v, dtype=float)
    gamma_sq = float(np.max(vv / p))
    ax = [A[i].apply(x) for i in range(s.n)]
    delta = [np.asarray(yh) - np.asarray(yi) for yh, yi in zip(y_hat, y)]
    xx = float(np.vdot(x, x)) / tau
    lhs = rhs = 0.0
    for atom, q in s.atoms:
        lhs += q * 2 * sum(float(np.vdot(ax[i], delta[i])) / p[i] for i in atom)
        dy = sum(float(np.vdot(delta[i], delta[i])) / (p[i] * sigma[i]) for i in atom)
        rhs -= q * (xx / c + c * gamma_sq * dy)
    return lhs, rhs
