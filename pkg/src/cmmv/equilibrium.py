"""Fixed points of the marginal-utility reweighting operator.

Given a type law ``mu``, a reference law ``lam`` and a state law ``nu``
with finite support, type ``l`` is sent to state ``s_i`` when it falls in
the ``i``-th quantile segment. The mean marginal utility of the
uninformed player at ``s_i`` is

    Y(s_i) = E[ H'(L s_i - Psi(s_i)) | L in segment i ],

with ``Psi`` the centred transport potential. The operator reweights
``nu`` by ``Y`` and renormalizes. A solution of ``T(nu) = lam`` for the
binomial reference law gives the equilibrium of the ``n``-stage game.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import integrate

from .measures import FiniteMeasure, Measure1D, binomial_step_law, wasserstein2
from .risk import RiskFunction
from .transport import (JointLaw, TransportPotential, expect_potential, joint_law, psi_potential,
                        segment_cuts)

QUAD_FALLBACK_TOL = 1e-12
NOISE_FLOOR = 1e-14
STALL_ITERATIONS = 10
ROUNDING_FLOOR = 1e-13


class ConvergenceError(RuntimeError):
    """Raised when the fixed-point iteration stalls; carries the residual trace."""

    def __init__(self, message: str, residuals: list[float]):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class SolverConfig:
    """Settings of the damped fixed-point iteration.

    Attributes
    ----------
    damping : float
        Initial relaxation ``eta`` in ``(0, 1]``; halved whenever the
        residual grows.
    tol : float
        Target for the per-atom residual ``max |alpha Y w - b|``.
    tol_w2 : float
        Target for ``W2(T(nu), lam)``. Once the weight residual stalls
        below ``ROUNDING_FLOOR`` the iteration stops and reports the W2
        it reached, which is then limited by rounding.
    max_iter : int
        Iteration budget.
    quad_order : int
        Gauss-Legendre order on each type segment.
    probe_uniqueness : bool
        Also run from a perturbed start and report the gap.
    """

    damping: float = 0.5
    tol: float = 1e-10
    tol_w2: float = 1e-8
    max_iter: int = 5000
    min_damping: float = 1e-8
    quad_order: int = 32
    probe_uniqueness: bool = False

    def __post_init__(self):
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")
        if self.tol <= 0.0 or self.tol_w2 <= 0.0 or self.max_iter < 1:
            raise ValueError("tolerances and max_iter must be positive")


@dataclass(frozen=True, eq=False)
class EquilibriumSolution:
    """Converged state law together with the objects derived from it."""

    n: Optional[int]
    nu: FiniteMeasure
    lam: FiniteMeasure
    psi: TransportPotential
    alpha: float
    y: np.ndarray
    residual_w2: float
    residual_weights: float
    iterations: int
    history: tuple = field(default=(), repr=False)
    sensitivity_gap: Optional[float] = None

    @property
    def joint(self) -> JointLaw:
        return JointLaw(self.nu.support, self.cuts, self.nu.weights, self._mu)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "support": self.nu.support.tolist(),
            "weights": self.nu.weights.tolist(),
            "reference_weights": self.lam.weights.tolist(),
            "psi": self.psi.to_json(),
            "alpha": self.alpha,
            "y": self.y.tolist(),
            "residuals": {"w2": self.residual_w2, "weights": self.residual_weights},
            "iterations": self.iterations,
            "sensitivity_gap": self.sensitivity_gap,
        }

    @staticmethod
    def from_json(obj: dict) -> "EquilibriumSolution":
        lam = (binomial_step_law(obj["n"]) if obj.get("n") else
               FiniteMeasure(obj["support"], obj["reference_weights"]))
        return EquilibriumSolution(
            n=obj.get("n"), nu=FiniteMeasure(obj["support"], obj["weights"]), lam=lam,
            psi=TransportPotential.from_json(obj["psi"]), alpha=float(obj["alpha"]),
            y=np.asarray(obj["y"], dtype=float), residual_w2=float(obj["residuals"]["w2"]),
            residual_weights=float(obj["residuals"]["weights"]), iterations=int(obj["iterations"]),
            sensitivity_gap=obj.get("sensitivity_gap"))


# ---------------------------------------------------------------------------
# Operator
# ---------------------------------------------------------------------------


def _segment_average(h_prime, s, psi_s, lo, hi, mu, order):
    """Mean of ``H'(l s - psi_s)`` over ``l ~ mu`` restricted to ``[lo, hi]``."""
    x, w = np.polynomial.legendre.leggauss(order)
    half = 0.5 * (hi - lo)[:, None]
    mid = 0.5 * (hi + lo)[:, None]
    ell = mid + half * x
    fw = np.asarray(mu.pdf(ell)) * w
    vals = h_prime(ell * s[:, None] - psi_s[:, None])
    mass = fw.sum(axis=1)
    avg = np.divide((vals * fw).sum(axis=1), mass, out=np.zeros_like(mass), where=mass > 0.0)
    # zero-width segments (tail atoms below rounding): point value
    point = h_prime(mid[:, 0] * s - psi_s)
    return np.where(mass > 0.0, avg, point)


def y_field(mu, nu: FiniteMeasure, lam: Measure1D, H: RiskFunction, order: int = 32,
            psi: Optional[TransportPotential] = None) -> np.ndarray:
    """Mean marginal utility ``Y(s_i)`` at every atom of ``nu``.

    Each segment is integrated by Gauss-Legendre of the given order and
    again on its two halves; atoms where the two disagree by more than
    ``1e-12`` are recomputed by adaptive quadrature.
    """
    if not isinstance(nu, FiniteMeasure):
        raise ValueError("y_field needs a finite-support state law")
    if psi is None:
        psi = psi_potential(mu, nu, lam)
    cuts = segment_cuts(mu, nu)
    s = nu.support
    psi_s = psi(s)
    lo, hi = cuts[:-1], cuts[1:]
    coarse = _segment_average(H.h_prime, s, psi_s, lo, hi, mu, order)
    mid = 0.5 * (lo + hi)
    ml, mh = _segment_mass(mu, lo, mid), _segment_mass(mu, mid, hi)
    left = _segment_average(H.h_prime, s, psi_s, lo, mid, mu, order)
    right = _segment_average(H.h_prime, s, psi_s, mid, hi, mu, order)
    tot = ml + mh
    fine = np.divide(ml * left + mh * right, tot, out=coarse.copy(), where=tot > 0.0)
    bad = np.flatnonzero(np.abs(fine - coarse) > QUAD_FALLBACK_TOL)
    for i in bad:
        num, _ = integrate.quad(lambda l: H.h_prime(l * s[i] - psi_s[i]) * mu.pdf(l), lo[i], hi[i],
                                epsabs=1e-14, epsrel=1e-13, limit=200)
        den, _ = integrate.quad(mu.pdf, lo[i], hi[i], epsabs=1e-14, epsrel=1e-13, limit=200)
        fine[i] = num / den
    return fine


def _segment_mass(mu, lo, hi):
    x, w = np.polynomial.legendre.leggauss(16)
    half = 0.5 * (hi - lo)[:, None]
    ell = 0.5 * (hi + lo)[:, None] + half * x
    return (np.asarray(mu.pdf(ell)) * w * half).sum(axis=1)


def alpha_of(nu: FiniteMeasure, y: np.ndarray) -> float:
    """Normalizer ``1 / E_nu[Y]``."""
    return 1.0 / math.fsum(nu.weights * y)


def apply_T(mu, nu: FiniteMeasure, lam: Measure1D, H: RiskFunction, order: int = 32) -> FiniteMeasure:
    """Reweight ``nu`` by ``alpha * Y``; the support is unchanged."""
    y = y_field(mu, nu, lam, H, order)
    return FiniteMeasure(nu.support, alpha_of(nu, y) * y * nu.weights)


def same_support_w2(support: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """W2 between two weight vectors on one support.

    The CDF gap is accumulated from per-atom differences so that it keeps
    relative precision when the two laws are close. When every gap is
    below the neighbouring atom masses the quantile coupling only moves
    mass between adjacent atoms, which gives the closed form used here.
    """
    d = np.cumsum(a - b)[:-1]
    gaps = np.diff(support)
    floor = np.minimum(np.minimum(a[:-1], a[1:]), np.minimum(b[:-1], b[1:]))
    if np.all(np.abs(d) <= floor):
        return math.sqrt(math.fsum(np.abs(d) * gaps * gaps))
    return wasserstein2(FiniteMeasure(support, a), FiniteMeasure(support, b))


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def _iterate(mu, lam: FiniteMeasure, H: RiskFunction, cfg: SolverConfig, w0: np.ndarray):
    b = lam.weights
    support = lam.support
    w = w0 / math.fsum(w0)
    eta = cfg.damping
    history = []
    best, best_it = math.inf, 0
    floor_state = None
    for it in range(1, cfg.max_iter + 1):
        nu = FiniteMeasure(support, w)
        psi = psi_potential(mu, nu, lam)
        y = y_field(mu, nu, lam, H, cfg.quad_order, psi)
        alpha = alpha_of(nu, y)
        tw = alpha * y * w
        r_w = float(np.max(np.abs(tw - b)))
        r_w2 = same_support_w2(support, tw, b)
        history.append(r_w)
        if r_w < cfg.tol and r_w2 < cfg.tol_w2:
            return nu, psi, alpha, y, r_w2, r_w, it, history
        if r_w <= ROUNDING_FLOOR and (floor_state is None or r_w2 < floor_state[4]):
            # iterates at rounding level are equally valid; keep the best certified one
            floor_state = (nu, psi, alpha, y, r_w2, r_w)
        if r_w < best:
            best, best_it = r_w, it
        elif r_w > NOISE_FLOOR:
            eta = 0.5 * eta
            if eta < cfg.min_damping:
                break
        if it - best_it > STALL_ITERATIONS:
            if floor_state is not None:
                # weights are exact to rounding; W2 sits at its floor sqrt(ulp) * gap
                return (*floor_state, it, history)
            break
        target = b / (alpha * y)
        w = (1.0 - eta) * w + eta * target
        w = w / math.fsum(w)
    raise ConvergenceError(f"fixed-point iteration did not converge (weight residual {history[-1]:.3e}, "
                           f"W2 residual {r_w2:.3e})", history)


def solve_measure_fixed_point(mu, lam: FiniteMeasure, H: RiskFunction, cfg: SolverConfig = SolverConfig(),
                              n: Optional[int] = None, init: Optional[np.ndarray] = None) -> EquilibriumSolution:
    """Solve ``T_lam(nu) = lam`` for ``nu`` on the support of ``lam``.

    The update is ``w <- (1 - eta) w + eta b / (alpha Y)`` followed by
    renormalization, started from ``lam`` itself unless ``init`` is given.
    """
    w0 = lam.weights.copy() if init is None else np.asarray(init, dtype=float)
    nu, psi, alpha, y, r_w2, r_w, it, hist = _iterate(mu, lam, H, cfg, w0)
    gap = None
    if cfg.probe_uniqueness:
        rng = np.random.default_rng(12345)
        w1 = lam.weights * np.exp(0.2 * rng.standard_normal(lam.size))
        alt = _iterate(mu, lam, H, replace(cfg, damping=0.5 * cfg.damping), w1)[0]
        gap = wasserstein2(nu, alt)
    sol = EquilibriumSolution(n, nu, lam, psi, alpha, y, r_w2, r_w, it, tuple(hist), gap)
    object.__setattr__(sol, "_mu", mu)
    object.__setattr__(sol, "cuts", segment_cuts(mu, nu))
    return sol


def solve_fixed_point(mu, n: int, H: RiskFunction, cfg: SolverConfig = SolverConfig()) -> EquilibriumSolution:
    """Equilibrium state law of the ``n``-stage game."""
    return solve_measure_fixed_point(mu, binomial_step_law(n), H, cfg, n=n)


def attach_prior(sol: EquilibriumSolution, mu) -> EquilibriumSolution:
    """Bind the type law to a solution read back from disk."""
    object.__setattr__(sol, "_mu", mu)
    object.__setattr__(sol, "cuts", segment_cuts(mu, sol.nu))
    return sol


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionReport:
    """Slack of each equilibrium condition (all zero at an exact solution)."""

    centering: float
    type_marginal: float
    sandwich: float
    reweighting: float
    density_bounds_ok: bool
    second_moment: float

    @property
    def max_slack(self) -> float:
        return max(self.centering, self.type_marginal, self.sandwich, self.reweighting)

    def passed(self, tol: float) -> bool:
        return self.max_slack < tol and self.density_bounds_ok

    def to_json(self) -> dict:
        return {"centering": self.centering, "type_marginal": self.type_marginal,
                "sandwich": self.sandwich, "reweighting": self.reweighting,
                "density_bounds_ok": self.density_bounds_ok, "second_moment": self.second_moment}


def verify_conditions(sol: EquilibriumSolution, mu, H: RiskFunction, grid_size: int = 1000,
                      psi: Optional[TransportPotential] = None, order: int = 32) -> ConditionReport:
    """Recompute every equilibrium condition from ``sol`` independently.

    ``psi`` may be supplied to audit a potential other than the stored one.
    """
    nu, lam = sol.nu, sol.lam
    psi = sol.psi if psi is None else psi
    centering = abs(expect_potential(psi, lam))

    jl = joint_law(mu, nu)
    type_marginal = float(np.max(np.abs(jl.segment_masses() - nu.weights)))

    ell = np.linspace(mu.lower, mu.upper, grid_size)
    idx = np.clip(np.searchsorted(jl.cuts, ell, side="right") - 1, 0, nu.size - 1)
    s = nu.support[idx]
    # sandwich gamma(s-) <= l <= gamma(s) with gamma read off the potential slopes
    g_right = np.asarray(psi.slope_right(s))
    g_left = np.asarray(psi.slope_left(s))
    sandwich = float(np.max(np.maximum(0.0, np.maximum(g_left - ell, ell - g_right))))

    y = y_field(mu, nu, lam, H, order, psi)
    alpha = alpha_of(nu, y)
    reweighting = float(np.max(np.abs(alpha * y * nu.weights - lam.weights)))
    ratio = alpha * y
    bounds_ok = bool(np.all(ratio > H.eps / H.cap) and np.all(ratio < H.cap / H.eps))
    return ConditionReport(centering, type_marginal, sandwich, reweighting, bounds_ok, nu.second_moment())
