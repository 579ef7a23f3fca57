"""Monotone rearrangement between the type law and a state law.

For a type law ``mu`` on ``[0, 1]`` and a state law ``nu`` on the real
line, ``phi(l) = F_nu^{-1}(F_mu(l))`` pushes ``mu`` to ``nu`` and
``gamma(s) = F_mu^{-1}(F_nu(s))`` goes back. Their primitives from zero
are convex; the centred primitive of ``gamma`` is the potential whose
subgradients describe which types end up at which state.

When ``nu`` has finite support every object here is piecewise linear and
is handled exactly by :class:`TransportPotential`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .measures import DensityMeasure, FiniteMeasure, Measure1D

SCHEMA = "tp-v1"


class TransportError(ValueError):
    """Raised for malformed potentials or out-of-domain evaluations."""


# ---------------------------------------------------------------------------
# Piecewise-linear convex functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TransportPotential:
    """Piecewise-linear convex function ``s -> int_0^s g(t) dt - offset``.

    ``g`` is the step function equal to ``slopes[0]`` left of the first
    breakpoint, ``slopes[k]`` between breakpoints ``k-1`` and ``k`` and
    ``slopes[-1]`` right of the last one. The function is ``+inf`` outside
    ``[lower, upper]``.

    Parameters
    ----------
    breakpoints : array_like, shape (m,)
        Nondecreasing kink locations.
    slopes : array_like, shape (m + 1,)
        Nondecreasing slopes.
    offset : float
        Constant subtracted from the primitive.
    lower, upper : float
        Effective domain.
    """

    breakpoints: np.ndarray
    slopes: np.ndarray
    offset: float = 0.0
    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.breakpoints, dtype=float)).copy()
        q = np.atleast_1d(np.asarray(self.slopes, dtype=float)).copy()
        if b.ndim != 1 or q.shape != (b.size + 1,):
            raise TransportError("need len(slopes) == len(breakpoints) + 1")
        if np.any(np.diff(b) < 0.0) or np.any(np.diff(q) < 0.0):
            raise TransportError("breakpoints and slopes must be nondecreasing")
        if not (self.lower <= self.upper):
            raise TransportError("empty domain")
        b.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "slopes", q)
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))
        # primitive measured from the first breakpoint, at every breakpoint
        h = np.concatenate(([0.0], np.cumsum(q[1:-1] * np.diff(b)))) if b.size else np.zeros(0)
        object.__setattr__(self, "_h", h)
        object.__setattr__(self, "_h0", float(self._primitive(np.asarray(0.0))))

    def _primitive(self, s):
        b, q = self.breakpoints, self.slopes
        if b.size == 0:
            return q[0] * s
        idx = np.searchsorted(b, s, side="right")
        anchor_idx = np.maximum(idx - 1, 0)
        return self._h[anchor_idx] + q[idx] * (s - b[anchor_idx])

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        val = self._primitive(s) - self._h0 - self.offset
        val = np.where((s < self.lower) | (s > self.upper), np.inf, val)
        return val if val.ndim else float(val)

    def slope_right(self, s):
        """Right derivative, i.e. ``gamma(s)`` for a transport potential."""
        out = self.slopes[np.searchsorted(self.breakpoints, np.asarray(s, dtype=float), side="right")]
        return out if np.ndim(out) else float(out)

    def slope_left(self, s):
        """Left derivative, i.e. ``gamma(s-)``."""
        out = self.slopes[np.searchsorted(self.breakpoints, np.asarray(s, dtype=float), side="left")]
        return out if np.ndim(out) else float(out)

    def shifted(self, delta: float) -> "TransportPotential":
        """Same function plus the constant ``delta``."""
        return TransportPotential(self.breakpoints, self.slopes, self.offset - delta, self.lower, self.upper)

    def vertices(self) -> np.ndarray:
        """Points where the supremum of a linear minus this function is attained."""
        pts = list(self.breakpoints[(self.breakpoints >= self.lower) & (self.breakpoints <= self.upper)])
        if np.isfinite(self.lower):
            pts.append(self.lower)
        if np.isfinite(self.upper):
            pts.append(self.upper)
        return np.unique(np.asarray(pts if pts else [0.0], dtype=float))

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "breakpoints": self.breakpoints.tolist(),
            "slopes": self.slopes.tolist(),
            "offset": self.offset,
            "domain": [_num_to_json(self.lower), _num_to_json(self.upper)],
        }

    @staticmethod
    def from_json(obj: dict) -> "TransportPotential":
        if obj.get("schema") != SCHEMA:
            raise TransportError(f"unsupported potential schema {obj.get('schema')!r}")
        lo, hi = obj.get("domain", [None, None])
        return TransportPotential(obj["breakpoints"], obj["slopes"], obj["offset"],
                                  _num_from_json(lo, -math.inf), _num_from_json(hi, math.inf))


def _num_to_json(x: float):
    return x if math.isfinite(x) else None


def _num_from_json(x, default: float) -> float:
    return default if x is None else float(x)


@dataclass(frozen=True)
class SmoothPotential:
    """Differentiable convex potential given by callables ``psi`` and ``psi'``."""

    psi: Callable
    dpsi: Callable
    ddpsi: Optional[Callable] = None

    def __call__(self, s):
        return self.psi(s)

    def slope_right(self, s):
        return self.dpsi(s)

    slope_left = slope_right


def fenchel(p: TransportPotential) -> TransportPotential:
    """Legendre-Fenchel conjugate ``x -> sup_s x s - p(s)``, exactly.

    The slopes of ``p`` become the breakpoints of the conjugate and the
    breakpoints become its slopes; finite domain ends of ``p`` turn into
    outer slopes, infinite ones into domain ends of the conjugate.
    """
    q = p.slopes
    new_bp = q.copy()
    new_slopes = np.concatenate(([p.lower], p.breakpoints, [p.upper]))
    lo, hi = -math.inf, math.inf
    if not np.isfinite(p.lower):
        lo = float(q[0])
        new_bp, new_slopes = new_bp[1:], new_slopes[1:]
    if not np.isfinite(p.upper):
        hi = float(q[-1])
        new_bp, new_slopes = new_bp[:-1], new_slopes[:-1]
    if new_bp.size == 0:
        # conjugate domain is a single point or a half line without kinks
        new_slopes = new_slopes[:1] if new_slopes.size and np.isfinite(new_slopes[0]) else np.zeros(1)
    proto = TransportPotential(new_bp, new_slopes, 0.0, lo, hi)
    x_star = float(np.clip(0.0, lo, hi))
    v = p.vertices()
    value = float(np.max(x_star * v - p(v)))
    return TransportPotential(new_bp, new_slopes, proto(x_star) - value, lo, hi)


def subgradient(p, s: float) -> tuple[float, float]:
    """Closed subdifferential ``[left slope, right slope]`` at ``s``."""
    if isinstance(p, SmoothPotential):
        d = float(p.dpsi(s))
        return d, d
    if s < p.lower or s > p.upper:
        raise TransportError("subgradient requested outside the domain")
    left = -math.inf if s == p.lower else float(p.slope_left(s))
    right = math.inf if s == p.upper else float(p.slope_right(s))
    return left, right


# ---------------------------------------------------------------------------
# Maps between mu and nu
# ---------------------------------------------------------------------------


def phi_map(mu: DensityMeasure, nu: Measure1D, ell):
    """Monotone map ``F_nu^{-1} o F_mu`` pushing ``mu`` to ``nu``."""
    return nu.quantile(np.clip(mu.cdf(ell), 0.0, 1.0))


def gamma_map(mu: DensityMeasure, nu: Measure1D, s):
    """Right-continuous map ``F_mu^{-1} o F_nu`` from states to types."""
    return mu.quantile(np.clip(nu.cdf(s), 0.0, 1.0))


def gamma_map_left(mu: DensityMeasure, nu: Measure1D, s):
    """Left limit ``gamma(s-)``."""
    return mu.quantile(np.clip(nu.cdf_left(s), 0.0, 1.0))


def segment_cuts(mu: DensityMeasure, nu: FiniteMeasure) -> np.ndarray:
    """Type levels ``l_0 <= ... <= l_m`` with ``l_i = F_mu^{-1}(F_nu(s_i))``."""
    levels = np.concatenate(([0.0], nu.cumulative))
    cuts = np.asarray(mu.quantile(levels), dtype=float)
    cuts[0], cuts[-1] = mu.lower, mu.upper
    return cuts


def gamma_potential(mu: DensityMeasure, nu: FiniteMeasure) -> TransportPotential:
    """Exact piecewise-linear ``Gamma_nu`` for finite ``nu``."""
    return TransportPotential(nu.support, segment_cuts(mu, nu))


def big_gamma(mu: DensityMeasure, nu: Measure1D, s):
    """``Gamma_nu(s) = int_0^s gamma_nu(t) dt``."""
    if isinstance(nu, FiniteMeasure):
        return gamma_potential(mu, nu)(s)

    def one(x):
        val, _ = integrate.quad(lambda t: gamma_map(mu, nu, t), 0.0, x, epsabs=1e-12, epsrel=1e-12, limit=400)
        return val

    out = np.vectorize(one, otypes=[float])(np.asarray(s, dtype=float))
    return out if out.ndim else float(out)


def big_phi(mu: DensityMeasure, nu: Measure1D, ell):
    """``Phi_nu(l) = int_0^l phi_nu(t) dt`` on ``[0, 1]``."""
    if isinstance(nu, FiniteMeasure):
        cuts = segment_cuts(mu, nu)
        p = TransportPotential(cuts[1:-1], nu.support, 0.0, mu.lower, mu.upper)
        return p(ell)

    def one(x):
        val, _ = integrate.quad(lambda t: phi_map(mu, nu, t), mu.lower, x, epsabs=1e-12, epsrel=1e-12, limit=400)
        return val

    out = np.vectorize(one, otypes=[float])(np.asarray(ell, dtype=float))
    return out if out.ndim else float(out)


def expect_potential(p: TransportPotential, lam: Measure1D) -> float:
    """``E_lam[p]`` computed piece by piece."""
    if isinstance(lam, FiniteMeasure):
        return math.fsum(lam.weights * p(lam.support))
    b, q = p.breakpoints, p.slopes
    edges = np.concatenate(([-math.inf], b, [math.inf]))
    # on piece k the function is a_k + q_k s
    anchors = np.concatenate(([b[0] if b.size else 0.0], b))
    a = p(anchors) - q * anchors
    m0, m1, _ = lam.partial_moments(np.clip(edges[:-1], lam.lower, lam.upper),
                                    np.clip(edges[1:], lam.lower, lam.upper))
    return math.fsum(a * m0 + q * m1)


def psi_potential(mu: DensityMeasure, nu: Measure1D, lam: Measure1D):
    """Centred potential ``Gamma_nu - E_lam[Gamma_nu]``.

    Returns a :class:`TransportPotential` for finite ``nu`` and a
    :class:`SmoothPotential` built by quadrature otherwise.
    """
    if isinstance(nu, FiniteMeasure):
        g = gamma_potential(mu, nu)
        return g.shifted(-expect_potential(g, lam))
    if isinstance(lam, FiniteMeasure):
        centre = math.fsum(lam.weights * big_gamma(mu, nu, lam.support))
    else:
        centre, _ = integrate.quad(lambda t: big_gamma(mu, nu, t) * lam.pdf(t), -np.inf, np.inf,
                                   epsabs=1e-11, epsrel=1e-11, limit=400)
    return SmoothPotential(lambda s: big_gamma(mu, nu, s) - centre, lambda s: gamma_map(mu, nu, s))


# ---------------------------------------------------------------------------
# Joint law of (L, S)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class JointLaw:
    """Law of ``(L, phi_nu(L))`` for ``L ~ mu`` and finite ``nu``.

    Atom ``s_i`` collects the types in ``[cuts[i], cuts[i+1]]``.
    """

    support: np.ndarray
    cuts: np.ndarray
    weights: np.ndarray
    prior: DensityMeasure

    @property
    def segments(self) -> list[tuple[float, tuple[float, float], float]]:
        return [(float(s), (float(self.cuts[i]), float(self.cuts[i + 1])), float(self.weights[i]))
                for i, s in enumerate(self.support)]

    def segment_masses(self) -> np.ndarray:
        """``mu``-mass of each type segment (equals ``weights`` up to rounding)."""
        return np.diff(np.asarray(self.prior.cdf(self.cuts), dtype=float))

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``(L, S)`` pairs."""
        ell = np.asarray(self.prior.quantile(rng.random(size)), dtype=float)
        idx = np.clip(np.searchsorted(self.cuts, ell, side="right") - 1, 0, self.support.size - 1)
        return ell, self.support[idx]


def joint_law(mu: DensityMeasure, nu: FiniteMeasure) -> JointLaw:
    if not isinstance(nu, FiniteMeasure):
        raise TransportError("joint_law needs a finite-support state law")
    return JointLaw(nu.support, segment_cuts(mu, nu), nu.weights, mu)
