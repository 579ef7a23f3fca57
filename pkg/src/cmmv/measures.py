"""One-dimensional probability measures and the quadratic Wasserstein distance.

Three families are provided:

* :class:`FiniteMeasure` for measures with finite support (the binomial
  laws of the scaled random walk are a special case, see
  :func:`binomial_step_law`);
* :class:`DensityMeasure` for absolutely continuous laws on a compact
  interval, with :class:`UniformMeasure` as the exact special case;
* :class:`StandardNormal`.

All quantiles are right inverses, ``Q(y) = inf{x : F(x) > y}``, and
``Q(1)`` is clamped to the supremum of the support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import integrate, special

WEIGHT_RENORM_TOL = 1e-9
DENSITY_NORM_TOL = 1e-10

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


class MeasureError(ValueError):
    """Raised when a measure is malformed or an argument is out of domain."""


def _as_probability(y):
    y = np.asarray(y, dtype=float)
    if np.any(~np.isfinite(y)) or np.any(y < 0.0) or np.any(y > 1.0):
        raise MeasureError("quantile level must lie in [0, 1]")
    return y


# ---------------------------------------------------------------------------
# Finite support
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteMeasure:
    """Probability measure with finitely many atoms.

    Parameters
    ----------
    support : array_like
        Strictly increasing atom locations.
    weights : array_like
        Positive masses. A total deviating from 1 by at most ``1e-9`` is
        renormalized; larger deviations are rejected.
    """

    support: np.ndarray
    weights: np.ndarray
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.support, dtype=float)).copy()
        w = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        if s.ndim != 1 or s.shape != w.shape or s.size == 0:
            raise MeasureError("support and weights must be non-empty 1-d arrays of equal length")
        if not np.all(np.isfinite(s)) or not np.all(np.isfinite(w)):
            raise MeasureError("support and weights must be finite")
        if np.any(np.diff(s) <= 0.0):
            raise MeasureError("support must be strictly increasing")
        if np.any(w <= 0.0):
            raise MeasureError("weights must be strictly positive")
        total = math.fsum(w)
        if abs(total - 1.0) > WEIGHT_RENORM_TOL:
            raise MeasureError(f"weights sum to {total!r}, not 1")
        w = w / total
        s.flags.writeable = False
        w.flags.writeable = False
        cum = np.minimum(np.cumsum(w), 1.0)
        cum[-1] = 1.0
        cum.flags.writeable = False
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "_cum", cum)

    @property
    def size(self) -> int:
        return self.support.size

    @property
    def cumulative(self) -> np.ndarray:
        """Cumulative masses ``F(s_i)`` at the atoms (last entry exactly 1)."""
        return self._cum

    @property
    def lower(self) -> float:
        return float(self.support[0])

    @property
    def upper(self) -> float:
        return float(self.support[-1])

    def cdf(self, x):
        idx = np.searchsorted(self.support, np.asarray(x, dtype=float), side="right")
        out = np.concatenate(([0.0], self._cum))[idx]
        return out if np.ndim(out) else float(out)

    def cdf_left(self, x):
        """Left limit ``F(x-) = P(X < x)``."""
        idx = np.searchsorted(self.support, np.asarray(x, dtype=float), side="left")
        out = np.concatenate(([0.0], self._cum))[idx]
        return out if np.ndim(out) else float(out)

    def quantile(self, y):
        y = _as_probability(y)
        idx = np.searchsorted(self._cum, y, side="right")
        out = self.support[np.minimum(idx, self.size - 1)]
        return out if np.ndim(out) else float(out)

    def expect(self, func: Callable) -> float:
        return float(np.dot(self.weights, func(self.support)))

    def mean(self) -> float:
        return float(np.dot(self.weights, self.support))

    def second_moment(self) -> float:
        return float(np.dot(self.weights, self.support**2))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.support[rng.choice(self.size, size=size, p=self.weights)]

    def to_json(self) -> dict:
        return {"type": "finite", "support": self.support.tolist(), "weights": self.weights.tolist()}


@dataclass(frozen=True, eq=False)
class BinomialStepLaw(FiniteMeasure):
    """Law of ``(u_1 + ... + u_n)/sqrt(n)`` for independent fair signs."""

    n: int = 0

    def to_json(self) -> dict:
        out = super().to_json()
        out["n"] = self.n
        return out


def binomial_step_law(n: int) -> BinomialStepLaw:
    """Scaled symmetric random walk after ``n`` steps.

    Weights are exact binomial coefficients over ``2**n`` computed with
    integer arithmetic and rounded once to float.
    """
    if int(n) != n or n < 1:
        raise MeasureError("n must be a positive integer")
    n = int(n)
    k = np.arange(n + 1)
    support = (2.0 * k - n) / math.sqrt(n)
    denom = 2**n
    weights = np.array([math.comb(n, int(j)) / denom for j in k])
    return BinomialStepLaw(support, weights, n=n)


def dirac(x: float) -> FiniteMeasure:
    return FiniteMeasure([float(x)], [1.0])


# ---------------------------------------------------------------------------
# Absolutely continuous laws
# ---------------------------------------------------------------------------


class DensityMeasure:
    """Absolutely continuous law on a compact interval ``[lower, upper]``.

    The CDF and the first two partial moments are tabulated on a uniform
    cell grid by 16-point Gauss-Legendre quadrature; values between cell
    edges are completed by the same rule on the partial cell, so the
    table is exact to rounding for smooth densities.

    Parameters
    ----------
    pdf : callable
        Vectorized density.
    lower, upper : float
        Support endpoints.
    cdf : callable, optional
        Exact CDF. When given it replaces the tabulated CDF for
        evaluation and inversion.
    num_cells : int
        Number of tabulation cells.
    check : bool
        Validate normalization and positivity on construction.
    """

    kind = "density"

    def __init__(self, pdf: Callable, lower: float, upper: float, cdf: Optional[Callable] = None,
                 num_cells: int = 512, check: bool = True):
        if not (np.isfinite(lower) and np.isfinite(upper) and lower < upper):
            raise MeasureError("density support must be a finite interval with lower < upper")
        self.lower = float(lower)
        self.upper = float(upper)
        self._pdf = pdf
        self._cdf_exact = cdf
        self._edges = np.linspace(self.lower, self.upper, num_cells + 1)
        m = self._cell_moments(self._edges[:-1], self._edges[1:])
        self._cum_moments = np.vstack([np.zeros((1, 3)), np.cumsum(m, axis=0)])
        total = self._cum_moments[-1, 0]
        probe = self.pdf(np.linspace(self.lower, self.upper, 1001))
        self.min_density = float(np.min(probe))
        if check:
            if abs(total - 1.0) > max(DENSITY_NORM_TOL, 1e-8 if cdf is not None else 0.0):
                raise MeasureError(f"density integrates to {total!r}, not 1")
            if self.min_density <= 0.0:
                raise MeasureError("density must be strictly positive on its support")

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lower) & (x <= self.upper)
        xc = np.clip(x, self.lower, self.upper)
        out = np.where(inside, self._pdf(xc), 0.0)
        return out if out.ndim else float(out)

    def _cell_moments(self, a, b):
        a = np.asarray(a, dtype=float)[..., None]
        b = np.asarray(b, dtype=float)[..., None]
        half = 0.5 * (b - a)
        x = 0.5 * (a + b) + half * _GL_NODES
        fw = self._pdf(x) * _GL_WEIGHTS * half
        return np.stack([fw.sum(-1), (fw * x).sum(-1), (fw * x * x).sum(-1)], axis=-1)

    def _moments_to(self, x):
        """Cumulative moments ``int_lower^x t^k f(t) dt`` for k = 0, 1, 2."""
        x = np.clip(np.asarray(x, dtype=float), self.lower, self.upper)
        j = np.clip(np.searchsorted(self._edges, x, side="right") - 1, 0, self._edges.size - 2)
        base = self._cum_moments[j]
        return base + self._cell_moments(self._edges[j], x)

    def partial_moments(self, a, b):
        """Return ``(m0, m1, m2)`` with ``m_k = int_a^b x^k f(x) dx``."""
        d = self._moments_to(b) - self._moments_to(a)
        return d[..., 0], d[..., 1], d[..., 2]

    def cdf(self, x):
        if self._cdf_exact is not None:
            x = np.asarray(x, dtype=float)
            out = np.clip(self._cdf_exact(np.clip(x, self.lower, self.upper)), 0.0, 1.0)
            out = np.where(x < self.lower, 0.0, np.where(x >= self.upper, 1.0, out))
        else:
            out = np.clip(self._moments_to(x)[..., 0], 0.0, 1.0)
            out = np.where(np.asarray(x) >= self.upper, 1.0, out)
        return out if np.ndim(out) else float(out)

    cdf_left = cdf

    def quantile(self, y):
        y = _as_probability(y)
        out = self._invert_cdf(np.atleast_1d(y))
        out = np.where(y >= 1.0, self.upper, np.where(y <= 0.0, self.lower, out.reshape(y.shape)))
        return out if np.ndim(out) else float(out)

    def _invert_cdf(self, y):
        # bracket on the tabulated edges, then safeguarded Newton
        edge_cdf = np.asarray(self.cdf(self._edges))
        j = np.clip(np.searchsorted(edge_cdf, y, side="right") - 1, 0, self._edges.size - 2)
        lo = self._edges[j].copy()
        hi = self._edges[j + 1].copy()
        flo = edge_cdf[j]
        fhi = edge_cdf[j + 1]
        span = np.where(fhi > flo, fhi - flo, 1.0)
        x = lo + (hi - lo) * np.clip((y - flo) / span, 0.0, 1.0)
        for _ in range(60):
            fx = np.asarray(self.cdf(x)) - y
            lo = np.where(fx <= 0.0, x, lo)
            hi = np.where(fx > 0.0, x, hi)
            dens = np.asarray(self.pdf(x))
            step = np.where(dens > 0.0, fx / np.where(dens > 0.0, dens, 1.0), np.inf)
            xn = x - step
            bad = ~((xn > lo) & (xn < hi))
            xn = np.where(bad, 0.5 * (lo + hi), xn)
            if np.all(np.abs(xn - x) <= 1e-15 * (1.0 + np.abs(x))):
                x = xn
                break
            x = xn
        return x

    def mean(self) -> float:
        return float(self._cum_moments[-1, 1])

    def second_moment(self) -> float:
        return float(self._cum_moments[-1, 2])

    def expect(self, func: Callable) -> float:
        val, _ = integrate.quad(lambda x: func(x) * self.pdf(x), self.lower, self.upper,
                                epsabs=1e-13, epsrel=1e-12, limit=500)
        return float(val)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.quantile(rng.random(size))

    def to_json(self) -> dict:
        grid = np.linspace(self.lower, self.upper, 257)
        return {"type": "density_table", "support": grid.tolist(),
                "weights": np.asarray(self.pdf(grid)).tolist()}

    @staticmethod
    def from_table(grid, density) -> "DensityMeasure":
        """Piecewise-linear density through tabulated values, renormalized."""
        grid = np.asarray(grid, dtype=float)
        dens = np.asarray(density, dtype=float)
        if grid.ndim != 1 or grid.shape != dens.shape or grid.size < 2:
            raise MeasureError("density table needs matching grid and density arrays")
        if np.any(np.diff(grid) <= 0.0) or np.any(dens <= 0.0):
            raise MeasureError("density table needs increasing grid and positive density")
        mass = float(integrate.trapezoid(dens, grid))
        if abs(mass - 1.0) > WEIGHT_RENORM_TOL:
            raise MeasureError(f"density table integrates to {mass!r}, not 1")
        dens = dens / mass
        seg = np.diff(grid) * 0.5 * (dens[1:] + dens[:-1])
        cum = np.concatenate(([0.0], np.cumsum(seg)))

        def pdf(x):
            return np.interp(x, grid, dens)

        def cdf(x):
            x = np.asarray(x, dtype=float)
            j = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, grid.size - 2)
            dx = x - grid[j]
            slope = (dens[j + 1] - dens[j]) / (grid[j + 1] - grid[j])
            return cum[j] + dens[j] * dx + 0.5 * slope * dx * dx

        m = DensityMeasure(pdf, grid[0], grid[-1], cdf=cdf)
        m._table = (grid, dens)
        return m


class UniformMeasure(DensityMeasure):
    """Uniform law on ``[lower, upper]`` with closed-form CDF and quantile."""

    kind = "density_uniform"

    def __init__(self, lower: float = 0.0, upper: float = 1.0):
        width = upper - lower
        super().__init__(lambda x: np.full(np.shape(x), 1.0 / width), lower, upper,
                         cdf=lambda x: (np.asarray(x, dtype=float) - lower) / width, num_cells=1)

    def quantile(self, y):
        y = _as_probability(y)
        out = self.lower + (self.upper - self.lower) * y
        return out if np.ndim(out) else float(out)

    def partial_moments(self, a, b):
        a = np.clip(np.asarray(a, dtype=float), self.lower, self.upper)
        b = np.clip(np.asarray(b, dtype=float), self.lower, self.upper)
        c = 1.0 / (self.upper - self.lower)
        return c * (b - a), c * (b**2 - a**2) / 2.0, c * (b**3 - a**3) / 3.0

    def to_json(self) -> dict:
        return {"type": "density_uniform", "support": [self.lower, self.upper], "weights": []}


class StandardNormal:
    """Standard Gaussian law with closed-form partial moments."""

    kind = "normal"
    lower = -np.inf
    upper = np.inf

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return out if out.ndim else float(out)

    def cdf(self, x):
        out = special.ndtr(np.asarray(x, dtype=float))
        return out if np.ndim(out) else float(out)

    cdf_left = cdf

    def quantile(self, y):
        out = special.ndtri(_as_probability(y))
        return out if np.ndim(out) else float(out)

    def partial_moments(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        pa, pb = self.pdf(a), self.pdf(b)
        m0 = special.ndtr(b) - special.ndtr(a)
        m1 = pa - pb
        with np.errstate(invalid="ignore"):
            apa = np.where(np.isfinite(a), a * pa, 0.0)
            bpb = np.where(np.isfinite(b), b * pb, 0.0)
        return m0, m1, m0 + apa - bpb

    def mean(self) -> float:
        return 0.0

    def second_moment(self) -> float:
        return 1.0

    def expect(self, func: Callable) -> float:
        val, _ = integrate.quad(lambda x: func(x) * self.pdf(x), -np.inf, np.inf,
                                epsabs=1e-13, epsrel=1e-12, limit=500)
        return float(val)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.standard_normal(size)

    def to_json(self) -> dict:
        return {"type": "normal", "support": [], "weights": []}


Measure1D = Union[FiniteMeasure, DensityMeasure, StandardNormal]


def measure_from_json(obj: dict) -> Measure1D:
    """Inverse of the ``to_json`` methods."""
    kind = obj.get("type")
    if kind == "finite":
        if "n" in obj:
            law = binomial_step_law(int(obj["n"]))
            return BinomialStepLaw(obj["support"], obj["weights"], n=law.n)
        return FiniteMeasure(obj["support"], obj["weights"])
    if kind == "density_uniform":
        lo, hi = obj.get("support") or [0.0, 1.0]
        return UniformMeasure(lo, hi)
    if kind == "density_table":
        return DensityMeasure.from_table(obj["support"], obj["weights"])
    if kind == "normal":
        return StandardNormal()
    raise MeasureError(f"unknown measure type {kind!r}")


# ---------------------------------------------------------------------------
# Functional interface
# ---------------------------------------------------------------------------


def cdf(m: Measure1D, x):
    return m.cdf(x)


def quantile(m: Measure1D, y):
    return m.quantile(y)


def _w2_finite_finite(a: FiniteMeasure, b: FiniteMeasure) -> float:
    levels = np.union1d(a.cumulative, b.cumulative)
    levels = levels[levels > 0.0]
    du = np.diff(np.concatenate(([0.0], levels)))
    mid = levels - 0.5 * du
    diff = a.quantile(np.clip(mid, 0.0, 1.0)) - b.quantile(np.clip(mid, 0.0, 1.0))
    return math.sqrt(max(math.fsum(du * diff * diff), 0.0))


def _w2_finite_continuous(a: FiniteMeasure, b) -> float:
    cuts = np.concatenate(([0.0], a.cumulative))
    x = np.asarray(b.quantile(cuts), dtype=float)
    m0, m1, m2 = b.partial_moments(x[:-1], x[1:])
    s = a.support
    terms = s * s * m0 - 2.0 * s * m1 + m2
    return math.sqrt(max(math.fsum(terms), 0.0))


def _w2_continuous(a, b, cells: int = 4096, order: int = 8) -> float:
    # composite Gauss-Legendre over u; tails refined geometrically and the
    # tabulation edges of each law used as cell breaks, so kinks of a
    # piecewise quantile fall on cell boundaries
    tail = np.geomspace(1e-14, 1.0 / cells, 40)
    breaks = [np.linspace(0.0, 1.0, cells + 1), tail, 1.0 - tail]
    for m in (a, b):
        edges = getattr(m, "_edges", None)
        if edges is not None and edges.size <= 200001:
            breaks.append(np.asarray(m.cdf(edges), dtype=float))
    u = np.unique(np.clip(np.concatenate(breaks), 0.0, 1.0))
    x, w = np.polynomial.legendre.leggauss(order)
    lo, hi = u[:-1], u[1:]
    nodes = (0.5 * (hi - lo)[:, None] * (x[None, :] + 1.0) + lo[:, None]).ravel()
    weights = (0.5 * (hi - lo)[:, None] * w[None, :]).ravel()
    gap = np.asarray(a.quantile(nodes)) - np.asarray(b.quantile(nodes))
    return math.sqrt(max(math.fsum(weights * gap * gap), 0.0))


def wasserstein2(m1: Measure1D, m2: Measure1D) -> float:
    """Quadratic Wasserstein distance through the quantile coupling.

    Finite against finite is integrated exactly over the merged
    cumulative levels; finite against continuous uses the partial
    moments of the continuous law between quantile cuts; two continuous
    laws use a composite Gauss-Legendre rule over ``u``.
    """
    for m in (m1, m2):
        if not np.isfinite(m.second_moment()):
            raise MeasureError("measure has no finite second moment")
    fin1 = isinstance(m1, FiniteMeasure)
    fin2 = isinstance(m2, FiniteMeasure)
    if fin1 and fin2:
        return _w2_finite_finite(m1, m2)
    if fin1:
        return _w2_finite_continuous(m1, m2)
    if fin2:
        return _w2_finite_continuous(m2, m1)
    return _w2_continuous(m1, m2)


def weighted_empirical(values, weights=None) -> FiniteMeasure:
    """Empirical law of a weighted sample, merging tied values."""
    values = np.asarray(values, dtype=float).ravel()
    if weights is None:
        weights = np.ones_like(values)
    weights = np.asarray(weights, dtype=float).ravel()
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    uniq, start = np.unique(v, return_index=True)
    mass = np.add.reduceat(w, start)
    return FiniteMeasure(uniq, mass / math.fsum(mass))
