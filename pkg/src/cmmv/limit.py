"""Continuous-time limit of the game.

The limit potential ``psi`` and constant ``c`` solve

    f_mu(psi'(s)) psi''(s) H'(s psi'(s) - psi(s)) = c N(s),
    psi'(-inf) = 0,  psi'(+inf) = 1,  E[psi(Z)] = 0,

with ``N`` the standard normal density. The equation is integrated on
``[-S, S]`` with ``psi'(-S) = 0`` imposed, and ``(c, psi(-S))`` are found
by Newton shooting on the two remaining conditions. The state law of
the limit game is recovered as ``F_nu = F_mu o psi'`` and the limit
price is ``f(B_t, t)`` with ``f(x, t) = E[psi'(x + sqrt(1 - t) Z)]``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, interpolate, special

from .equilibrium import EquilibriumSolution, SolverConfig, solve_measure_fixed_point
from .measures import DensityMeasure, FiniteMeasure, StandardNormal
from .risk import RiskFunction

_SQRT2PI = math.sqrt(2.0 * math.pi)


class ShootingError(RuntimeError):
    """Raised when the shooting iteration fails; carries the residual trace."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


class LimitFileError(ValueError):
    """Raised when a stored limit solution is unreadable or inconsistent."""


@dataclass(frozen=True)
class OdeConfig:
    """Settings of the shooting solver.

    Attributes
    ----------
    half_width : float
        Truncation ``S`` of the real line.
    rtol, atol : float
        Local tolerances of the Runge-Kutta integrator.
    tol : float
        Target for both shooting residuals.
    c_init, psi_init : float, optional
        Starting values of ``c`` and ``psi(-S)``.
    grid_points : int
        Size of the stored uniform grid.
    """

    half_width: float = 6.0
    rtol: float = 1e-12
    atol: float = 1e-14
    tol: float = 1e-10
    max_iter: int = 60
    c_init: Optional[float] = None
    psi_init: Optional[float] = None
    grid_points: int = 2401
    tail_tol: float = 1e-6


@dataclass(frozen=True, eq=False)
class OdeSolution:
    """Limit potential on a uniform grid plus an evaluator for any ``s``."""

    c: float
    s_grid: np.ndarray
    psi: np.ndarray
    psi_prime: np.ndarray
    psi_second: np.ndarray
    diagnostics: dict
    evaluator: Callable = field(repr=False, default=None)

    @property
    def half_width(self) -> float:
        return float(self.s_grid[-1])

    def evaluate(self, s):
        """``(psi, psi', psi'')`` at arbitrary points, extended linearly outside ``[-S, S]``."""
        s = np.asarray(s, dtype=float)
        S = self.half_width
        inner = np.clip(s, -S, S)
        p, dp, ddp = self.evaluator(inner)
        left, right = s < -S, s > S
        p = np.where(left, self.psi[0] + self.psi_prime[0] * (s + S), p)
        p = np.where(right, self.psi[-1] + self.psi_prime[-1] * (s - S), p)
        dp = np.where(left, self.psi_prime[0], np.where(right, self.psi_prime[-1], dp))
        ddp = np.where(left | right, 0.0, ddp)
        return p, dp, ddp

    def potential(self, s):
        return self.evaluate(s)[0]

    def slope(self, s):
        return self.evaluate(s)[1]

    def curvature(self, s):
        return self.evaluate(s)[2]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "psi", "psi_prime", "psi_second"])
        for row in zip(self.s_grid, self.psi, self.psi_prime, self.psi_second):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def diagnostics_json(self) -> str:
        return json.dumps({"c": self.c, **self.diagnostics}, indent=2, sort_keys=True)

    @staticmethod
    def from_csv(text: str, c: float) -> "OdeSolution":
        """Rebuild a solution from its CSV export with Hermite interpolation."""
        try:
            rows = list(csv.reader(io.StringIO(text)))
            if rows[0] != ["s", "psi", "psi_prime", "psi_second"]:
                raise LimitFileError("unexpected header in limit file")
            data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        except (IndexError, ValueError) as exc:
            raise LimitFileError(f"unreadable limit file: {exc}") from exc
        if data.ndim != 2 or data.shape[1] != 4 or data.shape[0] < 4 or not np.all(np.isfinite(data)):
            raise LimitFileError("limit file must hold at least four finite rows of four columns")
        s, p, dp, ddp = data.T
        if np.any(np.diff(s) <= 0.0):
            raise LimitFileError("limit grid is not increasing")
        if np.any(np.diff(dp) < -1e-12) or dp.min() < -1e-9 or dp.max() > 1.0 + 1e-6:
            raise LimitFileError("stored slope is not a nondecreasing map into [0, 1]")
        sp_p = interpolate.CubicHermiteSpline(s, p, dp)
        sp_dp = interpolate.CubicHermiteSpline(s, dp, ddp)

        def evaluator(x):
            return sp_p(x), sp_dp(x), sp_dp(x, 1)

        return OdeSolution(float(c), s, p, dp, ddp, {"source": "file"}, evaluator)


def _rhs_factory(mu, H: RiskFunction, c: float, clamp_log: list):
    lo, hi = mu.lower, mu.upper

    def rhs(s, y):
        psi, dpsi, _ = y
        if dpsi < lo or dpsi > hi:
            clamp_log.append(s)
        d = min(max(dpsi, lo), hi)
        dd = c * math.exp(-0.5 * s * s) / _SQRT2PI / (float(mu.pdf(d)) * float(H.h_prime(s * dpsi - psi)))
        return [dpsi, dd, psi * math.exp(-0.5 * s * s) / _SQRT2PI]

    return rhs


def _shoot(mu, H, c, a, cfg: OdeConfig, dense: bool = False):
    S = cfg.half_width
    clamp_log: list = []
    sol = integrate.solve_ivp(_rhs_factory(mu, H, c, clamp_log), (-S, S), [a, 0.0, a * special.ndtr(-S)],
                              method="DOP853", rtol=cfg.rtol, atol=cfg.atol, dense_output=dense)
    if not sol.success:
        raise ShootingError(f"integration failed: {sol.message}", [])
    psi_S, dpsi_S, integral = sol.y[:, -1]
    tail = special.ndtr(-S)
    # right tail: psi continues linearly with slope psi'(S)
    integral += psi_S * tail + dpsi_S * (math.exp(-0.5 * S * S) / _SQRT2PI - S * tail)
    return np.array([dpsi_S - 1.0, integral]), sol, bool(clamp_log)


def solve_ode_D(mu, H: RiskFunction, cfg: OdeConfig = OdeConfig()) -> OdeSolution:
    """Solve the limit system by Newton shooting on ``(c, psi(-S))``.

    The Jacobian is formed by forward differences and each Newton step
    is halved until the residual norm decreases.
    """
    c = float(cfg.c_init) if cfg.c_init is not None else float(H.h_prime(0.0))
    a = float(cfg.psi_init) if cfg.psi_init is not None else -1.0 / math.sqrt(math.pi)
    x = np.array([c, a])
    F, _, _ = _shoot(mu, H, x[0], x[1], cfg)
    trace = [float(np.max(np.abs(F)))]
    for _ in range(cfg.max_iter):
        if trace[-1] < cfg.tol:
            break
        J = np.empty((2, 2))
        for j in range(2):
            h = 1e-7 * max(1.0, abs(x[j]))
            xp = x.copy()
            xp[j] += h
            J[:, j] = (_shoot(mu, H, xp[0], xp[1], cfg)[0] - F) / h
        step = np.linalg.solve(J, -F)
        t = 1.0
        while True:
            xn = x + t * step
            if xn[0] > 0.0:
                Fn = _shoot(mu, H, xn[0], xn[1], cfg)[0]
                if np.max(np.abs(Fn)) < trace[-1]:
                    break
            t *= 0.5
            if t < 1e-8:
                raise ShootingError("shooting line search failed", trace)
        x, F = xn, Fn
        trace.append(float(np.max(np.abs(F))))
    if trace[-1] >= cfg.tol:
        raise ShootingError(f"shooting did not converge (residual {trace[-1]:.3e})", trace)

    F, sol, clamped = _shoot(mu, H, x[0], x[1], cfg, dense=True)
    c, a = float(x[0]), float(x[1])
    dense = sol.sol

    def evaluator(s):
        s = np.asarray(s, dtype=float)
        vals = dense(s.ravel())
        p = vals[0].reshape(s.shape)
        dp = vals[1].reshape(s.shape)
        d = np.clip(dp, mu.lower, mu.upper)
        ddp = c * np.exp(-0.5 * s * s) / _SQRT2PI / (np.asarray(mu.pdf(d)) * H.h_prime(s * dp - p))
        return p, dp, ddp

    grid = np.linspace(-cfg.half_width, cfg.half_width, cfg.grid_points)
    p, dp, ddp = evaluator(grid)
    z, w = special.roots_hermitenorm(128)
    gh_check = float(np.dot(w, OdeSolution(c, grid, p, dp, ddp, {}, evaluator).potential(z)) / _SQRT2PI)
    diagnostics = {
        "boundary_residual": float(F[0]),
        "normalization_residual": float(F[1]),
        "normalization_gauss_hermite": gh_check,
        "left_slope": float(dp[0]),
        "right_tail": float(1.0 - dp[-1]),
        "psi_at_left_end": a,
        "iterations": len(trace) - 1,
        "residual_trace": trace,
        "clamped": clamped,
    }
    if dp.min() < -cfg.tail_tol or dp.max() > 1.0 + cfg.tail_tol:
        raise ShootingError("solution slope leaves [0, 1]", trace)
    return OdeSolution(c, grid, p, dp, ddp, diagnostics, evaluator)


# ---------------------------------------------------------------------------
# Grid fixed point
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    """Uniform state grid on ``[-half_width, half_width]`` with ``points`` nodes."""

    half_width: float = 6.0
    points: int = 48001


def discretized_normal(grid_cfg: GridConfig) -> FiniteMeasure:
    """Standard normal lumped onto grid nodes by midpoint cells (tails to the end nodes)."""
    x = np.linspace(-grid_cfg.half_width, grid_cfg.half_width, grid_cfg.points)
    edges = np.concatenate(([-np.inf], 0.5 * (x[1:] + x[:-1]), [np.inf]))
    # difference of tail masses keeps relative accuracy on both sides
    w = np.where(edges[1:] <= 0.0, special.ndtr(edges[1:]) - special.ndtr(edges[:-1]),
                 special.ndtr(-edges[:-1]) - special.ndtr(-edges[1:]))
    return FiniteMeasure(x, w)


def continuous_fixed_point(mu, H: RiskFunction, grid_cfg: GridConfig = GridConfig(),
                           cfg: SolverConfig = SolverConfig()) -> EquilibriumSolution:
    """Fixed point of the reweighting operator for the discretized normal law."""
    return solve_measure_fixed_point(mu, discretized_normal(grid_cfg), H, cfg)


def nu_from_psi(mu, ode: OdeSolution) -> DensityMeasure:
    """State law with CDF ``F_mu(psi'(s))`` and density ``f_mu(psi') psi''``."""
    S = ode.half_width

    def pdf(s):
        _, dp, ddp = ode.evaluate(s)
        return np.asarray(mu.pdf(np.clip(dp, mu.lower, mu.upper))) * ddp

    def cdf(s):
        return np.asarray(mu.cdf(np.clip(ode.slope(s), mu.lower, mu.upper)))

    return DensityMeasure(pdf, -S, S, cdf=cdf, num_cells=2048)


def histogram_measure(nu: FiniteMeasure) -> DensityMeasure:
    """Spread each atom of a uniform-grid measure evenly over its grid cell."""
    x = nu.support
    h = x[1] - x[0]
    edges = np.concatenate(([x[0] - 0.5 * h], 0.5 * (x[1:] + x[:-1]), [x[-1] + 0.5 * h]))
    cum = np.concatenate(([0.0], nu.cumulative))
    dens = nu.weights / np.diff(edges)

    def pdf(s):
        j = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, x.size - 1)
        return dens[j]

    def cdf(s):
        s = np.asarray(s, dtype=float)
        j = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, x.size - 1)
        return np.clip(cum[j] + dens[j] * (s - edges[j]), 0.0, 1.0)

    return DensityMeasure(pdf, edges[0], edges[-1], cdf=cdf, num_cells=x.size, check=False)


# ---------------------------------------------------------------------------
# Limit price surface
# ---------------------------------------------------------------------------


class CmmvSurface:
    """``f(x, t) = E[psi'(x + sqrt(1 - t) Z)]`` by 64-point Gauss-Hermite."""

    def __init__(self, ode: Optional[OdeSolution] = None, slope: Optional[Callable] = None,
                 curvature: Optional[Callable] = None, order: int = 64):
        if ode is not None:
            slope, curvature = ode.slope, ode.curvature
        if slope is None:
            raise ValueError("surface needs a solution or a slope function")
        self._slope = slope
        self._curv = curvature
        z, w = special.roots_hermitenorm(order)
        self._z = z
        self._w = w / _SQRT2PI

    def _smooth(self, g, x, t):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        b = np.sqrt(np.clip(1.0 - t, 0.0, None))
        pts = x[..., None] + b[..., None] * self._z
        return np.asarray(g(pts)) @ self._w

    def f(self, x, t):
        out = self._smooth(self._slope, x, t)
        return out if np.ndim(out) else float(out)

    __call__ = f

    def f_x(self, x, t):
        if self._curv is None:
            raise ValueError("surface built without curvature")
        out = self._smooth(self._curv, x, t)
        return out if np.ndim(out) else float(out)

    def to_csv(self, xs, ts) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "t", "f"])
        for t in ts:
            vals = self.f(np.asarray(xs, dtype=float), np.full(len(xs), t))
            for x, v in zip(xs, vals):
                w.writerow([repr(float(x)), repr(float(t)), repr(float(v))])
        return buf.getvalue()


def cmmv_surface(ode: OdeSolution) -> CmmvSurface:
    return CmmvSurface(ode)


@dataclass(frozen=True)
class FunctionSurface:
    """Wrap a plain ``f(x, t)`` for the heat-equation check."""

    func: Callable

    def f(self, x, t):
        return self.func(np.asarray(x, dtype=float), np.asarray(t, dtype=float))


def heat_equation_residual(surf, xs=None, ts=None, hx: float = 1e-3, ht: float = 1e-4) -> float:
    """Largest ``|f_t + f_xx / 2|`` by central differences on the probe grid."""
    xs = np.linspace(-3.9, 3.9, 40) if xs is None else np.asarray(xs, dtype=float)
    ts = np.linspace(0.05, 0.95, 19) if ts is None else np.asarray(ts, dtype=float)
    X, T = np.meshgrid(xs, ts, indexing="ij")
    ft = (surf.f(X, T + ht) - surf.f(X, T - ht)) / (2.0 * ht)
    fxx = (surf.f(X + hx, T) - 2.0 * surf.f(X, T) + surf.f(X - hx, T)) / (hx * hx)
    return float(np.max(np.abs(ft + 0.5 * fxx)))


def closed_form_surface(x, t):
    """Surface of the risk-neutral uniform case, ``F_N(x / sqrt(2 - t))``."""
    return special.ndtr(np.asarray(x, dtype=float) / np.sqrt(2.0 - np.asarray(t, dtype=float)))


def normal_law() -> StandardNormal:
    return StandardNormal()
