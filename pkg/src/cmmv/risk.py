"""Risk functions of the uninformed player.

A risk function ``H`` is convex with derivative bounded away from zero
and infinity, ``eps < H'(x) < cap``. Two families are provided: the
shifted softplus, whose derivative is a scaled logistic between the two
slope bounds, and the linear (risk-neutral) function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special

_PROBES = np.linspace(-20.0, 20.0, 2001)


class RiskError(ValueError):
    """Raised when a risk function violates its declared bounds."""


@dataclass(frozen=True)
class RiskFunction:
    """Convex risk function with bounded derivative.

    Attributes
    ----------
    h, h_prime : callable
        The function and its derivative, vectorized.
    eps, cap : float
        Declared bounds ``eps < H' < cap``.
    h_second : callable, optional
        Second derivative, used by diagnostics only.
    name : str
        Family name, for serialization.
    params : dict
        Family parameters, for serialization.
    """

    h: Callable
    h_prime: Callable
    eps: float
    cap: float
    h_second: Optional[Callable] = None
    name: str = "custom"
    params: tuple = ()

    def __post_init__(self):
        if not (0.0 < self.eps < self.cap and np.isfinite(self.cap)):
            raise RiskError(f"risk bounds must satisfy 0 < eps < cap, got eps={self.eps}, cap={self.cap}")
        d = np.asarray(self.h_prime(_PROBES), dtype=float)
        # saturating ramps round onto the bounds far out, so only a strict exit is rejected
        if np.any(d < self.eps) or np.any(d > self.cap):
            raise RiskError("H' leaves the interval [eps, cap] on the probe grid")
        if np.any(np.diff(d) < -1e-14):
            raise RiskError("H' is not nondecreasing on the probe grid")

    @property
    def is_linear(self) -> bool:
        return self.name == "linear"

    def to_dict(self) -> dict:
        return {"family": self.name, **dict(self.params)}


def softplus_risk(slope_low: float = 0.5, slope_high: float = 1.5, width: float = 1.0) -> RiskFunction:
    """Shifted softplus ``H(x) = a x + (b - a) w log(1 + exp(x / w))``.

    ``H'`` is a logistic ramp from ``a`` to ``b``; the defaults give
    ``H(x) = x/2 + log(1 + e^x)``.
    """
    a, b, w = float(slope_low), float(slope_high), float(width)
    if not (0.0 < a < b) or w <= 0.0:
        raise RiskError("softplus risk needs 0 < slope_low < slope_high and width > 0")

    def h(x):
        x = np.asarray(x, dtype=float)
        return a * x + (b - a) * w * np.logaddexp(0.0, x / w)

    def h_prime(x):
        return a + (b - a) * special.expit(np.asarray(x, dtype=float) / w)

    def h_second(x):
        sig = special.expit(np.asarray(x, dtype=float) / w)
        return (b - a) / w * sig * (1.0 - sig)

    return RiskFunction(h, h_prime, a, b, h_second, "softplus",
                        (("slope_low", a), ("slope_high", b), ("width", w)))


def linear_risk(slope: float = 1.0) -> RiskFunction:
    """Risk-neutral ``H(x) = slope * x`` with bounds ``slope/2 < H' < 2 slope``."""
    c = float(slope)
    if c <= 0.0:
        raise RiskError("linear risk needs a positive slope")
    return RiskFunction(lambda x: c * np.asarray(x, dtype=float),
                        lambda x: np.full(np.shape(x), c),
                        0.5 * c, 2.0 * c, lambda x: np.zeros(np.shape(x)), "linear", (("slope", c),))


def risk_from_dict(spec: dict) -> RiskFunction:
    spec = dict(spec)
    family = spec.pop("family", "softplus")
    if family == "softplus":
        return softplus_risk(**spec)
    if family == "linear":
        return linear_risk(**spec)
    raise RiskError(f"unknown risk family {family!r}")
