"""Strategies, prices and payoffs of the ``n``-stage trading game.

A history is a sign vector ``omega = (u_1, ..., u_n)``. Histories are
indexed by the integer whose binary digits, most significant first, are
``u_q = +1`` (bit 1) or ``u_q = -1`` (bit 0), so every prefix of length
``q - 1`` corresponds to a contiguous block of ``2**(n - q + 1)``
histories.

The uninformed player's strategy is a transfer ``X`` in the space of
centred functions of ``omega``; it is equivalent to the price sequence
``p_q = sqrt(n) E[u_q X | u_1, ..., u_{q-1}]`` under the uniform law.
When ``X = Psi(S_n)`` the prices only depend on the running sum
``S_{q-1}`` and are stored per node ``(q, k)`` with ``k`` the number of
``+1`` among the first ``q - 1`` moves.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .measures import DensityMeasure
from .risk import RiskFunction

MAX_ENUMERATION = 20
CENTERING_TOL = 1e-12
MARKOV_TOL = 1e-12


class PricingError(ValueError):
    """Raised for inconsistent strategies or degenerate price trees."""


class SingularNodeError(PricingError):
    """A node whose successor prices do not separate (no equivalent measure)."""


# ---------------------------------------------------------------------------
# Histories
# ---------------------------------------------------------------------------


def histories(n: int) -> np.ndarray:
    """All ``2**n`` sign vectors as an int8 matrix in index order."""
    if n > MAX_ENUMERATION:
        raise PricingError(f"full enumeration limited to n <= {MAX_ENUMERATION}")
    idx = np.arange(2**n, dtype=np.int64)[:, None]
    bits = (idx >> np.arange(n - 1, -1, -1)) & 1
    return (2 * bits - 1).astype(np.int8)


def terminal_sum(n: int) -> np.ndarray:
    """``S_n(omega)`` for every history."""
    return histories(n).sum(axis=1) / math.sqrt(n)


def _binomial_row(m: int) -> np.ndarray:
    denom = 2**m
    return np.array([math.comb(m, j) / denom for j in range(m + 1)])


# ---------------------------------------------------------------------------
# Strategy representations
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StrategyTransfer:
    """Transfer ``X(omega)`` indexed by history."""

    n: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (2**self.n,):
            raise PricingError("transfer needs one value per history")
        object.__setattr__(self, "values", v)

    @property
    def mean(self) -> float:
        return math.fsum(self.values) / self.values.size

    def __add__(self, other: "StrategyTransfer") -> "StrategyTransfer":
        return StrategyTransfer(self.n, self.values + other.values)

    def scaled(self, c: float) -> "StrategyTransfer":
        return StrategyTransfer(self.n, c * self.values)


@dataclass(frozen=True, eq=False)
class PriceTree:
    """Prices per node; ``levels[q-1][k]`` is ``p_q`` after ``k`` up-moves."""

    n: int
    levels: tuple
    chi_table: Optional[np.ndarray] = None

    def state(self, q: int, k) -> np.ndarray:
        """``S_{q-1}`` at node ``(q, k)``."""
        return (2.0 * np.asarray(k) - (q - 1)) / math.sqrt(self.n)

    def price(self, q: int, k):
        return self.levels[q - 1][k]

    def path_prices(self, signs: np.ndarray) -> np.ndarray:
        """Price sequence ``p_1..p_n`` along each row of a sign matrix."""
        signs = np.asarray(signs)
        ups = np.concatenate([np.zeros((signs.shape[0], 1), dtype=np.int32),
                              np.cumsum(signs > 0, axis=1, dtype=np.int32)[:, :-1]], axis=1)
        out = np.empty(signs.shape, dtype=float)
        for q in range(1, self.n + 1):
            out[:, q - 1] = self.levels[q - 1][ups[:, q - 1]]
        return out

    def transfer(self) -> StrategyTransfer:
        """``X = sum_q u_q p_q / sqrt(n)`` on every history."""
        h = histories(self.n)
        vals = (h * self.path_prices(h)).sum(axis=1) / math.sqrt(self.n)
        return StrategyTransfer(self.n, vals)

    def min_gap(self) -> float:
        """Smallest increment of price in ``S`` over levels with two or more nodes."""
        gaps = [np.min(np.diff(lv)) for lv in self.levels if lv.size > 1]
        return float(min(gaps)) if gaps else math.inf

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["q", "s", "price"])
        for q, lv in enumerate(self.levels, start=1):
            for k, p in enumerate(lv):
                w.writerow([q, repr(float(self.state(q, k))), repr(float(p))])
        return buf.getvalue()


def x_from_psi(psi, n: int) -> StrategyTransfer:
    """Transfer ``X(omega) = Psi(S_n(omega))``."""
    return StrategyTransfer(n, np.asarray(psi(terminal_sum(n)), dtype=float))


def history_prices(x: StrategyTransfer) -> list[np.ndarray]:
    """``p_q`` for every prefix, by conditional expectation over the suffix."""
    n = x.n
    out = []
    for q in range(1, n + 1):
        block = x.values.reshape(2 ** (q - 1), 2, 2 ** (n - q)).mean(axis=2)
        out.append(math.sqrt(n) * 0.5 * (block[:, 1] - block[:, 0]))
    return out


def reconstruct_x(prices: list[np.ndarray], n: int) -> StrategyTransfer:
    """Inverse of :func:`history_prices` for centred transfers."""
    h = histories(n)
    idx = np.arange(2**n)
    total = np.zeros(2**n)
    for q in range(1, n + 1):
        prefix = idx >> (n - q + 1)
        total += h[:, q - 1] * prices[q - 1][prefix]
    return StrategyTransfer(n, total / math.sqrt(n))


def strategy_from_x(x: StrategyTransfer) -> PriceTree:
    """Price tree of a centred transfer whose prices depend on ``S`` only."""
    if abs(x.mean) > CENTERING_TOL * max(1.0, float(np.max(np.abs(x.values)))):
        raise PricingError(f"transfer is not centred (mean {x.mean:.3e})")
    n = x.n
    levels = []
    for q, p in enumerate(history_prices(x), start=1):
        prefix = np.arange(2 ** (q - 1))
        ups = np.array([bin(int(i)).count("1") for i in prefix]) if q > 1 else np.zeros(1, dtype=int)
        node = np.zeros(q)
        for k in range(q):
            grp = p[ups == k]
            if np.ptp(grp) > MARKOV_TOL * max(1.0, float(np.max(np.abs(grp)))):
                raise PricingError(f"prices at stage {q} depend on more than the running sum")
            node[k] = grp.mean()
        levels.append(node)
    return PriceTree(n, tuple(levels))


def chi_values(psi, n: int) -> np.ndarray:
    """``chi(x) = sqrt(n)/2 (Psi(x + 1/sqrt(n)) - Psi(x - 1/sqrt(n)))`` on the ``S_{n-1}`` grid."""
    r = math.sqrt(n)
    x = (2.0 * np.arange(n) - (n - 1)) / r
    return 0.5 * r * (np.asarray(psi(x + 1.0 / r)) - np.asarray(psi(x - 1.0 / r)))


def price_tree_from_psi(psi, n: int) -> PriceTree:
    """Prices by the binomial average of ``chi`` over the remaining moves.

    ``p_q(k) = sum_j C(n-q, j) 2^{-(n-q)} chi[k + j]``, where ``chi`` is
    tabulated on the ``S_{n-1}`` grid.
    """
    chi = chi_values(psi, n)
    levels = []
    for q in range(1, n + 1):
        row = _binomial_row(n - q)
        levels.append(np.array([math.fsum(row * chi[k:k + n - q + 1]) for k in range(q)]))
    return PriceTree(n, tuple(levels), chi)


def martingale_check(tree: PriceTree) -> float:
    """Largest one-step drift of the price under fair coin moves."""
    worst = 0.0
    for q in range(1, tree.n):
        nxt = tree.levels[q]
        drift = 0.5 * (nxt[1:] + nxt[:-1]) - tree.levels[q - 1]
        worst = max(worst, float(np.max(np.abs(drift))))
    return worst


def unique_equivalent_measure(tree: PriceTree, tol: float = 1e-14) -> list[np.ndarray]:
    """Up-probability at every non-terminal node making prices a martingale.

    Solves ``q p_{q+1}(k+1) + (1 - q) p_{q+1}(k) = p_q(k)`` node by node.
    Raises :class:`SingularNodeError` when the two successor prices do not
    strictly increase, in which case the solution is not unique.
    """
    for q, lv in enumerate(tree.levels, start=1):
        if lv.size > 1 and np.min(np.diff(lv)) <= tol:
            raise SingularNodeError(f"prices at stage {q} are not strictly increasing in S")
    out = []
    for q in range(1, tree.n):
        nxt = tree.levels[q]
        out.append((tree.levels[q - 1] - nxt[:-1]) / (nxt[1:] - nxt[:-1]))
    return out


# ---------------------------------------------------------------------------
# Historical law
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HistoricalLaw:
    """Law of the informed player's history and type at equilibrium.

    Histories have probability ``2^{-n} / (alpha Y(S_n))``; given a
    history ending at atom ``k`` the type is ``mu`` restricted to
    ``[cuts[k], cuts[k+1]]``.
    """

    n: int
    atom_weights: np.ndarray
    cuts: np.ndarray
    support: np.ndarray
    prior: DensityMeasure

    @staticmethod
    def from_solution(sol) -> "HistoricalLaw":
        n = sol.n
        raw = sol.lam.weights / (sol.alpha * sol.y)
        return HistoricalLaw(n, raw / math.fsum(raw), np.asarray(sol.cuts), sol.nu.support, sol._mu)

    @staticmethod
    def from_weights(sol) -> "HistoricalLaw":
        """Variant using the solved state weights directly."""
        return HistoricalLaw(sol.n, sol.nu.weights.copy(), np.asarray(sol.cuts), sol.nu.support, sol._mu)

    @property
    def omega_weights(self) -> np.ndarray:
        ups = (histories(self.n) > 0).sum(axis=1)
        counts = np.array([math.comb(self.n, int(k)) for k in range(self.n + 1)], dtype=float)
        return self.atom_weights[ups] / counts[ups]

    def segment(self, k: int) -> tuple[float, float]:
        return float(self.cuts[k]), float(self.cuts[k + 1])

    def segment_means(self) -> np.ndarray:
        m0, m1, _ = self.prior.partial_moments(self.cuts[:-1], self.cuts[1:])
        mid = 0.5 * (self.cuts[:-1] + self.cuts[1:])
        return np.divide(m1, m0, out=mid.copy(), where=np.asarray(m0) > 0.0)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "atoms": [{"s": float(s), "weight": float(w), "segment": list(self.segment(k))}
                      for k, (s, w) in enumerate(zip(self.support, self.atom_weights))],
        }


# ---------------------------------------------------------------------------
# Payoffs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleSet:
    """Explicit ``(omega, L)`` pairs with optional probabilities."""

    signs: np.ndarray
    types: np.ndarray
    probs: Optional[np.ndarray] = None


def _transfer_of(strategy: Union[PriceTree, StrategyTransfer]) -> StrategyTransfer:
    return strategy.transfer() if isinstance(strategy, PriceTree) else strategy


def _segment_nodes(law: HistoricalLaw, order: int = 32):
    x, w = np.polynomial.legendre.leggauss(order)
    lo, hi = law.cuts[:-1, None], law.cuts[1:, None]
    ell = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
    fw = np.asarray(law.prior.pdf(ell)) * w
    mass = fw.sum(axis=1, keepdims=True)
    # zero-width tail segments collapse to their midpoint
    flat = mass[:, 0] <= 0.0
    fw[flat] = 0.0
    fw[flat, 0] = 1.0
    ell[flat] = 0.5 * (lo[flat] + hi[flat])
    mass[flat] = 1.0
    return ell, fw / mass


def _expect_over_law(law: HistoricalLaw, x: StrategyTransfer, func) -> float:
    n = law.n
    s = terminal_sum(n)
    ups = (histories(n) > 0).sum(axis=1)
    ell, cw = _segment_nodes(law)
    vals = func(ell[ups] * s[:, None] - x.values[:, None])
    inner = (vals * cw[ups]).sum(axis=1)
    return math.fsum(law.omega_weights * inner)


def payoff_g1(joint: Union[HistoricalLaw, SampleSet], strategy: Union[PriceTree, StrategyTransfer]) -> float:
    """Expected gain ``E[(1/sqrt(n)) sum_q u_q (L - p_q)] = E[L S_n - X]``."""
    if isinstance(joint, SampleSet):
        signs = np.atleast_2d(joint.signs)
        n = signs.shape[1]
        if isinstance(strategy, PriceTree):
            p = strategy.path_prices(signs)
            gain = (signs * (np.asarray(joint.types)[:, None] - p)).sum(axis=1) / math.sqrt(n)
        else:
            idx = ((signs > 0).astype(np.int64) * (1 << np.arange(n - 1, -1, -1))).sum(axis=1)
            gain = np.asarray(joint.types) * signs.sum(axis=1) / math.sqrt(n) - strategy.values[idx]
        probs = np.full(gain.size, 1.0 / gain.size) if joint.probs is None else np.asarray(joint.probs)
        return math.fsum(probs * gain)
    return _expect_over_law(joint, _transfer_of(strategy), lambda z: z)


def payoff_g2(joint: HistoricalLaw, strategy: Union[PriceTree, StrategyTransfer], H: RiskFunction) -> float:
    """Expected risk ``E[H(L S_n - X)]`` of the uninformed player."""
    return _expect_over_law(joint, _transfer_of(strategy), H.h)


# ---------------------------------------------------------------------------
# Nash certification
# ---------------------------------------------------------------------------


def epsilon_nash_bruteforce(sol, H: RiskFunction, grid_size: int = 2000,
                            x: Optional[StrategyTransfer] = None) -> tuple[float, float]:
    """Best-response slacks of both players by exhaustive enumeration.

    Returns ``(eps1, eps2)``. ``eps1`` is the largest gain a type on the
    grid (plus every segment cut) could obtain by deviating from the
    history selected by the solution. ``eps2`` is the largest directional
    derivative of the uninformed player's risk along the centred
    directions ``2^n 1_omega - 1``, holding the informed strategy fixed.
    The transfer defaults to the one implied by the solution's price tree.
    """
    n = sol.n
    if n is None or n > 4:
        raise PricingError("brute-force certification is limited to n <= 4")
    if x is None:
        x = price_tree_from_psi(sol.psi, n).transfer()
    s = terminal_sum(n)
    ups = (histories(n) > 0).sum(axis=1)
    cuts = np.asarray(sol.cuts)
    ell = np.unique(np.concatenate([np.linspace(cuts[0], cuts[-1], grid_size), cuts]))

    gains = ell[:, None] * s[None, :] - x.values[None, :]
    best = gains.max(axis=1)
    k_sel = np.clip(np.searchsorted(cuts, ell, side="right") - 1, 0, n)
    achieved = np.empty_like(ell)
    for k in range(n + 1):
        mask = ups == k
        achieved[k_sel == k] = np.mean(gains[k_sel == k][:, mask], axis=1) if mask.any() else -np.inf
    eps1 = float(np.max(best - achieved))

    law = HistoricalLaw.from_weights(sol)
    cell, cw = _segment_nodes(law)
    marg = (H.h_prime(cell[ups] * s[:, None] - x.values[:, None]) * cw[ups]).sum(axis=1)
    pi = law.omega_weights
    mean_marg = math.fsum(pi * marg)
    eps2 = float(np.max(np.abs(2**n * pi * marg - mean_marg)))
    return eps1, eps2
