"""Path simulation for the discrete price processes and their limit.

Random numbers come from Philox streams keyed by ``(seed, sampler,
chunk)``. Paths are generated in fixed chunks, so an ensemble does not
depend on how chunks are scheduled and any chunk can be regenerated on
its own.
"""

from __future__ import annotations

import csv
import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .game_pricing import HistoricalLaw, PriceTree
from .measures import wasserstein2, weighted_empirical
from .risk import RiskFunction

CHUNK = 16384
MAGIC = b"CMMV1"
WEIGHT_MEAN_TOL = 1e-10
_TAGS = {"equivalent": 1, "historical": 2, "limit": 3, "limit-historical": 4, "embedding": 5}


class SimulationError(ValueError):
    """Raised for inconsistent ensembles or sampling requests."""


def stream(seed: int, sampler: str, chunk: int) -> np.random.Generator:
    """Independent generator for one chunk of one sampler."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), _TAGS[sampler], int(chunk)])))


def _chunks(num_paths: int):
    for j, start in enumerate(range(0, num_paths, CHUNK)):
        yield j, start, min(CHUNK, num_paths - start)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Sampled paths on a common time grid.

    Attributes
    ----------
    times : ndarray, shape (T,)
    paths : ndarray, shape (N, T)
    law_tag : str
    seed : int
    weights : ndarray, shape (N,), optional
        Likelihood ratios with unit mean.
    extras : dict
        Auxiliary per-path arrays (terminal states, types).
    """

    times: np.ndarray
    paths: np.ndarray
    law_tag: str
    seed: int
    weights: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.paths.ndim != 2 or self.paths.shape[1] != self.times.size:
            raise SimulationError("paths must be a (num_paths, num_times) matrix")
        if not np.all(np.isfinite(self.paths)):
            raise SimulationError("paths must be finite")
        if self.weights is not None:
            if np.any(self.weights <= 0.0) or abs(np.mean(self.weights) - 1.0) > WEIGHT_MEAN_TOL:
                raise SimulationError("weights must be positive with unit mean")

    @property
    def num_paths(self) -> int:
        return self.paths.shape[0]

    def column(self, t: float) -> np.ndarray:
        j = np.flatnonzero(np.abs(self.times - t) <= 1e-12)
        if j.size == 0:
            raise SimulationError(f"time {t} not on the ensemble grid")
        return self.paths[:, j[0]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["path_id", "t", "value"] + (["weight"] if self.weights is not None else [])
        w.writerow(header)
        ts = [repr(float(t)) for t in self.times]
        for i, row in enumerate(self.paths):
            wt = [repr(float(self.weights[i]))] if self.weights is not None else []
            for t, v in zip(ts, row):
                w.writerow([i, t, repr(float(v))] + wt)
        return buf.getvalue()

    def to_bytes(self) -> bytes:
        """Binary layout: magic, header of little-endian 64-bit integers, float64 blocks."""
        tag = self.law_tag.encode()
        flags = 1 if self.weights is not None else 0
        head = MAGIC + struct.pack("<QQQqQ", self.num_paths, self.times.size, flags, self.seed, len(tag)) + tag
        body = self.times.astype("<f8").tobytes() + self.paths.astype("<f8").tobytes()
        if self.weights is not None:
            body += self.weights.astype("<f8").tobytes()
        return head + body

    @staticmethod
    def from_bytes(data: bytes) -> "PathEnsemble":
        if data[:5] != MAGIC:
            raise SimulationError("not an ensemble file")
        n, t, flags, seed, ltag = struct.unpack_from("<QQQqQ", data, 5)
        pos = 5 + 40
        tag = data[pos:pos + ltag].decode()
        pos += ltag
        times = np.frombuffer(data, "<f8", t, pos).astype(float)
        pos += 8 * t
        paths = np.frombuffer(data, "<f8", n * t, pos).astype(float).reshape(n, t)
        pos += 8 * n * t
        weights = np.frombuffer(data, "<f8", n, pos).astype(float) if flags & 1 else None
        return PathEnsemble(times, paths, tag, int(seed), weights)


def _default_times(n: int) -> np.ndarray:
    return np.arange(n + 1) / n


def _stage_index(times: np.ndarray, n: int) -> np.ndarray:
    """Stage ``q = floor(n t)`` read at each time, with stage 1 used at ``t < 1/n``."""
    q = np.floor(n * np.asarray(times) + 1e-9).astype(int)
    return np.clip(q, 1, n)


def _prices_from_signs(tree: PriceTree, signs: np.ndarray, stages: np.ndarray) -> np.ndarray:
    ups = np.concatenate([np.zeros((signs.shape[0], 1), dtype=np.int32),
                          np.cumsum(signs > 0, axis=1, dtype=np.int32)], axis=1)
    out = np.empty((signs.shape[0], stages.size))
    for j, q in enumerate(stages):
        out[:, j] = tree.levels[q - 1][ups[:, q - 1]]
    return out


def sample_equivalent(tree: PriceTree, num_paths: int, seed: int, times=None) -> PathEnsemble:
    """Price paths under fair, independent up and down moves."""
    n = tree.n
    times = _default_times(n) if times is None else np.asarray(times, dtype=float)
    stages = _stage_index(times, n)
    paths = np.empty((num_paths, times.size))
    terminal = np.empty(num_paths)
    for j, start, size in _chunks(num_paths):
        signs = (2 * stream(seed, "equivalent", j).integers(0, 2, (size, n), dtype=np.int8) - 1).astype(np.int8)
        paths[start:start + size] = _prices_from_signs(tree, signs, stages)
        terminal[start:start + size] = signs.sum(axis=1) / math.sqrt(n)
    return PathEnsemble(times, paths, "equivalent", seed, extras={"terminal": terminal})


def sample_historical(sol, tree: PriceTree, num_paths: int, seed: int, times=None,
                      law: Optional[HistoricalLaw] = None) -> PathEnsemble:
    """Price paths when the informed player follows the equilibrium strategy.

    Draw the terminal atom from the historical law, a uniformly random
    history reaching it, and the type from ``mu`` restricted to the
    atom's segment.
    """
    n = tree.n
    law = HistoricalLaw.from_solution(sol) if law is None else law
    times = _default_times(n) if times is None else np.asarray(times, dtype=float)
    stages = _stage_index(times, n)
    lo_cdf = np.asarray(law.prior.cdf(law.cuts[:-1]))
    hi_cdf = np.asarray(law.prior.cdf(law.cuts[1:]))
    paths = np.empty((num_paths, times.size))
    atoms = np.empty(num_paths, dtype=np.int64)
    types = np.empty(num_paths)
    for j, start, size in _chunks(num_paths):
        rng = stream(seed, "historical", j)
        k = rng.choice(n + 1, size=size, p=law.atom_weights)
        base = (np.arange(n)[None, :] < k[:, None]).astype(np.int8)
        signs = (2 * rng.permuted(base, axis=1) - 1).astype(np.int8)
        u = lo_cdf[k] + (hi_cdf[k] - lo_cdf[k]) * rng.random(size)
        paths[start:start + size] = _prices_from_signs(tree, signs, stages)
        atoms[start:start + size] = k
        types[start:start + size] = law.prior.quantile(np.clip(u, 0.0, 1.0))
    return PathEnsemble(times, paths, "historical", seed,
                        extras={"atom": atoms, "terminal": law.support[atoms], "type": types})


# ---------------------------------------------------------------------------
# Skorokhod embedding
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """Successive exit times of ``+-1/sqrt(n)`` bands around the last exit level."""

    n: int
    brownian_dt: float
    tau: np.ndarray
    embedded_walk: np.ndarray
    horizon_extended: bool = False

    @property
    def signs(self) -> np.ndarray:
        prev = np.concatenate([np.zeros((self.tau.shape[0], 1)), self.embedded_walk[:, :-1]], axis=1)
        return np.sign(self.embedded_walk - prev).astype(np.int8)


def skorokhod_embed(n: int, num_paths: int, brownian_dt: Optional[float] = None, seed: int = 0,
                    nominal_horizon: float = 3.0) -> EmbeddingRecord:
    """Embed the scaled walk in a simulated Brownian path.

    Brownian motion is advanced on a grid of step ``brownian_dt``. A band
    exit is detected either at a grid point or, between grid points, by
    the Brownian-bridge crossing probability ``exp(-2 d0 d1 / dt)``; in
    the first case the exit time is placed by linear interpolation and
    in the second at the middle of the step. After an exit the band is
    recentred on the exit level.
    """
    dt = 1.0 / (256 * n) if brownian_dt is None else float(brownian_dt)
    if dt > 1.0 / (100 * n):
        raise SimulationError("brownian_dt must not exceed 1/(100 n)")
    a = 1.0 / math.sqrt(n)
    sd = math.sqrt(dt)
    tau = np.empty((num_paths, n))
    walk = np.empty((num_paths, n))
    extended = False
    block = 512
    for j, start, size in _chunks(num_paths):
        rng = stream(seed, "embedding", j)
        b = np.zeros(size)
        centre = np.zeros(size)
        count = np.zeros(size, dtype=np.int64)
        idx = np.arange(size)
        t = 0.0
        while idx.size:
            z = rng.standard_normal((block, size))
            u = rng.random((block, size))
            for r in range(block):
                if not idx.size:
                    break
                b0 = b[idx]
                c = centre[idx]
                b1 = b0 + sd * z[r, idx]
                up, dn = c + a, c - a
                hit_up = b1 >= up
                hit_dn = b1 <= dn
                inside = ~(hit_up | hit_dn)
                p_up = np.where(inside, np.exp(-2.0 * (up - b0) * (up - b1) / dt), 0.0)
                p_dn = np.where(inside, np.exp(-2.0 * (b0 - dn) * (b1 - dn) / dt), 0.0)
                ur = u[r, idx]
                bridge_up = inside & (ur < p_up)
                bridge_dn = inside & ~bridge_up & (ur < p_up + p_dn)
                go_up = hit_up | bridge_up
                go_dn = hit_dn | bridge_dn
                crossed = go_up | go_dn
                if crossed.any():
                    level = np.where(go_up, up, dn)
                    frac = np.where(hit_up | hit_dn, (level - b0) / np.where(b1 != b0, b1 - b0, 1.0), 0.5)
                    ids = idx[crossed]
                    slot = count[ids]
                    tau[start + ids, slot] = t + dt * np.clip(frac[crossed], 0.0, 1.0)
                    walk[start + ids, slot] = level[crossed]
                    centre[ids] = level[crossed]
                    count[ids] += 1
                b[idx] = b1
                t += dt
                idx = idx[count[idx] < n]
            if idx.size and t > nominal_horizon and not extended:
                warnings.warn("embedding exceeded its nominal horizon; extending", RuntimeWarning)
                extended = True
            t_block_end = t
            del t_block_end
    return EmbeddingRecord(n, dt, tau, walk, extended)


# ---------------------------------------------------------------------------
# Limit process
# ---------------------------------------------------------------------------


def sample_limit(surf, ode, H: RiskFunction, num_paths: int, times, seed: int) -> tuple[PathEnsemble, PathEnsemble]:
    """Limit price ``f(B_t, t)`` with and without historical weights.

    Both ensembles share the Brownian paths. The historical one carries
    the weights ``(1/Y) / mean(1/Y)`` with
    ``Y = H'(psi'(B_1) B_1 - psi(B_1))``.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times < 0.0) or np.any(times > 1.0) or np.any(np.diff(times) <= 0.0):
        raise SimulationError("times must be increasing in [0, 1]")
    grid = np.union1d(times, [0.0, 1.0])
    pick = np.searchsorted(grid, times)
    steps = np.sqrt(np.diff(grid))
    paths = np.empty((num_paths, times.size))
    b_end = np.empty(num_paths)
    for j, start, size in _chunks(num_paths):
        rng = stream(seed, "limit", j)
        inc = rng.standard_normal((size, steps.size)) * steps
        b = np.concatenate([np.zeros((size, 1)), np.cumsum(inc, axis=1)], axis=1)
        sel = b[:, pick]
        paths[start:start + size] = surf.f(sel, np.broadcast_to(times, sel.shape))
        b_end[start:start + size] = b[:, -1]
    p, dp, _ = ode.evaluate(b_end)
    inv = 1.0 / H.h_prime(dp * b_end - p)
    weights = inv / np.mean(inv)
    weights = weights / np.mean(weights)
    extras = {"terminal": b_end}
    return (PathEnsemble(times, paths, "limit", seed, extras=extras),
            PathEnsemble(times, paths, "limit-historical", seed, weights, extras))


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FddResult:
    """Per-time W2 and joint summaries between two ensembles."""

    times: np.ndarray
    per_time: np.ndarray
    joint_lower: float
    joint_coupling: Optional[float]


def fdd_distance(e1: PathEnsemble, e2: PathEnsemble, times) -> FddResult:
    """Finite-dimensional distances at the requested times.

    ``joint_lower`` is ``sqrt(sum_t W2_t^2)``, a lower bound on the W2
    distance of the joint laws. ``joint_coupling`` is the root mean
    squared gap under the index pairing of paths, an upper bound,
    available when both ensembles are unweighted and of equal size.
    """
    times = np.asarray(times, dtype=float)
    per = []
    for t in times:
        try:
            x, y = e1.column(t), e2.column(t)
        except SimulationError as exc:
            raise SimulationError(f"ensembles do not share time {t}") from exc
        per.append(wasserstein2(weighted_empirical(x, e1.weights), weighted_empirical(y, e2.weights)))
    per = np.asarray(per)
    coupling = None
    if e1.weights is None and e2.weights is None and e1.num_paths == e2.num_paths:
        gap = np.stack([e1.column(t) - e2.column(t) for t in times], axis=1)
        coupling = float(math.sqrt(np.mean(np.sum(gap * gap, axis=1))))
    return FddResult(times, per, float(math.sqrt(np.sum(per * per))), coupling)


def bootstrap_w2_floor(values: np.ndarray, reps: int = 20, seed: int = 0, weights=None) -> float:
    """Mean W2 between two bootstrap resamples of one sample (noise floor)."""
    rng = np.random.default_rng(seed)
    values = np.asarray(values, dtype=float)
    out = []
    for _ in range(reps):
        i = rng.integers(0, values.size, values.size)
        k = rng.integers(0, values.size, values.size)
        wi = None if weights is None else weights[i] / np.mean(weights[i])
        wk = None if weights is None else weights[k] / np.mean(weights[k])
        out.append(wasserstein2(weighted_empirical(values[i], wi), weighted_empirical(values[k], wk)))
    return float(np.mean(out))


def empirical_w2_to(values: np.ndarray, law, weights=None) -> float:
    """W2 between a (weighted) sample and a reference law."""
    return wasserstein2(weighted_empirical(values, weights), law)
