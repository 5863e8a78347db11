"""Group identification: adaptive density estimation and explore/exploit merge-and-split.

Every user embedding starts as a candidate group center. Each candidate gets
a density from a small grid of radius proposals; candidates are then processed
densest first. At each step the densest unprocessed candidate either spawns a
new candidate between itself and the previously processed center (explore,
probability ``alpha``) or absorbs the mutually reachable candidates around it
(exploit). The number of groups falls out of the procedure.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

log = logging.getLogger(__name__)

DEFAULT_Q = (0.1, 0.2, 0.3)
_BLOCK = 1024


def check_q_grid(q_grid) -> np.ndarray:
    q = np.asarray(q_grid, dtype=np.float64).reshape(-1)
    if q.size == 0 or np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0):
        raise ValueError(f"quantile grid must be strictly increasing values in (0, 1), got {q.tolist()}")
    return q


def pairwise_distances(points) -> np.ndarray:
    """Euclidean distance matrix with an exact zero diagonal."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise ValueError("pairwise_distances needs at least two points")
    return squareform(pdist(points, "euclidean"))


def _live_others(i, D, live):
    row = np.asarray(D[i], dtype=np.float64)
    mask = np.ones(row.size, dtype=bool) if live is None else np.asarray(live, dtype=bool).copy()
    mask[i] = False
    if not mask.any():
        raise ValueError(f"candidate {i} has no other live candidate")
    return row[mask]


def _radii(dmin, dmax, q):
    return dmin + (dmax - dmin) * q


def _densities(counts, radii):
    return counts / (np.pi * (radii * radii))


def radius_proposals(i: int, D, q_grid=DEFAULT_Q, live=None) -> np.ndarray:
    """``d_min + (d_max - d_min) * q`` for each q, min/max over the other live candidates."""
    others = _live_others(i, D, live)
    return _radii(others.min(), others.max(), check_q_grid(q_grid))


def _density_from_others(others, q):
    radii = _radii(others.min(), others.max(), q)
    if np.any(radii <= 0):
        raise ValueError("zero radius proposal: merge exact duplicates before estimating density")
    counts = 1 + (others[:, None] <= radii[None, :]).sum(axis=0)
    dens = _densities(counts, radii)
    best = int(np.argmax(dens))
    return float(dens[best]), float(radii[best])


def adaptive_density(i: int, D, q_grid=DEFAULT_Q, live=None) -> tuple[float, float]:
    """Return ``(mu, r_star)`` for candidate ``i``.

    ``mu = max_q count{j live: D[i, j] <= r_q} / (pi r_q^2)``, the count
    including ``i`` itself. ``r_star`` is the radius attaining the maximum,
    the smallest one on ties.
    """
    return _density_from_others(_live_others(i, D, live), check_q_grid(q_grid))


def greedy_alpha(s_explore: int, s_all: int) -> float:
    """Exploration probability ``exp(-s_explore^2 / (s_all + 1))``."""
    if s_all < 0:
        raise ValueError("s_all must be >= 0")
    return math.exp(-(s_explore * s_explore) / (s_all + 1))


def explore(current, previous, rng, sigma: float | None = None) -> np.ndarray:
    """New candidate ``sigma * current + (1 - sigma) * previous``, sigma ~ N(0.5, 0.5) unclipped."""
    if previous is None:
        raise ValueError("explore needs a previous center")
    if sigma is None:
        sigma = float(rng.normal(0.5, 0.5))
    current = np.asarray(current, dtype=np.float64)
    previous = np.asarray(previous, dtype=np.float64)
    return sigma * current + (1.0 - sigma) * previous


@dataclass
class MergeReport:
    center: int
    members: np.ndarray
    k_before: int
    k_after: int


@dataclass
class StepRecord:
    action: str  # "explore" or "exploit"
    center: int
    k_before: int
    k_after: int
    merged: int = 1


@dataclass
class CandidateSet:
    """Group candidates. Arrays are indexed by candidate id; dead ids stay in place.

    ``centers``/``radii``/``densities`` give the live rows in id order, which is
    the G' matrix handed to training.
    """

    positions: np.ndarray
    radius: np.ndarray
    density: np.ndarray
    live: np.ndarray
    processed: np.ndarray
    explored: np.ndarray
    n_initial: int
    n_removed: int = 0
    n_explored: int = 0
    n_pruned: int = 0
    n_used: int = 0
    steps: list[StepRecord] = field(default_factory=list)

    @classmethod
    def empty(cls, capacity: int, d: int, n_initial: int) -> "CandidateSet":
        return cls(
            positions=np.zeros((capacity, d)),
            radius=np.full(capacity, np.nan),
            density=np.full(capacity, np.nan),
            live=np.zeros(capacity, dtype=bool),
            processed=np.zeros(capacity, dtype=bool),
            explored=np.zeros(capacity, dtype=bool),
            n_initial=n_initial,
        )

    @classmethod
    def from_arrays(cls, positions, radius, density) -> "CandidateSet":
        positions = np.asarray(positions, dtype=np.float64)
        k = positions.shape[0]
        cs = cls.empty(k, positions.shape[1], k)
        cs.positions[:] = positions
        cs.radius[:] = radius
        cs.density[:] = density
        cs.live[:] = True
        cs.n_used = k
        return cs

    @property
    def k_prime(self) -> int:
        return int(self.live.sum())

    @property
    def live_ids(self) -> np.ndarray:
        return np.flatnonzero(self.live)

    @property
    def centers(self) -> np.ndarray:
        return self.positions[self.live].copy()

    @property
    def radii(self) -> np.ndarray:
        return self.radius[self.live].copy()

    @property
    def densities(self) -> np.ndarray:
        return self.density[self.live].copy()

    def add(self, point, radius=np.nan, density=np.nan, explored=False) -> int:
        c = self.n_used
        if c >= self.positions.shape[0]:
            raise RuntimeError("candidate capacity exhausted")
        self.positions[c] = point
        self.radius[c] = radius
        self.density[c] = density
        self.live[c] = True
        self.explored[c] = explored
        self.n_used += 1
        return c

    def distances_from(self, i: int, ids=None) -> np.ndarray:
        ids = self.live_ids if ids is None else ids
        diff = self.positions[ids] - self.positions[i]
        return np.sqrt(np.einsum("kd,kd->k", diff, diff))


def merge_split(i: int, cset: CandidateSet, D=None) -> MergeReport:
    """Exploit step for candidate ``i``.

    Merge set ``M = {j live: dis(i, j) <= r_i and dis(i, j) <= r_j}``; the
    center of ``i`` becomes the mean of ``M``, the other members die and
    ``i`` is marked processed. ``D`` (indexed by candidate id) may be given;
    otherwise distances are taken from the current positions.
    """
    if not cset.live[i] or cset.processed[i]:
        raise ValueError(f"candidate {i} is not a live unprocessed candidate")
    ids = cset.live_ids
    r = cset.radius[ids]
    if np.isnan(cset.radius[i]) or np.isnan(r).any():
        raise ValueError("merge_split needs estimated radii for every live candidate")
    dist = np.asarray(D[i], dtype=np.float64)[ids] if D is not None else cset.distances_from(i, ids)
    members = ids[(dist <= cset.radius[i]) & (dist <= r)]
    k_before = ids.size
    cset.positions[i] = cset.positions[members].mean(axis=0)
    dead = members[members != i]
    cset.live[dead] = False
    cset.n_removed += dead.size
    cset.processed[i] = True
    return MergeReport(i, members, k_before, k_before - members.size + 1)


def _initial_densities(X, q):
    K = X.shape[0]
    mu = np.empty(K)
    rstar = np.empty(K)
    for s in range(0, K, _BLOCK):
        e = min(s + _BLOCK, K)
        Db = cdist(X[s:e], X)
        rows = np.arange(e - s)
        diag = Db[rows, s + rows].copy()
        Db[rows, s + rows] = np.inf
        dmin = Db.min(axis=1)
        Db[rows, s + rows] = -np.inf
        dmax = Db.max(axis=1)
        Db[rows, s + rows] = diag
        radii = _radii(dmin[:, None], dmax[:, None], q[None, :])
        if np.any(radii <= 0):
            raise ValueError("zero radius proposal: merge exact duplicates before estimating density")
        counts = np.empty(radii.shape, dtype=np.int64)
        for j in range(q.size):
            counts[:, j] = np.count_nonzero(Db <= radii[:, j:j + 1], axis=1)
        dens = _densities(counts, radii)
        best = np.argmax(dens, axis=1)
        mu[s:e] = dens[rows, best]
        rstar[s:e] = radii[rows, best]
    return mu, rstar


def _unique_first(points):
    """Distinct rows in order of first appearance, plus the inverse map."""
    _, first, inverse = np.unique(points, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return points[first[order]], rank[inverse.reshape(-1)]


def nearest_center(points, centers) -> np.ndarray:
    """Index of the nearest center for every point (lowest index on ties)."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    out = np.empty(points.shape[0], dtype=np.int64)
    for s in range(0, points.shape[0], _BLOCK):
        out[s:s + _BLOCK] = np.argmin(cdist(points[s:s + _BLOCK], centers), axis=1)
    return out


def identify_groups(points, q_grid=DEFAULT_Q, rng=None, explore_budget: int | None = None,
                    prune_empty: bool = True, on_step=None) -> CandidateSet:
    """Discover group centers in ``points`` without a given group count.

    Parameters
    ----------
    points : (n, d) array
        User embeddings; every row starts as a candidate.
    q_grid : sequence of float
        Quantiles for the radius proposals.
    rng : int or numpy Generator
        Drives the explore decisions and the interpolation weights.
    explore_budget : int, optional
        Maximum number of explore actions; defaults to the number of distinct
        points. ``0`` disables exploring.
    prune_empty : bool
        Drop final centers that are nearest to no input point (explored
        candidates stranded between groups).
    on_step : callable, optional
        Called as ``on_step(record, cset)`` after every explore or exploit step.

    Returns
    -------
    CandidateSet
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("identify_groups needs at least two points")
    q = check_q_grid(q_grid)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = X.shape[0]

    uniq, _ = _unique_first(X)
    K = uniq.shape[0]
    budget = K if explore_budget is None else int(explore_budget)
    cset = CandidateSet.empty(K + max(budget, 0), X.shape[1], n)
    cset.n_removed = n - K
    if K == 1:
        cset.add(uniq[0])
        cset.processed[0] = True
        return cset

    mu, rstar = _initial_densities(uniq, q)
    cset.positions[:K] = uniq
    cset.radius[:K] = rstar
    cset.density[:K] = mu
    cset.live[:K] = True
    cset.n_used = K

    heap = [(-mu[c], c) for c in range(K)]
    heapq.heapify(heap)
    s_all = K
    s_explore = 0
    previous = None
    while heap:
        _, i = heap[0]
        if not cset.live[i] or cset.processed[i]:
            heapq.heappop(heap)
            continue
        if previous is not None and budget > 0 and rng.random() < greedy_alpha(s_explore, s_all):
            s_explore += 1
            budget -= 1
            new = explore(cset.positions[i], cset.positions[previous], rng)
            ids = cset.live_ids
            diff = cset.positions[ids] - new
            others = np.sqrt(np.einsum("kd,kd->k", diff, diff))
            k_before = ids.size
            if others.min() == 0.0:
                # lands exactly on a live candidate; nothing new to add
                cset.steps.append(StepRecord("explore", i, k_before, k_before, 0))
                if on_step is not None:
                    on_step(cset.steps[-1], cset)
                continue
            dens, rad = _density_from_others(others, q)
            c = cset.add(new, rad, dens, explored=True)
            cset.n_explored += 1
            heapq.heappush(heap, (-dens, c))
            cset.steps.append(StepRecord("explore", c, k_before, k_before + 1, 0))
            if on_step is not None:
                on_step(cset.steps[-1], cset)
            continue
        rep = merge_split(i, cset)
        cset.steps.append(StepRecord("exploit", i, rep.k_before, rep.k_after, rep.members.size))
        heapq.heappop(heap)
        previous = i
        if on_step is not None:
            on_step(cset.steps[-1], cset)

    if prune_empty:
        ids = cset.live_ids
        owner = nearest_center(X, cset.positions[ids])
        empty = ids[np.bincount(owner, minlength=ids.size) == 0]
        cset.live[empty] = False
        cset.n_pruned = int(empty.size)
        cset.n_removed += int(empty.size)
    log.debug("identified %d groups from %d points (%d explored, %d pruned)",
              cset.k_prime, n, cset.n_explored, cset.n_pruned)
    return cset
