"""Embedding tables, dot-product scoring, BPR loss and a row-sparse Adam."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

INIT_STD = 0.1


@dataclass
class EmbeddingState:
    U: np.ndarray
    I: np.ndarray

    @property
    def d(self) -> int:
        return int(self.U.shape[1])

    @property
    def n_users(self) -> int:
        return int(self.U.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.I.shape[0])


@dataclass(frozen=True)
class BprBatch:
    """(user, positive item, negative item) triples as parallel arrays."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return int(self.users.size)

    @classmethod
    def from_triples(cls, triples):
        arr = np.asarray(list(triples), dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())

    def take(self, idx) -> "BprBatch":
        return BprBatch(self.users[idx], self.pos[idx], self.neg[idx])


@dataclass
class SparseGrad:
    """Gradient restricted to ``rows`` (unique, ascending) of a 2-D parameter."""

    rows: np.ndarray
    values: np.ndarray

    @classmethod
    def accumulate(cls, rows, values, d=None) -> "SparseGrad":
        rows = np.asarray(rows, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if d is None:
            d = values.shape[1]
        uniq, inv = np.unique(rows, return_inverse=True)
        out = np.zeros((uniq.size, d))
        np.add.at(out, inv.reshape(-1), values)
        return cls(uniq, out)

    @classmethod
    def dense(cls, values) -> "SparseGrad":
        values = np.asarray(values, dtype=np.float64)
        return cls(np.arange(values.shape[0], dtype=np.int64), values)

    def scaled(self, c: float) -> "SparseGrad":
        return SparseGrad(self.rows, self.values * c)

    def __add__(self, other: "SparseGrad") -> "SparseGrad":
        return SparseGrad.accumulate(np.concatenate([self.rows, other.rows]),
                                     np.concatenate([self.values, other.values]),
                                     d=self.values.shape[1])

    def to_dense(self, n_rows: int) -> np.ndarray:
        out = np.zeros((n_rows, self.values.shape[1]))
        out[self.rows] = self.values
        return out


def merge_grads(*grad_dicts) -> dict[str, SparseGrad]:
    """Sum several ``{name: SparseGrad}`` mappings."""
    out: dict[str, SparseGrad] = {}
    for gd in grad_dicts:
        for name, g in gd.items():
            out[name] = out[name] + g if name in out else g
    return out


def init_embeddings(n: int, m: int, d: int, seed) -> EmbeddingState:
    """Gaussian(0, 0.1) user and item tables.

    ``seed`` is an int or a ``numpy.random.Generator``; the users are drawn
    before the items.
    """
    if min(n, m, d) < 1:
        raise ValueError(f"embedding dimensions must be >= 1, got n={n}, m={m}, d={d}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    U = rng.normal(0.0, INIT_STD, size=(n, d))
    I = rng.normal(0.0, INIT_STD, size=(m, d))
    return EmbeddingState(U, I)


def score(state: EmbeddingState, u: int, t: int) -> float:
    if not (0 <= u < state.n_users and 0 <= t < state.n_items):
        raise IndexError(f"score({u}, {t}) out of range for {state.n_users} users, {state.n_items} items")
    return float(state.U[u] @ state.I[t])


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def bpr_loss_and_grad(state: EmbeddingState, batch: BprBatch):
    """Per-user-normalised BPR loss over ``batch``.

    ``loss = -sum_s 1/|D_s| sum_{(j, j') in D_s} log sigmoid(r_sj - r_sj')``
    where ``D_s`` are the triples of user ``s`` inside the batch.

    Returns ``(loss, {"U": SparseGrad, "I": SparseGrad})``.
    """
    if len(batch) == 0:
        raise ValueError("empty BPR batch")
    u, i, j = batch.users, batch.pos, batch.neg
    Uu = state.U[u]
    diff = state.I[i] - state.I[j]
    margin = np.einsum("bd,bd->b", Uu, diff)
    counts = np.bincount(u)
    w = 1.0 / counts[u]
    loss = float(-(w * _log_sigmoid(margin)).sum())
    # d loss / d margin
    coef = -w * _sigmoid(-margin)
    gU = SparseGrad.accumulate(u, coef[:, None] * diff)
    gI = SparseGrad.accumulate(np.concatenate([i, j]),
                               np.concatenate([coef[:, None] * Uu, -coef[:, None] * Uu]))
    return loss, {"U": gU, "I": gI}


def normalize_rows(M, return_norms: bool = False):
    """Divide each row by its Euclidean norm; zero rows stay zero (with a warning)."""
    M = np.asarray(M, dtype=np.float64)
    norms = np.linalg.norm(M, axis=1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero rows left unnormalised", RuntimeWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norms)
    out = M / safe[:, None]
    return (out, norms) if return_norms else out


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, name: str, shape) -> None:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
        elif self.m[name].shape != tuple(shape):
            raise ValueError(f"optimizer moments for {name!r} have shape {self.m[name].shape}, parameter {tuple(shape)}")


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, SparseGrad], opt: OptimizerState) -> None:
    """One Adam step with bias correction, touching only the rows present in ``grads``.

    The step counter is global: rows skipped in a step still see the advanced
    bias correction the next time they are touched (lazy Adam).
    """
    for name, g in grads.items():
        p = params[name]
        if g.values.ndim != 2 or g.values.shape[1:] != p.shape[1:] or g.rows.size != g.values.shape[0]:
            raise ValueError(f"gradient for {name!r} has shape {g.values.shape}, parameter {p.shape}")
        if g.rows.size and (g.rows.min() < 0 or g.rows.max() >= p.shape[0]):
            raise ValueError(f"gradient rows for {name!r} out of range")
        if not np.isfinite(g.values).all():
            bad = g.rows[~np.isfinite(g.values).all(axis=1)]
            raise FloatingPointError(f"non-finite gradient for {name!r} in rows {bad[:10].tolist()}")
        opt.ensure(name, p.shape)
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, g in grads.items():
        r = g.rows
        m = opt.m[name]
        v = opt.v[name]
        mr = b1 * m[r] + (1.0 - b1) * g.values
        vr = b2 * v[r] + (1.0 - b2) * g.values * g.values
        m[r] = mr
        v[r] = vr
        params[name][r] -= opt.lr * (mr / c1) / (np.sqrt(vr / c2) + opt.eps)
