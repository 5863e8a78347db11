"""Leave-one-out ranking metrics and silhouette auditing of discovered groups."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .data import EvalSet, GroupMembership
from .gim import nearest_center

K_VALUES = (5, 10)
REPORTED = ("hr@5", "hr@10", "ndcg@5", "ndcg@10")


@dataclass
class RankingMetrics:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_cases: int
    mode: str = "user"
    extra: dict = field(default_factory=dict)

    @property
    def avg(self) -> float:
        """Mean of HR@5, HR@10, NDCG@5 and NDCG@10 (over the ks present)."""
        vals = [self.hr[k] for k in K_VALUES if k in self.hr] + [self.ndcg[k] for k in K_VALUES if k in self.ndcg]
        return float(np.mean(vals)) if vals else float("nan")

    def as_row(self, prefix: str = "") -> dict:
        row = {}
        for k in sorted(self.hr):
            row[f"{prefix}hr@{k}"] = self.hr[k]
        for k in sorted(self.ndcg):
            row[f"{prefix}ndcg@{k}"] = self.ndcg[k]
        row[f"{prefix}avg"] = self.avg
        row[f"{prefix}n_cases"] = self.n_cases
        return row


def ranks_from_scores(pos_scores, neg_scores) -> np.ndarray:
    """Pessimistic rank: ``1 + #{negatives scoring >= the positive}`` per row."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if neg.ndim != 2 or neg.shape[1] == 0:
        raise ValueError("every case needs at least one negative")
    return 1 + (neg >= pos[:, None]).sum(axis=1)


def rank_case(pos_score: float, neg_scores, k_values=K_VALUES) -> dict[int, tuple[int, float]]:
    """Per-k ``(hit, ndcg)`` for one positive against its negatives.

    >>> rank_case(1.0, [0.0, 2.0, 3.0])[5]
    (1, 0.5)
    """
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(1, -1)
    rank = int(ranks_from_scores([pos_score], neg)[0])
    return {k: (int(rank <= k), float(1.0 / np.log2(rank + 1)) if rank <= k else 0.0) for k in k_values}


def metrics_from_ranks(ranks, k_values=K_VALUES, mode: str = "user") -> RankingMetrics:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no evaluation cases")
    gain = 1.0 / np.log2(ranks + 1.0)
    hr = {k: float((ranks <= k).mean()) for k in k_values}
    ndcg = {k: float(np.where(ranks <= k, gain, 0.0).mean()) for k in k_values}
    return RankingMetrics(hr, ndcg, int(ranks.size), mode)


def _case_ranks(vectors, I, eval_set: EvalSet):
    subj = eval_set.subjects
    pos = np.einsum("nd,nd->n", vectors, I[eval_set.positives])
    negs = eval_set.uniform_negatives()
    if negs is not None:
        if negs.shape[1] == 0:
            raise ValueError("every case needs at least one negative")
        neg = np.einsum("nd,nkd->nk", vectors, I[negs])
        return ranks_from_scores(pos, neg)
    out = np.empty(subj.size, dtype=np.int64)
    for c, ns in enumerate(eval_set.negatives):
        out[c] = ranks_from_scores(pos[c:c + 1], (I[ns] @ vectors[c])[None, :])[0]
    return out


def _check_items(eval_set: EvalSet, n_items):
    hi = max([eval_set.positives.max(initial=-1)] + [n.max(initial=-1) for n in eval_set.negatives])
    if hi >= n_items:
        raise IndexError(f"item index {hi} out of range for {n_items} item embeddings")


def evaluate_user_rec(model, eval_set: EvalSet, k_values=K_VALUES) -> RankingMetrics:
    """Score ``U[u] . I[t]`` for every leave-one-out user case."""
    U, I = model.U, model.I
    if eval_set.subjects.size and eval_set.subjects.max() >= U.shape[0]:
        raise IndexError(f"user index {eval_set.subjects.max()} out of range for {U.shape[0]} users")
    _check_items(eval_set, I.shape[0])
    return metrics_from_ranks(_case_ranks(U[eval_set.subjects], I, eval_set), k_values, "user")


def group_vectors(model, groups: GroupMembership, subjects, mode: str = "member-mean") -> np.ndarray:
    """Test-time group embeddings: mean of member rows, or that mean snapped to the nearest center."""
    U = model.U
    subjects = np.asarray(subjects, dtype=np.int64)
    out = np.empty((subjects.size, U.shape[1]))
    for c, g in enumerate(subjects.tolist()):
        if g >= groups.n_groups:
            raise IndexError(f"group {g} has no membership record")
        mem = groups.members[g]
        if mem.size == 0:
            raise ValueError(f"group {g} has no members")
        if mem.max() >= U.shape[0]:
            raise IndexError(f"group {g} member {int(mem.max())} has no user embedding")
        out[c] = U[mem].mean(axis=0)
    if mode == "nearest-center":
        G = getattr(model, "G", None)
        if G is None or len(G) == 0:
            raise ValueError("nearest-center mode needs identified group centers")
        out = G[nearest_center(out, G)]
    elif mode != "member-mean":
        raise ValueError(f"unknown group mode {mode!r}")
    return out


def evaluate_group_rec(model, groups: GroupMembership, eval_set: EvalSet, k_values=K_VALUES,
                       mode: str = "member-mean") -> RankingMetrics:
    _check_items(eval_set, model.I.shape[0])
    vecs = group_vectors(model, groups, eval_set.subjects, mode)
    met = metrics_from_ranks(_case_ranks(vecs, model.I, eval_set), k_values, f"group/{mode}")
    return met


def silhouette(points, assignment) -> float:
    """Mean silhouette ``(b - a) / max(a, b)``; members of singleton clusters score 0.

    Parameters
    ----------
    points : (n, d) array
    assignment : (n,) int array
        Cluster label per point; at least two distinct labels.
    """
    X = np.asarray(points, dtype=np.float64)
    lab = np.asarray(assignment)
    _, lab = np.unique(lab, return_inverse=True)
    lab = lab.reshape(-1)
    k = int(lab.max()) + 1 if lab.size else 0
    if k < 2:
        raise ValueError("silhouette needs at least two non-empty clusters")
    sizes = np.bincount(lab, minlength=k).astype(np.float64)
    n = X.shape[0]
    sums = np.zeros((n, k))
    block = max(1, 2_000_000 // max(n, 1))
    for s in range(0, n, block):
        Db = cdist(X[s:s + block], X)
        for c in range(k):
            sums[s:s + block, c] = Db[:, lab == c].sum(axis=1)
    own = sizes[lab]
    rows = np.arange(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = sums[rows, lab] / (own - 1)
        means = sums / sizes[None, :]
    means[rows, lab] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_val = np.where(denom > 0, (b - a) / denom, 0.0)
    s_val[own == 1] = 0.0
    return float(s_val.mean())


def metrics_csv(rows: list[dict]) -> str:
    """Rows as CSV text with a stable column order (first-seen order)."""
    cols: list[str] = []
    for r in rows:
        cols.extend(c for c in r if c not in cols)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r.get(c, "")) for c in cols})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def metrics_report(results: dict[str, RankingMetrics], **flags) -> str:
    """Structured-text (JSON) report of per-k values, case counts and mode flags."""
    out = {"flags": flags, "results": {}}
    for name, met in results.items():
        out["results"][name] = {
            "hr": {str(k): v for k, v in sorted(met.hr.items())},
            "ndcg": {str(k): v for k, v in sorted(met.ndcg.items())},
            "avg": met.avg,
            "n_cases": met.n_cases,
            "mode": met.mode,
        }
    return json.dumps(out, indent=2, sort_keys=True) + "\n"
