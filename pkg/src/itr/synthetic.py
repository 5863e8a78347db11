"""Synthetic inputs: Gaussian blobs and planted-group recommendation datasets."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import (EvalSet, GroupMembership, InteractionMatrix, write_eval_negatives,
                   write_group_members, write_interactions)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def blob_centers(k: int, sep: float, rng, box_factor: float = 3.0, dim: int = 2,
                 max_tries: int = 100_000) -> np.ndarray:
    """``k`` centers uniform in a box of side ``box_factor * sep * sqrt(k)``, pairwise ``>= sep`` apart."""
    rng = _rng(rng)
    side = box_factor * sep * np.sqrt(k)
    centers = []
    for _ in range(max_tries):
        c = rng.uniform(0.0, side, dim)
        if all(np.linalg.norm(c - o) >= sep for o in centers):
            centers.append(c)
            if len(centers) == k:
                return np.array(centers)
    raise RuntimeError(f"could not place {k} centers {sep} apart; enlarge box_factor")


def make_blobs(k: int, rng, n_per: int = 100, std: float = 0.05, sep: float | None = None,
               box_factor: float = 3.0, dim: int = 2):
    """Isotropic Gaussian blobs.

    Parameters
    ----------
    k : int
        Number of blobs.
    rng : int or Generator
    n_per : int
        Points per blob.
    std : float
        Per-coordinate standard deviation inside a blob.
    sep : float, optional
        Minimum distance between blob centers; defaults to ``10 * std * sqrt(k)``.
    box_factor : float
        Scales the placement box relative to ``sep * sqrt(k)``.

    Returns
    -------
    points : (k * n_per, dim) array
    labels : (k * n_per,) int array
    centers : (k, dim) array
    """
    rng = _rng(rng)
    sep = 10.0 * std * np.sqrt(k) if sep is None else sep
    centers = blob_centers(k, sep, rng, box_factor=box_factor, dim=dim)
    labels = np.repeat(np.arange(k), n_per)
    points = centers[labels] + rng.normal(0.0, std, size=(labels.size, dim))
    return points, labels, centers


def planted_interactions(n_users: int, n_items: int, n_clusters: int, per_user: int, rng,
                         affinity: float = 0.8):
    """User-item pairs where each user mostly picks items favoured by its latent cluster.

    Items are split round-robin into ``n_clusters`` pools. A user draws each
    interaction from its cluster's pool with probability ``affinity`` and
    from the whole catalogue otherwise. Returns ``(users, items, cluster)``.
    """
    rng = _rng(rng)
    if per_user >= n_items:
        raise ValueError("per_user must leave at least one non-interacted item")
    cluster = rng.integers(0, n_clusters, n_users)
    pools = [np.arange(c, n_items, n_clusters) for c in range(n_clusters)]
    users, items = [], []
    for u in range(n_users):
        pool = pools[cluster[u]]
        chosen: set[int] = set()
        while len(chosen) < per_user:
            t = int(rng.choice(pool)) if rng.random() < affinity else int(rng.integers(n_items))
            chosen.add(t)
        users.extend([u] * per_user)
        items.extend(sorted(chosen))
    return np.array(users), np.array(items), cluster


def _leave_one_out(users, items, rng):
    """Split off one random pair per subject as the test positive."""
    order = np.lexsort((items, users))
    users, items = users[order], items[order]
    starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
    ends = np.r_[starts[1:], users.size]
    pick = starts + (rng.random(starts.size) * (ends - starts)).astype(np.int64)
    mask = np.ones(users.size, dtype=bool)
    mask[pick] = False
    return users[mask], items[mask], users[pick], items[pick]


def _negatives(subjects, seen, n_items, n_neg, rng):
    out = []
    for s in subjects:
        allowed = np.setdiff1d(np.arange(n_items), seen[s])
        out.append(np.sort(rng.choice(allowed, size=n_neg, replace=False)))
    return tuple(out)


def write_planted_dataset(out_dir, n_users: int = 300, n_items: int = 200, n_clusters: int = 6,
                          per_user: int = 12, n_groups: int = 120, group_size=(2, 5),
                          per_group: int = 6, n_neg: int = 100, affinity: float = 0.8, seed=0) -> Path:
    """Write a leave-one-out dataset with planted user clusters and groups.

    Groups draw their members from a single latent cluster and their items
    from that cluster's pool, so the group signal lives in the user
    embeddings that training discovers without seeing the groups.
    """
    rng = _rng(seed)
    if n_neg + per_user + 1 > n_items or n_neg + per_group + 1 > n_items:
        raise ValueError("not enough items to draw negatives")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    u, t, cluster = planted_interactions(n_users, n_items, n_clusters, per_user + 1, rng, affinity)
    tr_u, tr_t, te_u, te_t = _leave_one_out(u, t, rng)
    seen = {s: t[u == s] for s in range(n_users)}
    train = InteractionMatrix.from_pairs(n_users, n_items, tr_u, tr_t)
    negs = _negatives(te_u, seen, n_items, n_neg, rng)
    write_interactions(train, out / "userRatingTrain.txt")
    write_interactions(InteractionMatrix.from_pairs(n_users, n_items, te_u, te_t), out / "userRatingTest.txt")
    write_eval_negatives(EvalSet(te_u, te_t, negs, "user"), out / "userRatingNegative.txt")

    by_cluster = [np.flatnonzero(cluster == c) for c in range(n_clusters)]
    pools = [np.arange(c, n_items, n_clusters) for c in range(n_clusters)]
    members, g_users, g_items = [], [], []
    for g in range(n_groups):
        c = int(rng.integers(n_clusters))
        size = int(rng.integers(group_size[0], group_size[1] + 1))
        size = min(size, by_cluster[c].size)
        members.append(np.sort(rng.choice(by_cluster[c], size=size, replace=False)))
        chosen: set[int] = set()
        while len(chosen) < per_group + 1:
            chosen.add(int(rng.choice(pools[c])) if rng.random() < affinity else int(rng.integers(n_items)))
        g_users.extend([g] * len(chosen))
        g_items.extend(sorted(chosen))
    g_users, g_items = np.array(g_users), np.array(g_items)
    gtr_u, gtr_t, gte_u, gte_t = _leave_one_out(g_users, g_items, rng)
    gseen = {s: g_items[g_users == s] for s in range(n_groups)}
    gnegs = _negatives(gte_u, gseen, n_items, n_neg, rng)
    write_group_members(GroupMembership(n_groups, tuple(members)), out / "groupMember.txt")
    write_interactions(InteractionMatrix.from_pairs(n_groups, n_items, gtr_u, gtr_t), out / "groupRatingTrain.txt")
    write_interactions(InteractionMatrix.from_pairs(n_groups, n_items, gte_u, gte_t), out / "groupRatingTest.txt")
    write_eval_negatives(EvalSet(gte_u, gte_t, gnegs, "group"), out / "groupRatingNegative.txt")
    return out
