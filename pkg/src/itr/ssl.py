"""Self-supervised pre-text losses over discovered groups.

Pull-and-repulsion (PAR) draws row-normalised users toward the group centers
and pushes the centers apart. Pseudo group recommendation (PGR) assigns users
to groups by a global distance threshold, counts the assigned members'
interactions per item and regresses group-item scores onto those counts.
All gradients are analytic and flow through the row normalisation.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .data import InteractionMatrix

log = logging.getLogger(__name__)

_ITEM_BLOCK = 4096


@dataclass
class PseudoLabels:
    D: np.ndarray
    A_prime: np.ndarray
    threshold: float
    Q_prime: np.ndarray | None = None

    def summary(self, bins: int = 10) -> dict:
        """Shapes, sparsity and histograms, for debug dumps."""
        out = {
            "D_shape": list(self.D.shape),
            "threshold": float(self.threshold),
            "A_density": float(self.A_prime.mean()) if self.A_prime.size else 0.0,
            "users_without_group": int((self.A_prime.sum(axis=1) == 0).sum()),
            "group_sizes": np.bincount(self.A_prime.sum(axis=0).astype(np.int64)).tolist()
            if self.A_prime.size else [],
        }
        if self.D.size:
            counts, edges = np.histogram(self.D, bins=bins)
            out["D_hist"] = {"counts": counts.tolist(), "edges": [float(e) for e in edges]}
        if self.Q_prime is not None:
            out["Q_shape"] = list(self.Q_prime.shape)
            out["Q_nonzero"] = int(np.count_nonzero(self.Q_prime))
            out["Q_max"] = float(self.Q_prime.max()) if self.Q_prime.size else 0.0
        return out


def _unit_rows(M, what):
    M = np.asarray(M, dtype=np.float64)
    norms = np.linalg.norm(M, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"{what} has zero-norm rows; cannot normalise")
    return M / norms[:, None], norms


def _through_normalisation(unit, norms, grad_unit):
    # d(x/|x|)/dx applied to the upstream gradient
    radial = np.einsum("nd,nd->n", grad_unit, unit)
    return (grad_unit - radial[:, None] * unit) / norms[:, None]


def par_terms(U, G) -> tuple[float, float]:
    """Return the (pull, repulsion) parts of the PAR loss."""
    loss, pull, rep, *_ = _par(U, G, None, need_grad=False)
    return pull, rep


def par_loss_and_grad(U, G, assigned=None):
    """Pull-and-repulsion loss and gradients.

    ``pull = 1/(n k') sum_ij |u_i - g_j|^2`` and
    ``repulsion = -1/((k'-1) k') sum_{i != j} |g_i - g_j|^2`` on row-normalised
    copies. If ``assigned`` (an n x k' 0/1 matrix) is given, the pull term
    averages only over the assigned pairs.

    Returns ``(loss, grad_U, grad_G)``.
    """
    loss, _, _, gU, gG = _par(U, G, assigned, need_grad=True)
    return loss, gU, gG


def _par(U, G, assigned, need_grad):
    Ut, un = _unit_rows(U, "U")
    Gt, gn = _unit_rows(G, "G'")
    n, k = Ut.shape[0], Gt.shape[0]
    if n < 1 or k < 1:
        raise ValueError("PAR needs at least one user and one center")
    gbar = Gt.mean(axis=0)
    g_dev = Gt - gbar
    spread = float(np.einsum("kd,kd->", g_dev, g_dev))
    gGt = np.zeros_like(Gt)

    if assigned is None:
        # sum_j |u - g_j|^2 = k |u - gbar|^2 + sum_j |g_j - gbar|^2
        u_dev = Ut - gbar
        pull = float(np.einsum("nd,nd->", u_dev, u_dev)) / n + spread / k
        gUt = (2.0 / n) * u_dev
        gGt += (2.0 / k) * g_dev - (2.0 / (n * k)) * u_dev.sum(axis=0)
    else:
        A = np.asarray(assigned, dtype=np.float64)
        cnt = A.sum()
        if cnt == 0:
            pull = 0.0
            gUt = np.zeros_like(Ut)
        else:
            r = A.sum(axis=1)
            c = A.sum(axis=0)
            cross = A * (Ut @ Gt.T)
            pull = float((r * np.einsum("nd,nd->n", Ut, Ut)).sum()
                         + (c * np.einsum("kd,kd->k", Gt, Gt)).sum() - 2.0 * cross.sum()) / cnt
            gUt = 2.0 * (r[:, None] * Ut - A @ Gt) / cnt
            gGt += 2.0 * (c[:, None] * Gt - A.T @ Ut) / cnt

    if k < 2:
        warnings.warn("a single group center: repulsion term set to 0", RuntimeWarning, stacklevel=3)
        rep = 0.0
    else:
        # sum_{i != j} |g_i - g_j|^2 = 2 k sum_j |g_j - gbar|^2
        rep = -2.0 * spread / (k - 1)
        gGt += (-4.0 / (k - 1)) * g_dev

    loss = pull + rep
    if not need_grad:
        return loss, pull, rep, None, None
    return loss, pull, rep, _through_normalisation(Ut, un, gUt), _through_normalisation(Gt, gn, gGt)


def assignment_from_distances(D) -> tuple[np.ndarray, float]:
    """Strict global-mean threshold: ``a_ij = 1`` iff ``D_ij < sum(D) / (n k')``."""
    D = np.asarray(D, dtype=np.float64)
    threshold = float(D.sum() / D.size)
    return (D < threshold).astype(np.int8), threshold


def pseudo_assignment(U, G) -> PseudoLabels:
    """Distances between normalised users and centers, and the thresholded assignment."""
    Ut, _ = _unit_rows(U, "U")
    Gt, _ = _unit_rows(G, "G'")
    D = cdist(Ut, Gt)
    A, threshold = assignment_from_distances(D)
    return PseudoLabels(D=D, A_prime=A, threshold=threshold)


def pseudo_group_interactions(A_prime, P, binarize: bool = False) -> np.ndarray:
    """``Q' = A'^T P``: per group, how many assigned members interacted with each item."""
    A = np.asarray(A_prime, dtype=np.float64)
    if isinstance(P, InteractionMatrix):
        P = P.to_csr()
    if A.shape[0] != P.shape[0]:
        raise ValueError(f"A' has {A.shape[0]} rows but P has {P.shape[0]}")
    if sp.issparse(P):
        Q = np.asarray((P.T @ A).T)
    else:
        Q = A.T @ np.asarray(P, dtype=np.float64)
    if binarize:
        Q = (Q > 0).astype(np.float64)
    return Q


def pgr_loss_and_grad(G, I, Q, item_block: int = _ITEM_BLOCK):
    """``1/(k' m) * sum (G I^T - Q')^2`` and its gradients, in item blocks.

    Returns ``(loss, grad_G, grad_I)``.
    """
    G = np.asarray(G, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    k, m = G.shape[0], I.shape[0]
    if k == 0 or m == 0:
        raise ValueError("PGR needs at least one group and one item")
    if Q.shape != (k, m):
        raise ValueError(f"Q' has shape {Q.shape}, expected {(k, m)}")
    scale = 1.0 / (k * m)
    loss = 0.0
    gG = np.zeros_like(G)
    gI = np.empty_like(I)
    for s in range(0, m, item_block):
        Ib = I[s:s + item_block]
        R = G @ Ib.T - Q[:, s:s + item_block]
        loss += float(np.einsum("ij,ij->", R, R))
        gG += R @ Ib
        gI[s:s + item_block] = R.T @ G
    return loss * scale, 2.0 * scale * gG, 2.0 * scale * gI
