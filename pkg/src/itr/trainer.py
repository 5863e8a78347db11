"""Training loop: BPR warm-up, group identification, then joint BPR + PAR + PGR.

One ``numpy.random.Generator`` per run drives initialisation, negative
sampling, shuffling and identification, always in the same order, so a run
is a pure function of its config and training pairs.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, InteractionMatrix
from .embed import (BprBatch, EmbeddingState, OptimizerState, SparseGrad, bpr_loss_and_grad,
                    init_embeddings, optimizer_step)
from .errors import ConfigError
from .gim import DEFAULT_Q, CandidateSet, check_q_grid, identify_groups
from .ssl import (PseudoLabels, par_loss_and_grad, par_terms, pgr_loss_and_grad,
                  pseudo_assignment, pseudo_group_interactions)

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "l_par", "l_pgr", "l_u2i", "l_total", "k_prime", "n_triples")

PROFILES = {
    "mafengwo": {"a": 0.01, "b": 10.0, "lr": 1e-4},
    "camra2011": {"a": 10.0, "b": 10.0, "lr": 1e-3},
}


@dataclass(frozen=True)
class LossWeights:
    a: float = 0.0
    b: float = 0.0


def combine_losses(w: LossWeights, l_par: float, l_pgr: float, l_u2i: float) -> float:
    """``a * l_par + b * l_pgr + l_u2i``."""
    vals = (w.a, w.b, l_par, l_pgr, l_u2i)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite loss component or weight: {vals}")
    return w.a * l_par + w.b * l_pgr + l_u2i


@dataclass
class TrainConfig:
    d: int = 32
    a: float = 0.01
    b: float = 10.0
    lr: float = 1e-4
    epochs: int = 100
    q_grid: tuple = DEFAULT_Q
    gid_epoch: int = 10
    negatives_per_positive: int = 4
    batch_size: int = 256
    seed: int = 0
    explore_budget: int | None = None
    pull_assigned_only: bool = False
    binarize_q_prime: bool = False
    reidentify_every: int = 0
    relabel_every: int = 1
    ssl_mode: str = "batch"
    eval_every: int = 0
    group_mode: str = "member-mean"

    def __post_init__(self):
        self.q_grid = tuple(float(q) for q in self.q_grid)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(float(self.a), float(self.b))

    @classmethod
    def from_profile(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        return cls.from_dict({**PROFILES[name], **overrides})

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["q_grid"] = list(self.q_grid)
        return out

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        for name in ("d", "epochs", "gid_epoch", "negatives_per_positive", "batch_size", "seed",
                     "reidentify_every", "relabel_every", "eval_every"):
            v = getattr(self, name)
            need(isinstance(v, (int, np.integer)) and not isinstance(v, bool), f"{name} must be an integer, got {v!r}")
        need(self.d >= 1, "d must be >= 1")
        need(self.epochs >= 1, "epochs must be >= 1")
        need(0 <= self.gid_epoch < self.epochs, f"gid_epoch must lie in [0, epochs), got {self.gid_epoch}")
        need(isinstance(self.lr, (int, float)) and self.lr > 0 and math.isfinite(self.lr), "lr must be > 0")
        for name in ("a", "b"):
            v = getattr(self, name)
            need(isinstance(v, (int, float)) and math.isfinite(v) and v >= 0, f"{name} must be finite and >= 0")
        need(self.negatives_per_positive >= 1, "negatives_per_positive must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.relabel_every >= 1, "relabel_every must be >= 1")
        need(self.reidentify_every >= 0 and self.eval_every >= 0, "schedule intervals must be >= 0")
        need(self.explore_budget is None or (isinstance(self.explore_budget, int) and self.explore_budget >= 0),
             "explore_budget must be null or an integer >= 0")
        need(self.ssl_mode in ("batch", "epoch"), "ssl_mode must be 'batch' or 'epoch'")
        need(self.group_mode in ("member-mean", "nearest-center"), "group_mode must be 'member-mean' or 'nearest-center'")
        try:
            check_q_grid(self.q_grid)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class EpochReport:
    epoch: int
    l_par: float
    l_pgr: float
    l_u2i: float
    l_total: float
    k_prime: int
    n_triples: int
    identified: bool = False
    wall_time: float = 0.0

    def row(self) -> dict:
        return {f: getattr(self, f) for f in HISTORY_FIELDS}


@dataclass
class TrainedModel:
    """Parameters, optimiser, generator and history of one run.

    ``G`` is ``None`` until identification has run; its rows then train like
    any other embedding. ``group_radius``/``group_density`` are the values
    estimated at identification time.
    """

    config: TrainConfig
    U: np.ndarray
    I: np.ndarray
    opt: OptimizerState
    rng: np.random.Generator
    epoch: int = 0
    G: np.ndarray | None = None
    group_radius: np.ndarray | None = None
    group_density: np.ndarray | None = None
    labels: PseudoLabels | None = None
    candidates: CandidateSet | None = None
    history: list[dict] = field(default_factory=list)
    eval_history: list[dict] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)

    @property
    def embeddings(self) -> EmbeddingState:
        return EmbeddingState(self.U, self.I)

    @property
    def k_prime(self) -> int:
        return 0 if self.G is None else int(self.G.shape[0])

    def params(self) -> dict[str, np.ndarray]:
        out = {"U": self.U, "I": self.I}
        if self.G is not None:
            out["G"] = self.G
        return out


def init_model(cfg: TrainConfig, n_users: int, n_items: int) -> TrainedModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    emb = init_embeddings(n_users, n_items, cfg.d, rng)
    return TrainedModel(config=cfg, U=emb.U, I=emb.I, opt=OptimizerState(lr=float(cfg.lr)), rng=rng)


def sample_negatives(P: InteractionMatrix, count_per_positive: int, rng, max_rounds: int = 32) -> BprBatch:
    """``count_per_positive`` uniform negatives per training pair.

    Negatives are drawn from the user's non-interacted items by rejection;
    stragglers after ``max_rounds`` are drawn from the explicit complement.
    Users who interacted with every item are skipped with a warning.
    """
    if count_per_positive < 1:
        raise ValueError("count_per_positive must be >= 1")
    m = P.n_items
    full = np.flatnonzero(P.degrees() >= m)
    users, pos = P.users, P.items
    if full.size:
        warnings.warn(f"{full.size} users interacted with every item; no negatives possible, skipped",
                      RuntimeWarning, stacklevel=2)
        keep = ~np.isin(users, full)
        users, pos = users[keep], pos[keep]
    users = np.repeat(users, count_per_positive)
    pos = np.repeat(pos, count_per_positive)
    neg = rng.integers(0, m, size=users.size) if users.size else np.zeros(0, dtype=np.int64)
    keys = P.keys()
    bad = np.flatnonzero(P.contains(users, neg))
    for _ in range(max_rounds):
        if bad.size == 0:
            break
        neg[bad] = rng.integers(0, m, size=bad.size)
        bad = bad[P.contains(users[bad], neg[bad])]
    for t in bad.tolist():
        u = users[t]
        lo, hi = np.searchsorted(keys, [u * m, (u + 1) * m])
        allowed = np.setdiff1d(np.arange(m), keys[lo:hi] - u * m, assume_unique=True)
        neg[t] = allowed[rng.integers(allowed.size)]
    return BprBatch(users.astype(np.int64), pos.astype(np.int64), neg.astype(np.int64))


def identify(model: TrainedModel) -> CandidateSet:
    """Run group identification on the current user table and install the centers."""
    cfg = model.config
    cset = identify_groups(model.U, cfg.q_grid, model.rng, explore_budget=cfg.explore_budget)
    model.candidates = cset
    model.G = cset.centers
    model.group_radius = cset.radii
    model.group_density = cset.densities
    # fresh moments: the old rows (if any) described different centers
    model.opt.m.pop("G", None)
    model.opt.v.pop("G", None)
    model.labels = None
    return cset


def refresh_labels(model: TrainedModel, P: InteractionMatrix) -> PseudoLabels:
    labels = pseudo_assignment(model.U, model.G)
    labels.Q_prime = pseudo_group_interactions(labels.A_prime, P, binarize=model.config.binarize_q_prime)
    model.labels = labels
    return labels


def _ssl_values(model: TrainedModel):
    assigned = model.labels.A_prime if model.config.pull_assigned_only else None
    if assigned is None:
        pull, rep = par_terms(model.U, model.G)
        l_par = pull + rep
    else:
        l_par = par_loss_and_grad(model.U, model.G, assigned)[0]
    l_pgr = pgr_loss_and_grad(model.G, model.I, model.labels.Q_prime)[0]
    return l_par, l_pgr


def _ssl_grads(model: TrainedModel, users=None, items=None) -> dict[str, SparseGrad]:
    """Weighted PAR/PGR gradients restricted to ``users`` rows and ``items`` columns (all when None)."""
    cfg = model.config
    grads: dict[str, SparseGrad] = {}
    gG = np.zeros_like(model.G)
    if cfg.a > 0:
        rows = np.arange(model.U.shape[0]) if users is None else users
        assigned = model.labels.A_prime[rows] if cfg.pull_assigned_only else None
        _, gU, gGp = par_loss_and_grad(model.U[rows], model.G, assigned)
        grads["U"] = SparseGrad(rows, cfg.a * gU)
        gG += cfg.a * gGp
    if cfg.b > 0:
        cols = np.arange(model.I.shape[0]) if items is None else items
        _, gGq, gI = pgr_loss_and_grad(model.G, model.I[cols], model.labels.Q_prime[:, cols])
        grads["I"] = SparseGrad(cols, cfg.b * gI)
        gG += cfg.b * gGq
    if cfg.a > 0 or cfg.b > 0:
        grads["G"] = SparseGrad.dense(gG)
    return grads


def _add(g1: dict, g2: dict) -> dict:
    out = dict(g1)
    for k, v in g2.items():
        out[k] = out[k] + v if k in out else v
    return out


def train_epoch(model: TrainedModel, ds: Dataset, cfg: TrainConfig | None = None, epoch: int | None = None) -> EpochReport:
    """Run one epoch and advance ``model.epoch``.

    Before ``gid_epoch`` only the BPR loss is optimised. At ``gid_epoch``
    (and every ``reidentify_every`` epochs after it, when set) groups are
    identified on the current user table. From then on the pseudo labels are
    refreshed every ``relabel_every`` epochs and each mini-batch minimises
    ``BPR + a * PAR + b * PGR`` on the batch users and items
    (``ssl_mode="batch"``), or a single full-matrix PAR/PGR step opens the
    epoch (``ssl_mode="epoch"``).
    """
    cfg = model.config if cfg is None else cfg
    epoch = model.epoch if epoch is None else epoch
    t0 = time.perf_counter()
    P = ds.train if isinstance(ds, Dataset) else ds
    identified = False
    since = epoch - cfg.gid_epoch
    if since == 0 or (since > 0 and cfg.reidentify_every and since % cfg.reidentify_every == 0) \
            or (since > 0 and model.G is None):
        identify(model)
        identified = True
    ssl = model.G is not None
    l_par = l_pgr = 0.0
    if ssl:
        if model.labels is None or identified or since % cfg.relabel_every == 0:
            refresh_labels(model, P)
        l_par, l_pgr = _ssl_values(model)
        if cfg.ssl_mode == "epoch" and (cfg.a > 0 or cfg.b > 0):
            optimizer_step(model.params(), _ssl_grads(model), model.opt)

    triples = sample_negatives(P, cfg.negatives_per_positive, model.rng)
    order = model.rng.permutation(len(triples))
    emb = model.embeddings
    batch_ssl = ssl and cfg.ssl_mode == "batch" and (cfg.a > 0 or cfg.b > 0)
    l_u2i = 0.0
    for s in range(0, order.size, cfg.batch_size):
        batch = triples.take(order[s:s + cfg.batch_size])
        loss, grads = bpr_loss_and_grad(emb, batch)
        l_u2i += loss
        if batch_ssl:
            users = np.unique(batch.users)
            items = np.unique(np.concatenate([batch.pos, batch.neg]))
            grads = _add(grads, _ssl_grads(model, users, items))
        optimizer_step(model.params(), grads, model.opt)

    report = EpochReport(epoch=epoch, l_par=float(l_par), l_pgr=float(l_pgr), l_u2i=float(l_u2i),
                         l_total=combine_losses(cfg.weights, l_par, l_pgr, l_u2i),
                         k_prime=model.k_prime, n_triples=len(triples), identified=identified)
    report.wall_time = time.perf_counter() - t0
    model.epoch = epoch + 1
    model.history.append(report.row())
    model.wall_times.append(report.wall_time)
    log.info("epoch %d: l_u2i=%.4f l_par=%.4f l_pgr=%.4f k'=%d (%.2fs)", epoch, l_u2i, l_par, l_pgr,
             model.k_prime, report.wall_time)
    return report


def run(cfg: TrainConfig, ds: Dataset, model: TrainedModel | None = None, epoch_callback=None,
        stop_after: int | None = None) -> TrainedModel:
    """Train for ``cfg.epochs`` epochs, resuming from ``model`` if given.

    ``epoch_callback(model, report)`` is called after each epoch.
    ``stop_after`` ends the run early after that many epochs (for checkpointed
    partial runs).
    """
    cfg.validate()
    if model is None:
        model = init_model(cfg, ds.train.n_users, ds.train.n_items)
    elif model.U.shape != (ds.train.n_users, cfg.d) or model.I.shape != (ds.train.n_items, cfg.d):
        raise ConfigError(f"model tables {model.U.shape}/{model.I.shape} do not match the dataset "
                          f"({ds.train.n_users} users, {ds.train.n_items} items, d={cfg.d})")
    model.config = cfg
    done = 0
    while model.epoch < cfg.epochs:
        if stop_after is not None and done >= stop_after:
            break
        report = train_epoch(model, ds, cfg)
        if epoch_callback is not None:
            epoch_callback(model, report)
        done += 1
    return model
