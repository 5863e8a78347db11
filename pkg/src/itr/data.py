"""Loading, indexing and validation of AGREE-style group recommendation data.

Directory layout (one directory per dataset)::

    userRatingTrain.txt      user item [ignored columns...]
    userRatingTest.txt       user item            (optional, cross-checked)
    userRatingNegative.txt   (user,item) neg1 neg2 ... negK
    groupRatingTrain.txt     group item           (optional, never trained on)
    groupRatingTest.txt      group item           (optional)
    groupRatingNegative.txt  (group,item) neg1 ... negK   (optional)
    groupMember.txt          group u1,u2,...,uj   (optional)

Raw ids are opaque tokens. Dense indices are assigned per entity kind in
order of first appearance: user-side files first (train, test, negatives),
then group-side files. Because user-side files fix the number of users and
items before any group file is read, the trainable tables never depend on
group annotations.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataFormatError

log = logging.getLogger(__name__)

USER_PREFIX = "userRating"
GROUP_PREFIX = "groupRating"
MEMBER_FILE = "groupMember.txt"

_HEADER = re.compile(r"^\(\s*([^,\s()]+)\s*,\s*([^,\s()]+)\s*\)$")


class IdMap:
    """Bijection between raw id tokens and dense indices for one entity kind."""

    def __init__(self):
        self._dense: dict[str, int] = {}
        self._raw: list[str] = []

    def index(self, raw: str) -> int:
        """Return the dense index of ``raw``, registering it if unseen."""
        idx = self._dense.get(raw)
        if idx is None:
            idx = len(self._raw)
            self._dense[raw] = idx
            self._raw.append(raw)
        return idx

    def get(self, raw: str) -> int | None:
        return self._dense.get(raw)

    def raw(self, idx: int) -> str:
        return self._raw[idx]

    def __len__(self):
        return len(self._raw)

    def __contains__(self, raw):
        return raw in self._dense


@dataclass
class IdRegistry:
    users: IdMap = field(default_factory=IdMap)
    items: IdMap = field(default_factory=IdMap)
    groups: IdMap = field(default_factory=IdMap)

    def subjects(self, kind: str) -> IdMap:
        if kind == "user":
            return self.users
        if kind == "group":
            return self.groups
        raise ValueError(f"unknown subject kind {kind!r}")


@dataclass(frozen=True)
class InteractionMatrix:
    """Binary subject-item interactions stored as sorted, unique index pairs.

    The subject is a user for P and a group for Q; ``n_users`` counts
    subjects in either case.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    n_duplicates: int = 0

    @classmethod
    def from_pairs(cls, n_users, n_items, users, items, n_duplicates=0):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size:
            keys = np.unique(users * max(n_items, 1) + items)
            users, items = np.divmod(keys, max(n_items, 1))
        return cls(int(n_users), int(n_items), users, items, int(n_duplicates))

    @property
    def n_pairs(self) -> int:
        return int(self.users.size)

    @property
    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    @property
    def row_index(self) -> list[np.ndarray]:
        """Per-subject sorted item arrays."""
        bounds = np.searchsorted(self.users, np.arange(self.n_users + 1))
        return [self.items[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]

    def degrees(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n_users)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)

    def keys(self) -> np.ndarray:
        """Sorted ``user * n_items + item`` codes, for membership tests."""
        return self.users * self.n_items + self.items

    def contains(self, users, items) -> np.ndarray:
        keys = self.keys()
        probe = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        if keys.size == 0:
            return np.zeros(probe.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(keys, probe), keys.size - 1)
        return keys[pos] == probe

    def to_csr(self) -> sp.csr_matrix:
        data = np.ones(self.n_pairs, dtype=np.float64)
        return sp.csr_matrix((data, (self.users, self.items)), shape=(self.n_users, self.n_items))

    def with_shape(self, n_users: int, n_items: int) -> "InteractionMatrix":
        if n_users < self.n_users or n_items < self.n_items:
            raise ValueError("cannot shrink an interaction matrix")
        return InteractionMatrix.from_pairs(n_users, n_items, self.users, self.items, self.n_duplicates)


@dataclass(frozen=True)
class GroupMembership:
    n_groups: int
    members: tuple[np.ndarray, ...]
    n_duplicates: int = 0

    def sizes(self) -> np.ndarray:
        return np.array([m.size for m in self.members], dtype=np.int64)


@dataclass(frozen=True)
class EvalSet:
    """Leave-one-out cases: one held-out positive ranked against its negatives."""

    subjects: np.ndarray
    positives: np.ndarray
    negatives: tuple[np.ndarray, ...]
    subject_kind: str = "user"

    def __len__(self):
        return int(self.subjects.size)

    @property
    def cases(self):
        return list(zip(self.subjects.tolist(), self.positives.tolist(), [n.tolist() for n in self.negatives]))

    def uniform_negatives(self) -> np.ndarray | None:
        """Negatives as a 2-D array when every case has the same count."""
        if not self.negatives:
            return np.zeros((0, 0), dtype=np.int64)
        lengths = {n.size for n in self.negatives}
        if len(lengths) != 1:
            return None
        return np.stack(self.negatives)


@dataclass
class Dataset:
    train: InteractionMatrix
    user_eval: EvalSet
    ids: IdRegistry
    group_train: InteractionMatrix | None = None
    groups: GroupMembership | None = None
    group_eval: EvalSet | None = None
    user_test: InteractionMatrix | None = None
    files: dict[str, str] = field(default_factory=dict)
    # Q is kept for completeness only; no loss ever reads it.
    group_train_excluded: bool = True

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors

    def raise_for_errors(self):
        if self.errors:
            raise ValueError("dataset validation failed:\n  " + "\n  ".join(self.errors))


def _read_lines(path):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise DataFormatError(path, 0, f"unreadable file: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            yield lineno, line


def load_interactions(path, id_maps: IdRegistry, subject: str = "user") -> InteractionMatrix:
    """Read ``subject item [ignored...]`` lines into an InteractionMatrix.

    The matrix is sized by the registries after reading, so it covers every
    id registered so far (including ids from earlier files).
    """
    subjects = id_maps.subjects(subject)
    us, its = [], []
    for lineno, line in _read_lines(path):
        tokens = line.split()
        if len(tokens) < 2:
            raise DataFormatError(path, lineno, f"expected 'subject item', got {line.strip()!r}")
        us.append(subjects.index(tokens[0]))
        its.append(id_maps.items.index(tokens[1]))
    n_users, n_items = len(subjects), len(id_maps.items)
    raw = len(us)
    m = InteractionMatrix.from_pairs(n_users, n_items, us, its)
    dup = raw - m.n_pairs
    if dup:
        log.warning("%s: %d duplicate pairs dropped", path, dup)
        m = InteractionMatrix(m.n_users, m.n_items, m.users, m.items, dup)
    return m


def load_eval_negatives(path, id_maps: IdRegistry, subject: str = "user") -> EvalSet:
    """Read ``(subject,positive) neg1 ... negK`` lines."""
    subjects = id_maps.subjects(subject)
    subs, pos, negs = [], [], []
    for lineno, line in _read_lines(path):
        tokens = line.split()
        match = _HEADER.match(tokens[0])
        if match is None:
            raise DataFormatError(path, lineno, f"malformed header {tokens[0]!r}, expected '(subject,item)'")
        if len(tokens) < 2:
            raise DataFormatError(path, lineno, "no negative items")
        subs.append(subjects.index(match.group(1)))
        pos.append(id_maps.items.index(match.group(2)))
        negs.append(np.array([id_maps.items.index(t) for t in tokens[1:]], dtype=np.int64))
    return EvalSet(np.array(subs, dtype=np.int64), np.array(pos, dtype=np.int64), tuple(negs), subject)


def load_group_members(path, id_maps: IdRegistry) -> GroupMembership:
    """Read ``group u1,u2,...`` lines; member lists are sorted and deduplicated."""
    members: dict[int, np.ndarray] = {}
    dup_total = 0
    for lineno, line in _read_lines(path):
        tokens = line.split(None, 1)
        if len(tokens) < 2:
            raise DataFormatError(path, lineno, "empty member list")
        raw_members = [t.strip() for t in tokens[1].split(",") if t.strip()]
        if not raw_members:
            raise DataFormatError(path, lineno, "empty member list")
        g = id_maps.groups.index(tokens[0])
        if g in members:
            raise DataFormatError(path, lineno, f"group {tokens[0]!r} listed twice")
        idx = [id_maps.users.index(u) for u in raw_members]
        uniq = np.unique(np.array(idx, dtype=np.int64))
        if uniq.size != len(idx):
            dup_total += len(idx) - uniq.size
            log.warning("%s:%d: %d duplicate members dropped", path, lineno, len(idx) - uniq.size)
        members[g] = uniq
    n_groups = len(id_maps.groups)
    empty = np.zeros(0, dtype=np.int64)
    return GroupMembership(n_groups, tuple(members.get(g, empty) for g in range(n_groups)), dup_total)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_dataset(data_dir, user_prefix: str = USER_PREFIX, group_prefix: str = GROUP_PREFIX,
                 member_file: str = MEMBER_FILE) -> Dataset:
    """Load a dataset directory. Group-side files are optional."""
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    ids = IdRegistry()
    files = {}

    def path(name, required):
        p = root / name
        if p.is_file():
            files[name] = file_sha256(p)
            return p
        if required:
            raise FileNotFoundError(f"required dataset file missing: {p}")
        return None

    train = load_interactions(path(f"{user_prefix}Train.txt", True), ids, "user")
    test_path = path(f"{user_prefix}Test.txt", False)
    user_test = load_interactions(test_path, ids, "user") if test_path else None
    user_eval = load_eval_negatives(path(f"{user_prefix}Negative.txt", True), ids, "user")
    # freeze the trainable universe before any group file is read
    train = train.with_shape(len(ids.users), len(ids.items))
    if user_test is not None:
        user_test = user_test.with_shape(len(ids.users), len(ids.items))

    member_path = path(member_file, False)
    groups = load_group_members(member_path, ids) if member_path else None
    gtrain_path = path(f"{group_prefix}Train.txt", False)
    group_train = load_interactions(gtrain_path, ids, "group") if gtrain_path else None
    gtest_path = path(f"{group_prefix}Test.txt", False)
    if gtest_path:
        load_interactions(gtest_path, ids, "group")
    gneg_path = path(f"{group_prefix}Negative.txt", False)
    group_eval = load_eval_negatives(gneg_path, ids, "group") if gneg_path else None

    if groups is not None and len(ids.groups) > groups.n_groups:
        pad = (np.zeros(0, dtype=np.int64),) * (len(ids.groups) - groups.n_groups)
        groups = GroupMembership(len(ids.groups), groups.members + pad, groups.n_duplicates)
    return Dataset(train=train, user_eval=user_eval, ids=ids, group_train=group_train, groups=groups,
                   group_eval=group_eval, user_test=user_test, files=files)


def _check_eval(report, name, ev: EvalSet, n_subjects, n_items):
    if ev is None:
        return
    if ev.subjects.size and (ev.subjects.min() < 0 or ev.subjects.max() >= n_subjects):
        report.errors.append(f"{name}: subject index out of range [0, {n_subjects})")
    for c, (p, negs) in enumerate(zip(ev.positives.tolist(), ev.negatives)):
        if not 0 <= p < n_items:
            report.errors.append(f"{name} case {c}: positive item {p} >= n_items={n_items}")
        if negs.size == 0:
            report.errors.append(f"{name} case {c}: empty negative list")
        elif negs.min() < 0 or negs.max() >= n_items:
            report.errors.append(f"{name} case {c}: negative item out of range [0, {n_items})")
        if p in set(negs.tolist()):
            report.errors.append(f"{name} case {c}: positive item {p} listed among its negatives")


def validate_dataset(ds: Dataset) -> ValidationReport:
    """Check index ranges, cold entities and eval/train consistency.

    Range violations are errors; everything else is a warning.
    """
    report = ValidationReport()
    n, m = ds.train.n_users, ds.train.n_items
    if ds.train.n_pairs and (ds.train.users.max() >= n or ds.train.items.max() >= m):
        report.errors.append("train: index out of range")
    cold_users = np.flatnonzero(ds.train.degrees() == 0)
    if cold_users.size:
        report.warnings.append(f"{cold_users.size} users have no training interactions")
    cold_items = np.flatnonzero(ds.train.item_degrees() == 0)
    if cold_items.size:
        report.warnings.append(f"{cold_items.size} items have no training interactions")

    _check_eval(report, "user_eval", ds.user_eval, n, m)
    if ds.user_eval is not None and len(ds.user_eval):
        absent = ds.train.item_degrees()[np.clip(ds.user_eval.positives, 0, m - 1)] == 0
        if absent.any():
            report.warnings.append(f"user_eval: {int(absent.sum())} positives never appear in training")
        inrange = (ds.user_eval.subjects < n) & (ds.user_eval.positives < m)
        leaked = ds.train.contains(ds.user_eval.subjects[inrange], ds.user_eval.positives[inrange])
        if leaked.any():
            report.warnings.append(f"user_eval: {int(leaked.sum())} positives also in the training pairs")

    if ds.groups is not None:
        for g, mem in enumerate(ds.groups.members):
            if mem.size == 0:
                report.warnings.append(f"group {g}: no members")
            elif mem.max() >= n:
                report.errors.append(f"group {g}: member index {int(mem.max())} has no trained embedding (n_users={n})")
    if ds.group_eval is not None:
        n_groups = ds.groups.n_groups if ds.groups is not None else len(ds.ids.groups)
        _check_eval(report, "group_eval", ds.group_eval, n_groups, m)
        if ds.groups is None:
            report.warnings.append("group_eval present but no group membership: group evaluation unavailable")
        else:
            evaluated = np.unique(ds.group_eval.subjects)
            sizes = ds.groups.sizes()
            cold = evaluated[(evaluated < sizes.size)]
            cold = cold[sizes[cold] == 0]
            if cold.size:
                report.errors.append(f"group_eval: {cold.size} evaluated groups have no members")

    report.info["n_users"] = n
    report.info["n_items"] = m
    report.info["n_train_pairs"] = ds.train.n_pairs
    report.info["n_groups"] = ds.groups.n_groups if ds.groups is not None else 0
    report.info["group_train_excluded"] = ds.group_train_excluded
    return report


def write_interactions(matrix: InteractionMatrix, path, id_maps: IdRegistry | None = None, subject="user"):
    """Write pairs as ``subject item`` lines using raw ids when a registry is given."""
    subjects = id_maps.subjects(subject) if id_maps is not None else None
    with open(path, "w") as fh:
        for u, i in zip(matrix.users.tolist(), matrix.items.tolist()):
            if id_maps is not None:
                fh.write(f"{subjects.raw(u)} {id_maps.items.raw(i)}\n")
            else:
                fh.write(f"{u} {i}\n")


def write_eval_negatives(ev: EvalSet, path):
    with open(path, "w") as fh:
        for s, p, negs in zip(ev.subjects.tolist(), ev.positives.tolist(), ev.negatives):
            fh.write(f"({s},{p}) " + " ".join(map(str, negs.tolist())) + "\n")


def write_group_members(groups: GroupMembership, path):
    with open(path, "w") as fh:
        for g, mem in enumerate(groups.members):
            fh.write(f"{g} " + ",".join(map(str, mem.tolist())) + "\n")
