import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itr.data import (EvalSet, IdRegistry, InteractionMatrix, load_dataset, load_eval_negatives,
                      load_group_members, load_interactions, validate_dataset, write_interactions)
from itr.errors import DataFormatError


def test_dense_remap(tmp_path):
    p = tmp_path / "train.txt"
    p.write_text("7 3\n7 9\n2 3\n")
    m = load_interactions(p, IdRegistry())
    assert (m.n_users, m.n_items) == (2, 2)
    assert m.pairs == {(0, 0), (0, 1), (1, 0)}


def test_empty_file(tmp_path):
    p = tmp_path / "train.txt"
    p.write_text("")
    m = load_interactions(p, IdRegistry())
    assert m.n_users == 0 and m.n_pairs == 0


def test_duplicate_pair_reported(tmp_path):
    p = tmp_path / "train.txt"
    p.write_text("7 3\n7 3\n")
    m = load_interactions(p, IdRegistry())
    assert m.n_pairs == 1 and m.n_duplicates == 1


def test_extra_columns_ignored(tmp_path):
    p = tmp_path / "train.txt"
    p.write_text("1 2 5 1234567\n")
    assert load_interactions(p, IdRegistry()).pairs == {(0, 0)}


def test_short_line_has_location(tmp_path):
    p = tmp_path / "train.txt"
    p.write_text("1 2\n3\n")
    with pytest.raises(DataFormatError, match=r"train.txt:2"):
        load_interactions(p, IdRegistry())


def test_negatives_parse(tmp_path):
    ids = IdRegistry()
    p = tmp_path / "neg.txt"
    p.write_text("(5,9) 1 2 3\n")
    ev = load_eval_negatives(p, ids)
    assert ev.subjects.tolist() == [ids.users.get("5")]
    assert ev.positives.tolist() == [ids.items.get("9")]
    assert ev.negatives[0].tolist() == [ids.items.get(t) for t in "123"]


def test_negatives_hundred(tmp_path):
    p = tmp_path / "neg.txt"
    p.write_text("(0,1000) " + " ".join(map(str, range(100))) + "\n")
    assert load_eval_negatives(p, IdRegistry()).negatives[0].size == 100


def test_negatives_missing_parentheses(tmp_path):
    p = tmp_path / "neg.txt"
    p.write_text("(1,2) 3\n5,9 1 2\n")
    with pytest.raises(DataFormatError, match=r"neg.txt:2"):
        load_eval_negatives(p, IdRegistry())


def test_group_members(tmp_path):
    ids = IdRegistry()
    p = tmp_path / "groupMember.txt"
    p.write_text("10 4,7\n11 4,4\n")
    g = load_group_members(p, ids)
    assert g.n_groups == 2
    assert g.members[0].tolist() == [ids.users.get("4"), ids.users.get("7")]
    assert g.members[1].tolist() == [ids.users.get("4")]
    assert g.n_duplicates == 1


def _toy(tmp_path, with_groups=True):
    tmp_path.mkdir(parents=True, exist_ok=True)
    (tmp_path / "userRatingTrain.txt").write_text("0 0\n0 1\n1 1\n1 2\n2 0\n")
    (tmp_path / "userRatingNegative.txt").write_text("(0,2) 3\n(1,0) 3\n(2,1) 3\n")
    if with_groups:
        (tmp_path / "groupMember.txt").write_text("0 0,1\n1 2\n")
        (tmp_path / "groupRatingTrain.txt").write_text("0 1\n1 0\n")
        (tmp_path / "groupRatingNegative.txt").write_text("(0,2) 3\n(1,1) 3\n")
    return tmp_path


def test_toy_dataset_valid(tmp_path):
    ds = load_dataset(_toy(tmp_path))
    rep = validate_dataset(ds)
    assert rep.errors == []
    assert rep.info["group_train_excluded"]
    assert ds.groups.n_groups == 2


def test_group_files_do_not_change_user_side(tmp_path):
    a = load_dataset(_toy(tmp_path / "a"))
    b = load_dataset(_toy(tmp_path / "b", with_groups=False))
    assert (a.n_users, a.n_items) == (b.n_users, b.n_items)
    np.testing.assert_array_equal(a.train.keys(), b.train.keys())
    assert b.groups is None and b.group_eval is None


def test_eval_item_out_of_range_is_error(tmp_path):
    ds = load_dataset(_toy(tmp_path))
    bad = EvalSet(np.array([0]), np.array([ds.n_items]), (np.array([0]),))
    ds.user_eval = bad
    assert validate_dataset(ds).errors


def test_user_without_pairs_warns(tmp_path):
    ds = load_dataset(_toy(tmp_path))
    ds.train = ds.train.with_shape(ds.n_users + 1, ds.n_items)
    rep = validate_dataset(ds)
    assert rep.errors == [] and any("no training" in w for w in rep.warnings)


def test_missing_required_file(tmp_path):
    (tmp_path / "userRatingTrain.txt").write_text("0 0\n")
    with pytest.raises(FileNotFoundError, match="userRatingNegative"):
        load_dataset(tmp_path)


def test_planted_loads(planted):
    assert validate_dataset(planted).ok
    assert len(planted.user_eval) == planted.n_users


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), min_size=1, max_size=60))
def test_roundtrip(tmp_path_factory, pairs):
    d = tmp_path_factory.mktemp("rt")
    u, i = np.array(pairs).T
    m = InteractionMatrix.from_pairs(31, 31, u, i)
    write_interactions(m, d / "x.txt")
    ids = IdRegistry()
    back = load_interactions(d / "x.txt", ids)
    raw = {(int(ids.users.raw(a)), int(ids.items.raw(b))) for a, b in back.pairs}
    assert raw == set(map(tuple, np.array(pairs).tolist()))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=30, unique=True),
       st.randoms(use_true_random=False))
def test_line_order_only_relabels(tmp_path_factory, pairs, rnd):
    d = tmp_path_factory.mktemp("perm")
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    sets = []
    for name, ps in (("a", pairs), ("b", shuffled)):
        (d / name).write_text("".join(f"u{a} i{b}\n" for a, b in ps))
        ids = IdRegistry()
        m = load_interactions(d / name, ids)
        sets.append({(ids.users.raw(a), ids.items.raw(b)) for a, b in m.pairs})
    assert sets[0] == sets[1]


def test_idmap_bijection(planted):
    for kind in ("users", "items"):
        mp = getattr(planted.ids, kind)
        assert all(mp.get(mp.raw(k)) == k for k in range(len(mp)))


def test_contains():
    m = InteractionMatrix.from_pairs(3, 4, [0, 2, 2], [1, 0, 3])
    np.testing.assert_array_equal(m.contains([0, 0, 2, 1], [1, 2, 3, 0]), [True, False, True, False])
    empty = InteractionMatrix.from_pairs(3, 4, [], [])
    assert not empty.contains([0], [0]).any()
