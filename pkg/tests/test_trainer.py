import math
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itr.checkpoint import to_bytes
from itr.data import InteractionMatrix, load_dataset
from itr.errors import ConfigError
from itr.trainer import (PROFILES, LossWeights, TrainConfig, combine_losses, init_model, run,
                         sample_negatives, train_epoch)

SMALL = dict(d=8, epochs=4, gid_epoch=1, lr=0.01, a=1.0, b=1.0, batch_size=128)


def test_combine_examples():
    assert combine_losses(LossWeights(0, 0), 5.0, 7.0, 3.0) == 3.0
    assert combine_losses(LossWeights(1, 1), 1.0, 2.0, 3.0) == 6.0
    with pytest.raises(ValueError):
        combine_losses(LossWeights(1, 1), float("nan"), 0.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50))
def test_combine_linear(a, b, x, y, z):
    w = LossWeights(a, b)
    assert combine_losses(w, 2 * x, 2 * y, 2 * z) == pytest.approx(2 * combine_losses(w, x, y, z), abs=1e-9)


def test_forced_negative():
    P = InteractionMatrix.from_pairs(1, 4, [0, 0, 0], [0, 1, 3])
    b = sample_negatives(P, 5, np.random.default_rng(0))
    assert set(b.neg.tolist()) == {2}
    assert len(b) == 15


def test_full_user_skipped():
    P = InteractionMatrix.from_pairs(2, 3, [0, 0, 0, 1], [0, 1, 2, 0])
    with pytest.warns(RuntimeWarning, match="every item"):
        b = sample_negatives(P, 4, np.random.default_rng(0))
    assert len(b) == 4 and set(b.users.tolist()) == {1}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_negatives_valid_and_deterministic(seed, count):
    rng = np.random.default_rng(seed)
    n, m = 6, 9
    dense = rng.random((n, m)) < 0.5
    dense[:, 0] = False
    u, i = np.nonzero(dense)
    P = InteractionMatrix.from_pairs(n, m, u, i)
    a = sample_negatives(P, count, np.random.default_rng(seed))
    b = sample_negatives(P, count, np.random.default_rng(seed))
    np.testing.assert_array_equal(a.neg, b.neg)
    assert len(a) == count * P.n_pairs
    assert not P.contains(a.users, a.neg).any()
    assert P.contains(a.users, a.pos).all()


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 5, "gid_epoch": 5})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 0.0})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"q_grid": (0.3, 0.1)})
    with pytest.raises(ConfigError):
        TrainConfig.from_profile("unknown")


def test_profiles():
    m = TrainConfig.from_profile("mafengwo")
    c = TrainConfig.from_profile("camra2011")
    assert (m.a, m.b, m.lr) == (0.01, 10.0, 1e-4)
    assert (c.a, c.b, c.lr) == (10.0, 10.0, 1e-3)
    assert set(PROFILES) == {"mafengwo", "camra2011"}


def test_warmup_epoch(planted):
    cfg = TrainConfig(d=8, epochs=20, gid_epoch=10)
    model = init_model(cfg, planted.n_users, planted.n_items)
    rep = train_epoch(model, planted, cfg, 0)
    assert rep.l_par == 0.0 and rep.l_pgr == 0.0 and rep.l_u2i > 0
    assert model.G is None and rep.k_prime == 0


def test_two_blob_users_identified():
    rng = np.random.default_rng(3)
    n = 60
    u = np.repeat(np.arange(n), 3)
    P = InteractionMatrix.from_pairs(n, 20, u, rng.integers(0, 20, u.size))
    cfg = TrainConfig(d=2, epochs=2, gid_epoch=0, seed=4)
    model = init_model(cfg, n, 20)
    model.U[:] = np.r_[rng.normal(0, 0.05, (30, 2)) + [5, 5], rng.normal(0, 0.05, (30, 2)) + [-5, 5]]
    rep = train_epoch(model, P, cfg, 0)
    assert rep.identified and rep.k_prime == 2


def test_history_consistency(planted):
    model = run(TrainConfig(**SMALL), planted)
    assert len(model.history) == 4
    for row in model.history:
        w = model.config.weights
        assert row["l_total"] == combine_losses(w, row["l_par"], row["l_pgr"], row["l_u2i"])
    assert model.history[0]["k_prime"] == 0 and model.history[1]["k_prime"] > 0


def test_minimal_run(planted):
    model = run(TrainConfig(d=8, epochs=1, gid_epoch=0, lr=0.01), planted)
    assert len(model.history) == 1 and model.G is not None
    assert model.history[0]["l_par"] != 0.0


def test_zero_weights_leave_centers_inert(planted):
    cfg = TrainConfig(**{**SMALL, "a": 0.0, "b": 0.0})
    model = run(cfg, planted, stop_after=2)
    G0 = model.G.copy()
    run(cfg, planted, model=model)
    np.testing.assert_array_equal(model.G, G0)
    assert "G" not in model.opt.m
    for row in model.history:
        assert row["l_total"] == row["l_u2i"]


def test_epoch_mode_runs(planted):
    model = run(TrainConfig(**{**SMALL, "ssl_mode": "epoch"}), planted)
    assert model.G is not None and all(math.isfinite(r["l_total"]) for r in model.history)


def test_reidentify(planted):
    cfg = TrainConfig(**{**SMALL, "epochs": 5, "reidentify_every": 2})
    seen = []
    run(cfg, planted, epoch_callback=lambda m, r: seen.append(r.identified))
    assert seen == [False, True, False, True, False]


def test_determinism_and_resume(planted):
    cfg = TrainConfig(**SMALL)
    a = to_bytes(run(cfg, planted))
    assert a == to_bytes(run(cfg, planted))
    part = run(cfg, planted, stop_after=2)
    assert to_bytes(run(cfg, planted, model=part)) == a
    other = to_bytes(run(TrainConfig(**{**SMALL, "seed": 1}), planted))
    assert other != a


def test_group_files_do_not_matter(planted_dir, tmp_path):
    stripped = tmp_path / "stripped"
    shutil.copytree(planted_dir, stripped)
    for name in ("groupMember.txt", "groupRatingTrain.txt", "groupRatingTest.txt", "groupRatingNegative.txt"):
        (stripped / name).unlink()
    cfg = TrainConfig(**SMALL)
    assert to_bytes(run(cfg, load_dataset(planted_dir))) == to_bytes(run(cfg, load_dataset(stripped)))


def test_bpr_only_loss_decreases(planted):
    cfg = TrainConfig(d=16, epochs=20, gid_epoch=19, a=0.0, b=0.0, lr=0.005)
    losses = [r["l_u2i"] for r in run(cfg, planted).history]
    assert np.mean(losses[10:]) < np.mean(losses[:10])
    assert sum(b > a for a, b in zip(losses, losses[1:])) <= 3


def test_dimension_mismatch_on_resume(planted):
    model = init_model(TrainConfig(d=4, epochs=2, gid_epoch=0), planted.n_users, planted.n_items)
    with pytest.raises(ConfigError):
        run(TrainConfig(d=8, epochs=2, gid_epoch=0), planted, model=model)
