import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poseaug.errors import ConfigError, ContractError
from poseaug.estimator import Estimator
from poseaug.numerics import Adam, Tensor, linear_decay
from poseaug.training import (METRIC_FIELDS, EpochStats, TrainConfig, Trainer, augmentor_loss,
                              batch_reg_loss, beta_at, feedback_loss, load_estimator, make_batches,
                              pretrain, reg_loss, save_estimator, seed_streams, supervised_step)

TINY = dict(estimator_width=16, estimator_blocks=1, augmentor_hidden=16, d3_hidden=8, d2_hidden=8,
            noise_dim=4, batch_size=16, epochs=2, pretrain_epochs=1)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def params_of(trainer):
    out = {}
    for name, m in (("est", trainer.estimator), ("aug", trainer.augmentor), ("d3", trainer.d3), ("d2", trainer.d2)):
        out.update({f"{name}.{k}": v.copy() for k, v in m.state_dict().items()})
    return out


# -- losses -------------------------------------------------------------------------------

def test_feedback_loss_cases():
    loss, sat = feedback_loss(np.array([1.0]), np.array([0.5]), beta=2.0)
    assert float(loss.data) == 0.0 and sat == 0
    loss, _ = feedback_loss(np.array([0.0]), np.array([50.0]), beta=2.0)
    assert float(loss.data) == pytest.approx(1.0, abs=1e-40)
    loss, _ = feedback_loss(np.array([0.6]), np.array([0.5]), beta=2.0)
    assert float(loss.data) == pytest.approx(1 - math.exp(-0.4), abs=1e-12)
    assert float(loss.data) == pytest.approx(0.3297, abs=1e-4)


def test_feedback_loss_is_per_sample_then_averaged():
    loss, _ = feedback_loss(np.array([1.0, 0.6]), np.array([0.5, 0.5]), beta=2.0)
    assert float(loss.data) == pytest.approx((0 + 1 - math.exp(-0.4)) / 2, abs=1e-12)


def test_feedback_loss_clamps_and_counts_saturation():
    loss, sat = feedback_loss(np.array([100.0, 0.0]), np.array([0.0, 0.0]), beta=2.0, clamp=20.0)
    assert sat == 1 and np.isfinite(float(loss.data))
    assert float(loss.data) == pytest.approx((math.exp(20) - 1) / 2)


def test_feedback_gradient_sign():
    """Easy augmentations are pushed harder; augmentations past the bound are pushed easier."""
    for lp_aug, sign in ((0.5, -1), (2.0, 1)):
        t = Tensor(np.array([lp_aug]), requires_grad=True)
        feedback_loss(t, np.array([0.5]), beta=2.0)[0].backward()
        assert np.sign(t.grad[0]) == sign


def test_reg_loss_cases():
    assert float(reg_loss(np.full(4, 0.05)).data) == 0.0
    assert float(reg_loss(np.full(2, 0.2)).data) == pytest.approx(0.08)
    assert float(reg_loss(np.zeros(5)).data) == 0.0
    g = Tensor(np.full((1, 2), 0.2), requires_grad=True)
    batch_reg_loss(g).backward()
    np.testing.assert_allclose(g.grad, 0.4)


def test_batch_reg_loss_per_sample():
    g = np.array([[0.05, 0.05], [0.2, 0.2]])
    assert float(batch_reg_loss(g).data) == pytest.approx(0.04)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=12))
def test_reg_loss_rectified(vals):
    g = np.array(vals)
    value = float(reg_loss(g).data)
    if np.mean(np.abs(g)) < 0.1:
        assert value == 0.0
    else:
        assert value == pytest.approx(float(g @ g))


def test_augmentor_loss_composition(rng):
    lp_aug, lp_orig = rng.uniform(0, 1, 8), rng.uniform(0, 0.5, 8)
    g1, g2 = rng.uniform(-0.5, 0.5, (8, 45)), rng.uniform(-0.3, 0.3, (8, 9))
    total, parts = augmentor_loss(lp_aug, lp_orig, 3.0, [g1, g2], guidance=0.7, w_adv=0.5)
    expect = (float(feedback_loss(lp_aug, lp_orig, 3.0)[0].data) + float(batch_reg_loss(g1).data)
              + float(batch_reg_loss(g2).data) + 0.5 * 0.7)
    assert abs(float(total.data) - expect) < 1e-12
    assert parts["l_adv"] == 0.7
    total, parts = augmentor_loss(lp_aug, lp_orig, 3.0, [], guidance=0.7, w_adv=0.0, use_feedback=False)
    assert float(total.data) == 0.0 and parts["l_fb"] == 0.0


# -- schedules and helpers ----------------------------------------------------------------

def test_beta_schedule():
    cfg = tiny(epochs=10)
    betas = [beta_at(e, cfg) for e in range(10)]
    assert betas[0] == 2.0 and betas[-1] == 20.0
    assert all(b < c for b, c in zip(betas, betas[1:]))
    assert beta_at(0, tiny(epochs=1)) == 2.0


def test_make_batches_cover_and_merge():
    rng = np.random.default_rng(0)
    batches = make_batches(33, 16, rng)
    assert [len(b) for b in batches] == [16, 17]
    assert sorted(np.concatenate(batches)) == list(range(33))
    assert [len(b) for b in make_batches(5, 16, rng)] == [5]


def test_seed_streams_independent_and_reproducible():
    a, b = seed_streams(7), seed_streams(7)
    assert len(a) == 7
    draws = {k: g.random() for k, g in a.items()}
    assert draws == {k: g.random() for k, g in b.items()}
    assert len(set(draws.values())) == 7


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=1), dict(beta_start=1.0),
                                 dict(beta_end=1.5), dict(ops=("xx",)), dict(kcs_mode="nope"),
                                 dict(estimator_update="sometimes"), dict(dropout=1.0), dict(lr=-1.0),
                                 dict(t0=(0, 0))])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        tiny(**bad)


def test_config_dict_round_trip():
    cfg = tiny(ops=("rt",), t0=None)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "bogus": 1})
    assert cfg.replace(epochs=9).epochs == 9


# -- supervised training ------------------------------------------------------------------

def test_pretrain_reduces_loss(small_pools):
    ds = small_pools["source"]
    cfg = tiny(pretrain_epochs=15)
    est = Estimator(ds.topology, np.random.default_rng(0), width=32, n_blocks=1)
    hist = pretrain(est, ds, cfg)
    assert len(hist) == 15 and hist[-1] < 0.5 * hist[0]


def test_zero_learning_rate_leaves_parameters(small_pools):
    ds = small_pools["source"]
    est = Estimator(ds.topology, np.random.default_rng(0), width=16, n_blocks=1)
    before = {k: v.copy() for k, v in est.state_dict().items() if "running" not in k}
    opt = Adam(est.named_parameters(), lr=0.0)
    supervised_step(est, opt, ds.pose2d[:16], ds.cams[:16], ds.pose3d[:16])
    after = est.state_dict()
    for k, v in before.items():
        np.testing.assert_array_equal(after[k], v)


def test_training_deterministic(small_pools):
    ds = small_pools["source"]
    a, b = Trainer(ds.topology, tiny()), Trainer(ds.topology, tiny())
    a.fit(ds)
    b.fit(ds)
    pa, pb = params_of(a), params_of(b)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    c = Trainer(ds.topology, tiny(seed=1))
    c.fit(ds)
    assert not np.array_equal(params_of(c)["est.out.weight"], pa["est.out.weight"])


def test_smoke_run_updates_all_networks(small_pools, tmp_path):
    ds = small_pools["source"]
    tr = Trainer(ds.topology, tiny(check_isolation=True))
    start = params_of(tr)
    rows = []
    tr.fit(ds, tmp_path, on_epoch=rows.append)
    end = params_of(tr)
    for prefix in ("est.", "aug.", "d3.", "d2."):
        keys = [k for k in start if k.startswith(prefix) and "running" not in k and "num_batches" not in k]
        assert any(not np.array_equal(start[k], end[k]) for k in keys), prefix
    assert tr.isolation_checks > 0
    assert [r["phase"] for r in rows] == ["pretrain", "train", "train"]
    with open(tmp_path / "metrics.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 3 and tuple(table[0]) == METRIC_FIELDS
    assert all(math.isfinite(float(table[-1][k])) for k in ("l_a", "l_d", "l_est", "lp_aug"))
    assert (tmp_path / "final.ckpt").exists()


def test_disabled_augmentation_matches_plain_supervised_loop(small_pools):
    ds = small_pools["source"]
    cfg = tiny(ops=(), epochs=3, pretrain_epochs=2)
    tr = Trainer(ds.topology, cfg)
    tr.fit(ds)

    r = seed_streams(cfg.seed)
    est = Estimator(ds.topology, r["est_init"], width=cfg.estimator_width, n_blocks=cfg.estimator_blocks,
                    dropout=cfg.dropout, drop_rng=r["dropout"])
    opt = Adam(est.named_parameters(), lr=cfg.lr)
    scales = [1.0] * cfg.pretrain_epochs + [linear_decay(e, cfg.epochs) for e in range(cfg.epochs)]
    for s in scales:
        for b in make_batches(len(ds), cfg.batch_size, r["shuffle"]):
            supervised_step(est, opt, ds.pose2d[b], ds.cams[b], ds.pose3d[b], s)
    ref, got = est.state_dict(), tr.estimator.state_dict()
    for k in ref:
        np.testing.assert_array_equal(got[k], ref[k])


def test_resume_reproduces_next_epoch(small_pools, tmp_path):
    ds = small_pools["source"]
    cfg = tiny(epochs=3)
    a = Trainer(ds.topology, cfg)
    a.pretrain_epoch(ds)
    a.train_epoch(ds)
    a.save(tmp_path / "mid.ckpt")
    b = Trainer.load(tmp_path / "mid.ckpt")
    assert b.epoch == 1 and b.pretrain_done == 1 and len(b.history) == 2
    a.train_epoch(ds)
    b.train_epoch(ds)
    pa, pb = params_of(a), params_of(b)
    for k in pa:
        np.testing.assert_array_equal(pa[k], pb[k])
    assert a.history[-1]["l_a"] == b.history[-1]["l_a"]


def test_fit_resumes_and_appends_metrics(small_pools, tmp_path):
    ds = small_pools["source"]
    tr = Trainer(ds.topology, tiny(epochs=3, checkpoint_every=1))
    tr.pretrain_epoch(ds)
    tr.train_epoch(ds)
    tr.save(tmp_path / "mid.ckpt")
    Trainer.load(tmp_path / "mid.ckpt").fit(ds, tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        assert [r["epoch"] for r in csv.DictReader(fh)] == ["1", "2"]
    assert (tmp_path / "epoch003.ckpt").exists()


def test_augmentor_step_descends_its_objective(small_pools):
    """One small augmentor step lowers the augmentor loss on replayed noise."""
    ds = small_pools["source"]
    tr = Trainer(ds.topology, tiny(w_adv=0.0, lr=1e-5))
    tr.pretrain_epoch(ds)
    X, x, c = ds.pose3d[:32], ds.pose2d[:32], ds.cams[:32]
    state = tr.rngs["noise"].bit_generator.state
    for _ in range(2):
        tr.rngs["noise"].bit_generator.state = state
        tr.augment_step(X, x, c, beta=2.0, lr_scale=1.0, stats=EpochStats())
    first, second = tr.batch_log[-2]["l_a"], tr.batch_log[-1]["l_a"]
    assert second < first


def test_per_epoch_update_mode(small_pools):
    ds = small_pools["source"]
    tr = Trainer(ds.topology, tiny(estimator_update="per_epoch"))
    tr.fit(ds)
    assert math.isfinite(tr.history[-1]["l_est"])


def test_external_2d_pool_and_empty_dataset(small_pools):
    ds = small_pools["source"]
    tr = Trainer(ds.topology, tiny(epochs=1), external_2d=small_pools["target"])
    tr.fit(ds)
    with pytest.raises(ContractError):
        Trainer(ds.topology, tiny()).fit(ds.subset([]))


def test_estimator_checkpoint_round_trip(small_pools, tmp_path):
    ds = small_pools["source"]
    tr = Trainer(ds.topology, tiny(epochs=1))
    tr.fit(ds, tmp_path)
    save_estimator(tmp_path / "est.ckpt", tr.estimator, tr.config, tr.history)
    for path in (tmp_path / "est.ckpt", tmp_path / "final.ckpt"):
        est = load_estimator(path)
        est = est[0] if isinstance(est, tuple) else est
        ref, got = tr.estimator.state_dict(), est.state_dict()
        assert all(np.array_equal(ref[k], got[k]) for k in ref)
