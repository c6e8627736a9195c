import numpy as np
import pytest

from iwm import tensor as T
from iwm.data import DatasetRef, synth_colorworld
from iwm.pretrain import (PretrainConfig, collapse_metric, collate, epoch_batches, init_state,
                          iwm_loss, load_model, make_schedules, run_pretraining, train_step)
from iwm.augment import get_preset
from iwm.vit import PredictorConfig, ViTConfig

ENC = ViTConfig(image_size=16, patch_size=4, dim=16, depth=1, heads=2)
PRED = PredictorConfig(depth=1, dim=16, heads=2, conditioning="feature")


def small_cfg(**kw):
    base = dict(dataset=DatasetRef(n_classes=2, n_samples=64, image_size=16), encoder=ENC,
                predictor=PRED, epochs=2, batch_size=8, lr=1e-3, warmup_epochs=0.5)
    base.update(kw)
    return PretrainConfig(**base)


def test_loss_matches_double_loop():
    rng = np.random.default_rng(0)
    pred = rng.standard_normal((3, 5, 4))
    tgt = rng.standard_normal((3, 5, 4))
    ref = 0.0
    for b in range(3):
        for k in range(5):
            for c in range(4):
                ref += (pred[b, k, c] - tgt[b, k, c]) ** 2
    got = float(iwm_loss(T.Tensor(pred), tgt).data)
    assert got == pytest.approx(ref / 3, rel=1e-12)


def test_loss_unit_offset_equals_channel_count():
    pred = T.Tensor(np.ones((2, 1, 7)))
    assert float(iwm_loss(pred, np.zeros((2, 1, 7))).data) == pytest.approx(7.0)
    assert float(iwm_loss(pred, pred.data).data) == 0.0


def test_loss_rejects_misaligned_inputs():
    pred = T.Tensor(np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        iwm_loss(pred, np.zeros((1, 3, 3)))
    with pytest.raises(ValueError):
        iwm_loss(pred, np.zeros((1, 2, 3)), np.array([[0, 1]]), np.array([[0, 2]]))


def test_collapse_metric():
    assert collapse_metric(np.ones((4, 3))) == 0.0
    z = np.array([[0.0, 0.0], [2.0, 4.0]])
    assert collapse_metric(z) == pytest.approx((1.0 + 2.0) / 2)
    tokens = np.stack([np.full((3, 2), 0.0), np.full((3, 2), 2.0)])
    assert collapse_metric(tokens) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        collapse_metric(np.zeros((1, 3)))


def _batch(cfg, n=8):
    ds = synth_colorworld(n_classes=2, n_samples=max(n, 16), image_size=16)
    return next(epoch_batches(ds.images, np.arange(n), cfg, get_preset(cfg.preset), 0))


def test_collate_aligns_token_counts():
    cfg = small_cfg()
    b = _batch(cfg)
    assert b.sources.shape == (8, 3, 16, 16) and b.actions.shape == (8, 8)
    assert b.context_pos.shape[0] == 8 and b.target_pos.shape[0] == 8
    for c, t in zip(b.context_pos, b.target_pos):
        assert not set(c) & set(t)
        assert np.all(np.diff(c) > 0)
    with pytest.raises(ValueError):
        collate([])


def test_zero_lr_step_leaves_weights_and_teacher_follows_ema():
    cfg = small_cfg(lr=0.0, wd_start=0.0, wd_end=0.0)
    state = init_state(cfg)
    before = {k: v.copy() for k, v in state.student.items()}
    train_step(state, _batch(cfg), cfg, make_schedules(cfg, 4))
    for k, v in before.items():
        np.testing.assert_array_equal(state.student[k], v)
        np.testing.assert_allclose(state.teacher[k], v, rtol=1e-6, atol=1e-8)
    assert state.step == 1


def test_training_reduces_loss():
    cfg = small_cfg(lr=3e-3)
    state = init_state(cfg)
    batch = _batch(cfg)
    sched = make_schedules(cfg.__class__(**{**cfg.__dict__, "warmup_epochs": 0}), 200)
    losses = [train_step(state, batch, cfg, sched)["loss"] for _ in range(200)]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


def test_run_writes_outputs_and_reloads(tmp_path):
    cfg = small_cfg(epochs=1, log_every=1)
    state, bundle = run_pretraining(cfg, tmp_path)
    assert (tmp_path / "metrics.jsonl").read_text().count("\n") == state.step
    assert (tmp_path / "timing.jsonl").exists()
    back, back_cfg = load_model(tmp_path / "checkpoint")
    assert back_cfg == cfg and back.step == state.step
    for k, v in state.teacher.items():
        assert back.teacher[k].tobytes() == v.tobytes()


def test_run_is_deterministic():
    cfg = small_cfg(epochs=1)
    a, _ = run_pretraining(cfg)
    b, _ = run_pretraining(cfg)
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]


def test_resolution_mismatch_is_refused():
    cfg = small_cfg()
    ds = synth_colorworld(n_classes=2, n_samples=16, image_size=32)
    with pytest.raises(ValueError):
        run_pretraining(cfg, dataset=ds)
