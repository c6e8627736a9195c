import numpy as np
import pytest

from iwm import tensor as T
from iwm.data import Dataset, synth_colorworld
from iwm.probes import (FinetuneConfig, PredictionTaskConfig, ProbeConfig, TaskSpec, _split_sizes,
                        _task_actions, ablation_grid, attentive_pool, attentive_probe, init_attentive_head,
                        linear_probe, multitask_finetune, predictor_finetune, single_task_baselines,
                        train_classifier, tune_predictor, weights_hash)
from iwm.vit import PredictorConfig, ViTConfig, as_params, init_encoder, init_predictor
from iwm.worldmodel import Model

ENC = ViTConfig(image_size=16, patch_size=4, dim=16, depth=1, heads=2)


def toy_model(seed=0):
    rng = np.random.default_rng(seed)
    student = init_encoder(ENC, rng)
    pcfg = PredictorConfig(depth=1, dim=16, heads=2, conditioning="feature")
    return Model(student, {k: v.copy() for k, v in student.items()},
                 init_predictor(pcfg, ENC.dim, ENC.num_patches, rng), ENC, pcfg)


def brightness_dataset(n=96, seed=0):
    """Two classes told apart by overall brightness; trivially learnable."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels == 1, 0.8, 0.2)[:, None, None, None]
    images = np.clip(base + rng.normal(0, 0.05, (n, 3, 16, 16)), 0, 1).astype(np.float32)
    order = rng.permutation(n)
    return Dataset(images, labels.astype(np.int64), ["dark", "bright"], np.sort(order[:64]), np.sort(order[64:]))


def fit(x, y, kind, xv, yv, epochs=30, **kw):
    cfg = ProbeConfig(kind=kind, epochs=epochs, batch_size=32, lr=1e-2, probe_aug="none", **kw)
    return train_classifier(x, y, int(max(y.max(), yv.max())) + 1, cfg, xv, yv)


def test_linear_probe_separable_embeddings():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(8)
    x = rng.standard_normal((600, 8))
    x += np.sign(x @ w)[:, None] * 0.5 * w / np.linalg.norm(w)  # margin around the plane
    y = (x @ w > 0).astype(int)
    res = fit(x[:400], y[:400], "linear", x[400:], y[400:])
    assert res.accuracy >= 0.99


def test_linear_probe_random_labels_is_chance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2400, 8))
    y = rng.integers(0, 2, 2400)
    res = fit(x[:400], y[:400], "linear", x[400:], y[400:], epochs=5)
    assert abs(res.accuracy - 0.5) <= 0.05


def test_same_seed_same_accuracy():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((200, 4)), rng.integers(0, 3, 200)
    a = fit(x[:150], y[:150], "attentive", x[150:], y[150:], epochs=3)
    b = fit(x[:150], y[:150], "attentive", x[150:], y[150:], epochs=3)
    assert a.accuracy == b.accuracy and a.history == b.history


def test_constant_encoder_attentive_equals_linear():
    y = np.array([0] * 70 + [1] * 30)
    x = np.ones((100, 4, 6))
    lin = fit(x[:80], y[:80], "linear", x[80:], y[80:])
    att = fit(x[:80], y[:80], "attentive", x[80:], y[80:])
    assert lin.accuracy == att.accuracy == pytest.approx(np.mean(y[80:] == 0))


def test_attention_weights_sum_to_one():
    p = as_params(init_attentive_head(8, 3, np.random.default_rng(3)))
    for heads in (1, 2, 4):
        rec = []
        out = attentive_pool(T.Tensor(np.random.default_rng(4).standard_normal((5, 7, 8))), p, heads, rec)
        assert out.shape == (5, 8)
        np.testing.assert_allclose(rec[0].sum(-1), 1.0, atol=1e-6)


def test_attentive_reads_a_single_token():
    # class sign lives in token 0; token 1 carries its negation, so mean pooling sees nothing
    rng = np.random.default_rng(5)
    n, d = 800, 6
    y = rng.integers(0, 2, n)
    s = (2 * y - 1)[:, None] * np.ones(3)
    x = np.zeros((n, 2, d))
    x[:, 0, :3], x[:, 1, :3] = s, -s
    x[:, 0, 3], x[:, 1, 4] = 1.0, 1.0
    x += rng.normal(0, 0.1, x.shape)
    lin = fit(x[:600], y[:600], "linear", x[600:], y[600:])
    att = fit(x[:600], y[:600], "attentive", x[600:], y[600:], epochs=60)
    assert lin.accuracy < 0.65
    assert att.accuracy >= lin.accuracy and att.accuracy > 0.9


def test_image_probes_keep_encoder_frozen():
    model = toy_model()
    ds = brightness_dataset()
    before = weights_hash(model.teacher)
    lin = linear_probe(model.teacher, ENC, ds, ProbeConfig(epochs=50, batch_size=32, lr=1e-2))
    att = attentive_probe(model.teacher, ENC, ds, ProbeConfig(kind="attentive", epochs=50, batch_size=32,
                                                               lr=1e-2, probe_aug="none"))
    assert weights_hash(model.teacher) == before
    assert lin.accuracy >= 0.9 and att.accuracy >= 0.9
    changed = dict(model.teacher)
    changed["pos"] = changed["pos"] + 1
    assert weights_hash(changed) != before


FT = FinetuneConfig(epochs=2, steps=100, batch_size=16, lr=3e-3, warmup_epochs=0, probe_aug="none")


def test_zero_steps_is_chance():
    ds = synth_colorworld(n_classes=4, n_samples=200, image_size=16)
    cfg = FinetuneConfig(epochs=0, batch_size=16, probe_aug="none")
    res = predictor_finetune(toy_model(), ds, cfg=cfg)
    assert res.steps == 0 and res.history == []
    assert res.accuracy["task"] <= 0.5


def test_finetune_learns_easy_task_and_keeps_encoder():
    model = toy_model()
    res = predictor_finetune(model, brightness_dataset(), cfg=FT)
    assert res.accuracy["task"] >= 0.95
    assert res.encoder_hash == weights_hash(model.teacher)
    assert np.mean(res.history[-5:]) < np.mean(res.history[:5])


def test_predictor_token_counts():
    model, ds = toy_model(), brightness_dataset()
    n = ENC.num_patches
    cfg = FinetuneConfig(epochs=1, steps=1, batch_size=8, probe_aug="none")
    full = predictor_finetune(model, ds, PredictionTaskConfig(single_token=False), cfg)
    one = predictor_finetune(model, ds, PredictionTaskConfig(single_token=True), cfg)
    assert full.predictor_tokens == 2 * n and one.predictor_tokens == n + 1


def test_random_and_pretrained_predictor_share_code_path():
    model, ds = toy_model(), brightness_dataset()
    cfg = FinetuneConfig(epochs=1, steps=2, batch_size=8, probe_aug="none")
    a = predictor_finetune(model, ds, PredictionTaskConfig(pretrained_predictor=True), cfg)
    b = predictor_finetune(model, ds, PredictionTaskConfig(pretrained_predictor=False), cfg)
    assert a.predictor_tokens == b.predictor_tokens and a.steps == b.steps
    assert a.history != b.history


def test_null_latents_are_exact_zero():
    acts = _task_actions(5, True, "default", 0, 0, 0, 8)
    assert acts.shape == (5, 8) and not acts.any()
    assert _task_actions(5, False, "default", 0, 0, 0, 8).any()


def test_split_sizes():
    for b in range(3, 40):
        for k in range(1, 4):
            sizes = _split_sizes(b, k)
            assert sum(sizes) == b and max(sizes) - min(sizes) <= 1


def test_one_task_reduces_to_finetune():
    model, ds = toy_model(), brightness_dataset()
    cfg = FinetuneConfig(epochs=1, steps=5, batch_size=8, probe_aug="none")
    multi = multitask_finetune(model, [TaskSpec("task", ds)], cfg)
    single = predictor_finetune(model, ds, cfg=cfg)
    assert multi.history == single.history and multi.accuracy == single.accuracy


def test_duplicate_tasks_agree():
    model, ds = toy_model(), brightness_dataset()
    res = multitask_finetune(model, [TaskSpec("a", ds), TaskSpec("b", ds)], FT)
    assert abs(res.accuracy["a"] - res.accuracy["b"]) <= 0.01
    assert res.per_task_examples == {"a": 8 * 100, "b": 8 * 100}
    base = single_task_baselines(model, [TaskSpec("a", ds)], FT)
    assert base["a"].steps == res.steps


def test_task_errors():
    model, ds = toy_model(), brightness_dataset()
    with pytest.raises(ValueError):
        tune_predictor(model, [TaskSpec("a", ds), TaskSpec("a", ds)], FT)
    with pytest.raises(ValueError):
        tune_predictor(model, [], FT)
    with pytest.raises(ValueError):
        single_task_baselines(model, [TaskSpec("a", ds)], FinetuneConfig())


def test_ablation_grid_rows():
    cfg = FinetuneConfig(epochs=1, steps=1, batch_size=8, probe_aug="none")
    rows = ablation_grid(toy_model(), brightness_dataset(), cfg)
    assert len(rows) == 8
    assert {(r["null_latents"], r["on_teacher"], r["one_token"]) for r in rows} == {
        (a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)}
    n = ENC.num_patches
    for r in rows:
        assert r["predictor_tokens"] == (n + 1 if r["one_token"] else 2 * n)
