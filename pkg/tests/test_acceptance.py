"""Acceptance suite: one test per criterion, each recording a pass/fail line
that the session summary prints. Training-based criteria share checkpoints
through session fixtures, so the whole module runs in one pytest session."""

import json
import time

import numpy as np
import pytest

import test_augment as aug_oracles
import test_pretrain as loss_oracles
import test_worldmodel as mrr_oracles
from iwm import tensor as T
from iwm.augment import get_preset
from iwm.checkpoint import load_checkpoint, save_checkpoint
from iwm.cli import main as cli_main
from iwm.data import DatasetRef, ingest_dataset, synth_colorworld
from iwm.gradcheck import TOLERANCE, run_gradcheck
from iwm.pretrain import PretrainConfig, collapse_metric, run_pretraining, state_to_bundle
from iwm.probes import (FinetuneConfig, PredictionTaskConfig, TaskSpec, multitask_finetune,
                        predictor_finetune, single_task_baselines, weights_hash)
from iwm.vit import ViTConfig, as_params, encode_numpy, predict, predictor_preset
from iwm.worldmodel import Model, encode_clean, marginal_retrieval, marginalize_invariant, mrr, sample_actions

pytestmark = pytest.mark.acceptance

# -- shared configuration ----------------------------------------------------------

DATA = DatasetRef(n_classes=4, n_samples=1024, image_size=64, seed=0)
ENCODER = ViTConfig(image_size=64, patch_size=8, dim=64, depth=3, heads=2)
EPOCHS = 30
CAPACITY_EPOCHS = 10
MRR_IMAGES = 8
BANK = 256
FINETUNE = FinetuneConfig(epochs=5, steps=800, batch_size=16, lr=1e-3, warmup_epochs=1, probe_aug="none")
ABLATION_STEPS = 100


def predictor(name="deep", conditioning="feature"):
    # the named presets scaled to the desk-size encoder width
    return predictor_preset(name, dim=64, heads=2, conditioning=conditioning)


def pretrain_cfg(**kw):
    base = dict(dataset=DATA, encoder=ENCODER, predictor=predictor(), preset="default", epochs=EPOCHS,
                batch_size=32, warmup_epochs=4, checkpoint_every=0)
    base.update(kw)
    return PretrainConfig(**base)


def record(acceptance, number, passed, detail):
    acceptance[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


@pytest.fixture(scope="session")
def dataset():
    return ingest_dataset(DATA)


@pytest.fixture(scope="session")
def eval_images(dataset):
    return dataset.images[dataset.val_idx[:MRR_IMAGES]]


_RUNS = {}


def trained(cfg, dataset):
    """Pretrain once per distinct config within the session; returns (state, cfg, seconds)."""
    key = json.dumps(cfg.to_dict(), sort_keys=True)
    if key not in _RUNS:
        start = time.perf_counter()
        state, _ = run_pretraining(cfg, dataset=dataset)
        _RUNS[key] = (state, cfg, time.perf_counter() - start)
    return _RUNS[key]


@pytest.fixture(scope="session")
def conditioning_runs(dataset):
    return {mode: trained(pretrain_cfg(predictor=predictor(conditioning=mode)), dataset)
            for mode in ("feature", "sequence", "none")}


@pytest.fixture(scope="session")
def equivariant_model(conditioning_runs):
    state, cfg, _ = conditioning_runs["feature"]
    return Model.from_state(state, cfg)


# -- criteria ------------------------------------------------------------------------

def test_criterion_01_autodiff_gradcheck(acceptance):
    start = time.perf_counter()
    results = run_gradcheck(seeds=20)
    seconds = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_error)
    ok = all(r.passed for r in results) and seconds < 120 and len(results) == len(T.OP_KINDS)
    record(acceptance, 1, ok, f"{len(results)} op kinds x 20 seeds, worst {worst.kind} "
                              f"{worst.max_error:.2e} (< {TOLERANCE:g}), {seconds:.1f} s (< 120 s)")


AUGMENT_ORACLES = [
    ("brightness/contrast/saturation", aug_oracles.test_brightness_contrast_saturation_per_pixel, ()),
    ("grayscale/solarize", aug_oracles.test_grayscale_and_solarize_per_pixel, ()),
    ("hue", aug_oracles.test_hue_matches_colorsys, ()),
    ("blur sigma 0.1 (1e-3)", aug_oracles.test_blur_matches_dense_convolution, (0.1, 1e-3)),
    ("blur sigma 0.7", aug_oracles.test_blur_matches_dense_convolution, (0.7, 1e-6)),
    ("blur sigma 1.6", aug_oracles.test_blur_matches_dense_convolution, (1.6, 1e-6)),
    ("crop/resize/flip", aug_oracles.test_crop_resize_flip_matches_scalar_bilinear, ()),
    ("mask 8x8", aug_oracles.test_mask_statistics_match_monte_carlo, ((8, 8),)),
    ("mask 14x14", aug_oracles.test_mask_statistics_match_monte_carlo, ((14, 14),)),
]


def _run_checks(checks):
    failed = []
    for name, fn, args in checks:
        try:
            fn(*args)
        except AssertionError as exc:
            failed.append(f"{name}: {str(exc).splitlines()[0] if str(exc) else 'mismatch'}")
    return failed


def test_criterion_02_augmentation_oracles(acceptance):
    failed = _run_checks(AUGMENT_ORACLES)
    record(acceptance, 2, not failed,
           f"{len(AUGMENT_ORACLES)} oracle checks on {aug_oracles.N_IMAGES} images"
           + (f"; failed: {failed}" if failed else ""))


def test_criterion_03_loss_and_mrr_oracles(acceptance):
    checks = [("loss double loop", loss_oracles.test_loss_matches_double_loop, ()),
              ("mrr full sort, 50 banks", mrr_oracles.test_mrr_matches_full_sort_oracle_on_50_banks, ()),
              ("random mrr vs H_256/256", mrr_oracles.test_random_predictions_reach_harmonic_baseline, ())]
    failed = _run_checks(checks)
    record(acceptance, 3, not failed, "loss, exact MRR and harmonic baseline oracles"
           + (f"; failed: {failed}" if failed else ""))


def test_criterion_04_conditioning_direction(acceptance, conditioning_runs, eval_images):
    scores, minutes = {}, {}
    for mode, (state, cfg, seconds) in conditioning_runs.items():
        scores[mode] = mrr(Model.from_state(state, cfg), eval_images, BANK, cfg.preset)
        minutes[mode] = seconds / 60
    ok = (scores["feature"] >= 0.5 and scores["sequence"] >= 0.5 and scores["none"] <= 0.1
          and max(minutes.values()) <= 30)
    detail = ", ".join(f"{m} MRR {scores[m]:.3f} ({minutes[m]:.1f} min)" for m in scores)
    record(acceptance, 4, ok, f"{detail}; need feature/sequence >= 0.5, none <= 0.1")


def test_criterion_05_capacity_direction(acceptance, dataset, eval_images):
    wins, cells = 0, []
    for seed in range(3):
        score = {}
        for name in ("shallow", "deep"):
            cfg = pretrain_cfg(predictor=predictor(name), preset="strong-destructive",
                               epochs=CAPACITY_EPOCHS, seed=seed)
            state, _, _ = trained(cfg, dataset)
            score[name] = mrr(Model.from_state(state, cfg), eval_images, BANK, cfg.preset)
        wins += score["deep"] >= score["shallow"] + 0.1
        cells.append(f"seed {seed}: deep {score['deep']:.3f} / shallow {score['shallow']:.3f}")
    record(acceptance, 5, wins >= 2, f"{'; '.join(cells)}; deep >= shallow + 0.1 in {wins}/3")


def test_criterion_06_non_collapse(acceptance, conditioning_runs, dataset):
    state, cfg, _ = conditioning_runs["feature"]
    shared_state, _, _ = trained(pretrain_cfg(teacher="shared"), dataset)
    images = dataset.images[dataset.val_idx]

    def metric(st):
        model = Model.from_state(st, cfg)
        return collapse_metric(encode_numpy(images, model.teacher, cfg.encoder))

    ema, shared = metric(state), metric(shared_state)
    record(acceptance, 6, ema >= 0.05 and np.isfinite(shared),
           f"EMA teacher collapse metric {ema:.4f} (>= 0.05); shared-weights diagnostic {shared:.4f}")


def test_criterion_07_predictor_reuse(acceptance, equivariant_model, dataset):
    hash_before = weights_hash(equivariant_model.teacher)
    wins, cells, hashes_ok = 0, [], True
    for seed in range(3):
        cfg = FinetuneConfig(**{**FINETUNE.__dict__, "seed": seed})
        acc = {}
        for pretrained in (True, False):
            res = predictor_finetune(equivariant_model, dataset,
                                     PredictionTaskConfig(pretrained_predictor=pretrained), cfg)
            acc[pretrained] = res.accuracy["task"]
            hashes_ok &= res.encoder_hash == hash_before
        wins += acc[True] >= acc[False]
        cells.append(f"seed {seed}: pretrained {acc[True]:.3f} / random {acc[False]:.3f}")
    hashes_ok &= weights_hash(equivariant_model.teacher) == hash_before
    record(acceptance, 7, wins >= 2 and hashes_ok,
           f"{'; '.join(cells)}; pretrained >= random in {wins}/3; encoder hash unchanged: {hashes_ok}")


def test_criterion_08_prediction_task_ablation(acceptance, conditioning_runs, tmp_path_factory):
    state, cfg, _ = conditioning_runs["feature"]
    root = tmp_path_factory.mktemp("ablation")
    save_checkpoint(state_to_bundle(state, cfg), root / "checkpoint")
    config = root / "ablation.cfg"
    lines = ["seed = 0", "[dataset]"] + [f"{k} = {v}" for k, v in DATA.__dict__.items() if v is not None]
    lines += ["[finetune]", f"steps = {ABLATION_STEPS}", "epochs = 1", f"batch_size = {FINETUNE.batch_size}",
              "probe_aug = none"]
    config.write_text("\n".join(lines) + "\n")
    code = cli_main(["finetune-predictor", "--ablation", "--config", str(config),
                     "--checkpoint", str(root / "checkpoint"), "--out", str(root / "out")])
    rows = (root / "out" / "prediction_task_ablation.csv").read_text().splitlines() if code == 0 else []
    n = ENCODER.num_patches
    combos, tokens_ok = set(), True
    for line in rows[1:]:
        null, teacher, one, acc, tokens = line.split(",")
        combos.add((null, teacher, one))
        tokens_ok &= int(tokens) == (n + 1 if one == "1" else 2 * n) and 0.0 <= float(acc) <= 1.0
    ok = code == 0 and rows[0] == "null_latents,on_teacher,one_token,accuracy,predictor_tokens" \
        and len(combos) == 8 and len(rows) == 9 and tokens_ok
    record(acceptance, 8, ok, f"exit {code}, {len(rows) - 1 if rows else 0} rows, {len(combos)} flag combinations, "
                              f"token counts {n + 1} (one token) / {2 * n} (full image) asserted: {tokens_ok}")


def test_criterion_09_multitask_parity(acceptance, equivariant_model):
    tasks = [TaskSpec("shape", synth_colorworld(4, 1024, 64, seed=1)),
             TaskSpec("stripes", synth_colorworld(4, 1024, 64, seed=2, label_source="background"))]
    multi = multitask_finetune(equivariant_model, tasks, FINETUNE)
    single = single_task_baselines(equivariant_model, tasks, FINETUNE)
    m = multi.mean_accuracy
    s = float(np.mean([single[t.task_id].accuracy["task"] for t in tasks]))
    per_task = ", ".join(f"{t.task_id} {multi.accuracy[t.task_id]:.3f} vs {single[t.task_id].accuracy['task']:.3f}"
                         for t in tasks)
    matched = all(single[t.task_id].steps == multi.steps for t in tasks)
    majority = np.mean([np.bincount(t.dataset.split("val")[1]).max() / len(t.dataset.val_idx) for t in tasks])
    record(acceptance, 9, abs(m - s) <= 0.02 and matched,
           f"multitask mean {m:.3f} vs single-task mean {s:.3f} ({per_task}); {multi.steps} iterations each; "
           f"majority-class reference {majority:.3f}")


def test_criterion_10_marginalization(acceptance, equivariant_model, dataset):
    model = equivariant_model
    img = dataset.images[dataset.val_idx[0]]
    z = encode_clean(img, model)
    _, acts = sample_actions(1, get_preset("default"), 0)
    single = marginalize_invariant(z, acts, model)
    pos = np.arange(z.shape[0])[None]
    with T.no_grad():
        direct = predict(T.Tensor(z[None]), pos, pos, acts, as_params(model.predictor), model.predictor_cfg).data[0]
    bitwise = single.tobytes() == direct.tobytes()
    res = marginal_retrieval(model, dataset.images[dataset.val_idx], n_actions=64, bank_size=BANK, trials=100)
    record(acceptance, 10, bitwise and res["hit_rate"] >= 0.6,
           f"N=1 bitwise equal: {bitwise}; N=64 clean-image nearest neighbour in "
           f"{res['hit_rate']:.0%} of {res['trials']} trials (need >= 60%); "
           f"exact bank centroid finds it in {res['centroid_hit_rate']:.0%}")


TINY = """seed = 3
[dataset]
n_classes = 2
n_samples = 48
image_size = 16
[encoder]
image_size = 16
patch_size = 4
dim = 16
depth = 1
heads = 2
[predictor]
dim = 16
depth = 1
heads = 2
[pretrain]
epochs = 2
batch_size = 8
log_every = 1
[eval]
images = 2
bank = 8
trials = 3
actions = 4
[finetune]
steps = 3
batch_size = 8
probe_aug = none
"""


def test_criterion_11_determinism(acceptance, tmp_path):
    (tmp_path / "tiny.cfg").write_text(TINY)
    cfg = str(tmp_path / "tiny.cfg")
    artefacts = {"pretrain": ["metrics.jsonl", "summary.jsonl"], "eval-mrr": ["mrr.jsonl"],
                 "marginalize": ["marginalize.jsonl"], "finetune-predictor": ["finetune.jsonl"],
                 "simmatrix": ["simmatrix.jsonl"], "probe-linear": ["probe.jsonl"]}
    mismatched, codes = [], []
    for rep in ("a", "b"):
        codes.append(cli_main(["pretrain", "--config", cfg, "--out", str(tmp_path / rep / "pretrain")]))
        ck = str(tmp_path / rep / "pretrain" / "checkpoint")
        for command in artefacts:
            if command != "pretrain":
                codes.append(cli_main([command, "--config", cfg, "--checkpoint", ck,
                                       "--out", str(tmp_path / rep / command)]))
    for command, names in artefacts.items():
        for name in names:
            a, b = (tmp_path / r / command / name for r in ("a", "b"))
            if not (a.exists() and b.exists() and a.read_bytes() == b.read_bytes()):
                mismatched.append(f"{command}/{name}")
    bundle = load_checkpoint(tmp_path / "a" / "pretrain" / "checkpoint")
    save_checkpoint(bundle, tmp_path / "resaved")
    again = load_checkpoint(tmp_path / "resaved")
    bitwise = all(again.tensors[k].tobytes() == v.tobytes() and again.tensors[k].dtype == v.dtype
                  for k, v in bundle.tensors.items())
    ck_a = (tmp_path / "a" / "pretrain" / "checkpoint" / "tensors.bin").read_bytes()
    bitwise &= ck_a == (tmp_path / "b" / "pretrain" / "checkpoint" / "tensors.bin").read_bytes()
    ok = not mismatched and bitwise and all(c == 0 for c in codes)
    record(acceptance, 11, ok, f"{len(codes) // 2} subcommands rerun, identical outputs: {not mismatched}"
                               f"{' (differ: ' + ', '.join(mismatched) + ')' if mismatched else ''}; "
                               f"checkpoint round trip bitwise: {bitwise}")
