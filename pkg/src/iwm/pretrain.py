"""IWM pretraining: student on the masked source, EMA teacher on the full target,
action-conditioned predictor trained with a summed squared-L2 latent loss."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugPreset, ViewPair, get_preset, key_rng, sample_view_pair
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .data import Dataset, DatasetRef, ingest_dataset, ordered_map
from .optim import AdamW, Schedules, default_schedules, ema_update
from .vit import (PredictorConfig, ViTConfig, as_params, encode, init_encoder, init_predictor,
                  predict)

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, dump: Path | None):
        super().__init__(f"non-finite loss at step {step}; state dumped to {dump}")
        self.step = step
        self.dump = dump


@dataclass
class PretrainConfig:
    dataset: DatasetRef = field(default_factory=DatasetRef)
    encoder: ViTConfig = field(default_factory=ViTConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    preset: str = "default"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    lr_end: float = 1e-6
    warmup_epochs: float = 4
    wd_start: float = 0.04
    wd_end: float = 0.4
    ema_start: float = 0.996
    ema_end: float = 1.0
    stretch: float = 1.25
    seed: int = 0
    teacher: str = "ema"  # "ema" or "shared" (teacher == student, collapse diagnostic)
    normalize_targets: bool = False
    checkpoint_every: int = 10  # epochs; 0 disables periodic checkpoints
    log_every: int = 10  # steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        d["dataset"] = DatasetRef(**d.get("dataset", {}))
        d["encoder"] = ViTConfig(**d.get("encoder", {}))
        d["predictor"] = PredictorConfig(**d.get("predictor", {}))
        return cls(**d)


@dataclass
class TrainState:
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    predictor: dict[str, np.ndarray]
    optimizer: AdamW
    step: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass
class Batch:
    sources: np.ndarray  # (B, 3, H, W) float32
    targets: np.ndarray
    actions: np.ndarray  # (B, k) float32
    context_pos: np.ndarray  # (B, Kc)
    target_pos: np.ndarray  # (B, Kt)

    def __len__(self):
        return len(self.sources)


def init_state(cfg: PretrainConfig) -> TrainState:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    student = init_encoder(cfg.encoder, rng)
    predictor = init_predictor(cfg.predictor, cfg.encoder.dim, cfg.encoder.num_patches, rng)
    teacher = {k: v.copy() for k, v in student.items()}
    params = {**_prefixed("student", student), **_prefixed("predictor", predictor)}
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.wd_start)
    return TrainState(student, teacher, predictor, opt)


def _prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in d.items()}


def _strip(prefix: str, d: dict) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in d.items() if k.startswith(p)}


def collate(pairs: list[ViewPair]) -> Batch:
    """Stack view pairs; trims every sample to the batch-minimum context and
    target counts by a per-sample random subset so token counts line up."""
    if not pairs:
        raise ValueError("empty batch")
    n_ctx = min(len(p.mask.context) for p in pairs)
    n_tgt = min(len(p.mask.masked) for p in pairs)
    ctx, tgt = [], []
    for p in pairs:
        rng = key_rng(tuple(p.key) + (104729,))
        c, m = p.mask.context, p.mask.masked
        ctx.append(np.sort(rng.choice(c, n_ctx, replace=False)) if len(c) > n_ctx else c)
        tgt.append(np.sort(rng.choice(m, n_tgt, replace=False)) if len(m) > n_tgt else m)
    return Batch(
        np.stack([p.source for p in pairs]).astype(np.float32),
        np.stack([p.target for p in pairs]).astype(np.float32),
        np.stack([p.action for p in pairs]).astype(np.float32),
        np.stack(ctx).astype(np.int64),
        np.stack(tgt).astype(np.int64),
    )


def iwm_loss(pred: T.Tensor, target, pred_pos: np.ndarray | None = None,
             target_pos: np.ndarray | None = None) -> T.Tensor:
    """Sum over predicted positions and channels of squared error, mean over the batch."""
    target = T.as_tensor(target)
    if pred_pos is not None and target_pos is not None and not np.array_equal(pred_pos, target_pos):
        raise ValueError("prediction and target positions are not aligned")
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return T.sum_(diff * diff) * (1.0 / pred.shape[0])


def collapse_metric(latents) -> float:
    """Mean over channels of the per-channel std of mean-pooled embeddings."""
    z = np.asarray(latents.data if isinstance(latents, T.Tensor) else latents, dtype=np.float64)
    if z.ndim == 3:
        z = z.mean(axis=1)
    if len(z) < 2:
        raise ValueError("collapse metric needs at least two embeddings")
    return float(z.std(axis=0).mean())


def make_schedules(cfg: PretrainConfig, steps_per_epoch: int) -> Schedules:
    total = max(1, cfg.epochs * steps_per_epoch)
    warmup = min(total, int(round(cfg.warmup_epochs * steps_per_epoch)))
    return default_schedules(total, warmup, cfg.lr, cfg.wd_start, cfg.wd_end,
                             cfg.ema_start, cfg.ema_end, cfg.stretch, cfg.lr_end)


def train_step(state: TrainState, batch: Batch, cfg: PretrainConfig, schedules: Schedules) -> dict:
    hp = schedules.at(state.step)
    momentum = 0.0 if cfg.teacher == "shared" else hp["ema_momentum"]

    student = as_params(state.student, requires_grad=True)
    predictor = as_params(state.predictor, requires_grad=True)
    z_x = encode(batch.sources, student, cfg.encoder, batch.context_pos)
    teacher_arrays = state.student if cfg.teacher == "shared" else state.teacher
    with T.no_grad():
        z_y = encode(batch.targets, as_params(teacher_arrays), cfg.encoder)
        if cfg.normalize_targets:
            z_y = T.layer_norm(z_y, -1, cfg.encoder.ln_eps)
    targets = np.take_along_axis(z_y.data, batch.target_pos[:, :, None], axis=1)
    pred = predict(z_x, batch.context_pos, batch.target_pos, batch.actions, predictor, cfg.predictor)
    loss = iwm_loss(pred, targets)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")

    params = {**_prefixed("student", student), **_prefixed("predictor", predictor)}
    grads = T.grad(loss, params)
    grad_norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))

    state.optimizer.lr = hp["lr"]
    state.optimizer.weight_decay = hp["wd"]
    arrays = {**_prefixed("student", state.student), **_prefixed("predictor", state.predictor)}
    updated = state.optimizer.step(arrays, grads)
    state.student = _strip("student", updated)
    state.predictor = _strip("predictor", updated)
    state.teacher = ema_update(state.teacher, state.student, momentum)
    state.step += 1
    metrics = {
        "step": state.step,
        "loss": float(loss.data),
        "lr": hp["lr"],
        "wd": hp["wd"],
        "ema_momentum": momentum,
        "embed_std": collapse_metric(z_y.data),
        "grad_norm": grad_norm,
    }
    return metrics


def epoch_batches(dataset_images: np.ndarray, indices: np.ndarray, cfg: PretrainConfig,
                  preset: AugPreset, epoch: int):
    """Yield collated batches for one epoch; drops the last incomplete batch."""
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 2])).permutation(indices)
    nb = len(order) // cfg.batch_size
    for b in range(nb):
        chunk = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        pairs = ordered_map(
            lambda i: sample_view_pair(dataset_images[i].astype(np.float64), (cfg.seed, epoch, int(i)),
                                       preset, cfg.encoder.patch_size),
            chunk)
        yield collate(pairs)


def state_to_bundle(state: TrainState, cfg: PretrainConfig, metrics: dict | None = None) -> CheckpointBundle:
    tensors = {**_prefixed("student", state.student), **_prefixed("teacher", state.teacher),
               **_prefixed("predictor", state.predictor),
               **_prefixed("opt", state.optimizer.state_arrays())}
    return CheckpointBundle(tensors, {"pretrain": cfg.to_dict()}, state.step, dict(metrics or {}))


def state_from_bundle(bundle: CheckpointBundle) -> tuple[TrainState, PretrainConfig]:
    cfg = PretrainConfig.from_dict(bundle.configs["pretrain"])
    student = bundle.group("student")
    predictor = bundle.group("predictor")
    opt = AdamW({**_prefixed("student", student), **_prefixed("predictor", predictor)},
                lr=cfg.lr, weight_decay=cfg.wd_start)
    opt_arrays = bundle.group("opt")
    if opt_arrays:
        opt.load_state_arrays(opt_arrays, bundle.step)
    state = TrainState(student, bundle.group("teacher"), predictor, opt, bundle.step)
    return state, cfg


def run_pretraining(cfg: PretrainConfig, out_dir=None, dataset: Dataset | None = None,
                    progress=None) -> tuple[TrainState, CheckpointBundle]:
    """Full training loop. Writes ``metrics.jsonl``, ``timing.jsonl`` and
    checkpoints under ``out_dir`` when given."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = ingest_dataset(cfg.dataset)
    if dataset.images.shape[-1] != cfg.encoder.image_size:
        raise ValueError(f"dataset resolution {dataset.images.shape[-1]} != encoder image size "
                         f"{cfg.encoder.image_size}")
    preset = get_preset(cfg.preset)
    train_idx = dataset.train_idx
    steps_per_epoch = len(train_idx) // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError("batch size larger than the training split")
    schedules = make_schedules(cfg, steps_per_epoch)
    state = init_state(cfg)
    metrics_f = open(out / "metrics.jsonl", "w") if out else None
    timing_f = open(out / "timing.jsonl", "w") if out else None
    start = time.perf_counter()
    last = {}
    try:
        for epoch in range(cfg.epochs):
            for batch in epoch_batches(dataset.images, train_idx, cfg, preset, epoch):
                try:
                    last = train_step(state, batch, cfg, schedules)
                except FloatingPointError:
                    dump = None
                    if out is not None:
                        dump = save_checkpoint(state_to_bundle(state, cfg, {"diverged": True}),
                                               out / "diverged")
                    raise TrainingDiverged(state.step, dump) from None
                state.history.append(last)
                if state.step % cfg.log_every == 0 or state.step == 1:
                    if metrics_f:
                        metrics_f.write(json.dumps(last, sort_keys=True) + "\n")
                    if timing_f:
                        timing_f.write(json.dumps({"step": state.step,
                                                   "wallclock": time.perf_counter() - start}) + "\n")
                    if progress:
                        progress(epoch, last)
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 \
                    and epoch + 1 < cfg.epochs:
                try:
                    save_checkpoint(state_to_bundle(state, cfg, last), out / f"checkpoint-epoch{epoch + 1:04d}")
                except OSError as exc:
                    raise OSError(f"checkpoint write failed at step {state.step}: {exc}") from exc
    finally:
        if metrics_f:
            metrics_f.close()
        if timing_f:
            timing_f.close()
    bundle = state_to_bundle(state, cfg, last)
    if out is not None:
        try:
            save_checkpoint(bundle, out / "checkpoint")
        except OSError as exc:
            raise OSError(f"final checkpoint write failed at step {state.step}: {exc}") from exc
    return state, bundle


def load_model(path):
    """Load a pretraining checkpoint; returns (TrainState, PretrainConfig)."""
    return state_from_bundle(load_checkpoint(path))
