"""Frozen-encoder evaluations: linear and attentive probes, predictor
finetuning under several prediction tasks, and multitask predictor tuning
with learned task tokens."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .augment import (SourceParams, apply_destructive, apply_jitter, encode_action, get_preset,
                      key_rng, random_resized_crop_flip, sample_crop_flip, sample_destructive,
                      sample_jitter)
from .data import Dataset
from .optim import AdamW, ScheduleSpec, schedule_value
from .vit import (PredictorConfig, ViTConfig, as_params, encode, init_predictor, linear, norm,
                  predict)

PROBE_AUGS = ("none", "crop", "full")


def weights_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# -- configs -------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    kind: str = "linear"  # or "attentive"
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup_epochs: float = 0.0
    heads: int = 1
    probe_aug: str = "crop"  # none | crop | full (adds source-style jitter and destructive)
    crop_scale: tuple[float, float] = (0.08, 1.0)
    preset: str = "default"
    encoder: str = "teacher"  # which encoder of a checkpoint gets probed
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "attentive"):
            raise ValueError(f"unknown probe kind {self.kind!r}")
        if self.probe_aug not in PROBE_AUGS:
            raise ValueError(f"probe_aug must be one of {PROBE_AUGS}")


@dataclass(frozen=True)
class PredictionTaskConfig:
    use_teacher: bool = True
    null_latents: bool = True
    single_token: bool = False
    pretrained_predictor: bool = True
    lr_divisor: float = 10.0

    @property
    def label(self) -> str:
        return (f"teacher={int(self.use_teacher)},null={int(self.null_latents)},"
                f"one_token={int(self.single_token)},pretrained={int(self.pretrained_predictor)}")


@dataclass
class FinetuneConfig:
    epochs: int = 10
    steps: int | None = None  # total iterations; derived from epochs when unset
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.1
    warmup_epochs: float = 1.0
    head_heads: int = 1
    probe_aug: str = "crop"
    crop_scale: tuple[float, float] = (0.3, 1.0)
    preset: str = "default"  # action distribution when latents are not null
    seed: int = 0


@dataclass
class TaskSpec:
    task_id: str
    dataset: Dataset
    weight: float = 1.0

    @property
    def n_classes(self) -> int:
        return self.dataset.num_classes


@dataclass
class ProbeResult:
    accuracy: float
    history: list[float] = field(default_factory=list)
    params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class FinetuneResult:
    accuracy: dict[str, float]
    steps: int
    per_task_examples: dict[str, int]
    predictor_tokens: int
    encoder_hash: str
    history: list[float] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values())))


# -- heads ---------------------------------------------------------------------------

def _normal(rng, shape, std=0.02):
    return (rng.standard_normal(shape) * std).astype(np.float32)


def init_linear_head(dim: int, n_classes: int, rng) -> dict[str, np.ndarray]:
    return {"head.w": _normal(rng, (dim, n_classes), 0.01), "head.b": np.zeros(n_classes, np.float32)}


def linear_head(tokens: T.Tensor, p: dict) -> T.Tensor:
    """Mean-pool along the sequence axis, then one linear layer."""
    return linear(T.mean(tokens, axis=1), p, "head")


def init_attentive_head(dim: int, n_classes: int, rng, n_tokens: int | None = None) -> dict[str, np.ndarray]:
    p = {
        "query": _normal(rng, (1, dim)),
        "ln.g": np.ones(dim, np.float32), "ln.b": np.zeros(dim, np.float32),
        "q.w": _normal(rng, (dim, dim)), "q.b": np.zeros(dim, np.float32),
        # near-uniform attention at init, so the head starts out as a mean-pooling probe
        "kv.w": _normal(rng, (dim, 2 * dim), 1.0 / np.sqrt(dim)), "kv.b": np.zeros(2 * dim, np.float32),
        **init_linear_head(dim, n_classes, rng),
    }
    if n_tokens is not None:
        p["n_tokens"] = np.array([n_tokens], dtype=np.int64)
    return p


def attentive_pool(tokens: T.Tensor, p: dict, heads: int = 1, record: list | None = None) -> T.Tensor:
    """One learned query cross-attends over the unpooled tokens; returns (B, d)."""
    b, g, d = tokens.shape
    if d % heads:
        raise ValueError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads
    x = norm(tokens, p, "ln")
    q = linear(T.reshape(p["query"], (1, 1, d)), p, "q")
    q = T.broadcast_to(q, (b, 1, d)).reshape(b, 1, heads, dh).transpose(0, 2, 1, 3)
    kv = linear(x, p, "kv").reshape(b, g, 2, heads, dh).transpose(2, 0, 3, 1, 4)
    k, v = kv[0], kv[1]
    attn = T.softmax((q @ T.swap_last(k)) * (1.0 / np.sqrt(dh)), axis=-1)
    if record is not None:
        record.append(attn.data)
    return (attn @ v).transpose(0, 2, 1, 3).reshape(b, d)


def attentive_head(tokens: T.Tensor, p: dict, heads: int = 1, record: list | None = None) -> T.Tensor:
    if "n_tokens" in p and tokens.shape[1] != int(p["n_tokens"].data[0]):
        raise ValueError(f"head expects {int(p['n_tokens'].data[0])} tokens, got {tokens.shape[1]}")
    pooled = attentive_pool(tokens, p, heads, record)
    return linear(pooled, p, "head")


def _trainable(p: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in p.items() if v.dtype.kind == "f"}


# -- generic fitting -----------------------------------------------------------------

def _fit(params: dict[str, np.ndarray], loss_fn, batches, total_steps: int, lr: float, wd: float,
         warmup_steps: int, lr_scale: dict[str, float] | None = None) -> tuple[dict, list[float]]:
    """Minimise ``loss_fn(tensor_params, batch)`` over the given batch stream with AdamW
    and a warmup-cosine schedule ending at zero."""
    train = _trainable(params)
    fixed = {k: v for k, v in params.items() if k not in train}
    opt = AdamW(train, lr=lr, weight_decay=wd, lr_scale=lr_scale)
    spec = ScheduleSpec("warmup-cosine", min(warmup_steps, total_steps), max(1, total_steps), 1.0, 0.0, lr, 0.0)
    history = []
    for step, batch in zip(range(total_steps), batches):
        tp = {**as_params(train, requires_grad=True), **as_params(fixed)}
        loss = loss_fn(tp, batch)
        grads = T.grad(loss, {k: tp[k] for k in train})
        opt.lr = schedule_value(spec, step)
        train = opt.step(train, grads)
        history.append(float(loss.data))
    return {**train, **fixed}, history


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def _epoch_order(n: int, seed: int, epoch: int, stream: int = 0) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, stream, 11])).permutation(n)


def _index_batches(n: int, batch_size: int, seed: int, epochs: int, stream: int = 0):
    """Shuffled index batches; the final short batch of an epoch is dropped
    unless it is the only one."""
    bs = min(batch_size, n)
    for epoch in range(epochs):
        order = _epoch_order(n, seed, epoch, stream)
        for b in range(max(1, n // bs)):
            yield epoch, order[b * bs:(b + 1) * bs]


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // min(batch_size, n))


def train_classifier(inputs, labels: np.ndarray, n_classes: int, cfg: ProbeConfig,
                     val_inputs=None, val_labels=None) -> ProbeResult:
    """Fit a linear or attentive head on precomputed inputs.

    ``inputs`` is an array (N, d) or (N, G, d) of frozen features, or a
    callable ``(indices, epoch) -> array`` producing them on demand (used to
    re-augment images every epoch).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    get = inputs if callable(inputs) else (lambda idx, epoch: _as_tokens(inputs[idx]))
    probe_dim = _as_tokens(get(np.arange(min(n, 1)), 0)).shape[-1]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
    if cfg.kind == "linear":
        params = init_linear_head(probe_dim, n_classes, rng)
        forward = linear_head
    else:
        params = init_attentive_head(probe_dim, n_classes, rng)
        forward = lambda x, p: attentive_head(x, p, cfg.heads)  # noqa: E731

    def loss_fn(tp, batch):
        idx, epoch = batch
        x = T.Tensor(_as_tokens(get(idx, epoch)))
        return T.cross_entropy(forward(x, tp), labels[idx])

    spe = _steps_per_epoch(n, cfg.batch_size)
    batches = ((idx, epoch) for epoch, idx in _index_batches(n, cfg.batch_size, cfg.seed, cfg.epochs))
    params, history = _fit(params, loss_fn, batches, cfg.epochs * spe, cfg.lr, cfg.weight_decay,
                           int(round(cfg.warmup_epochs * spe)))
    acc = float("nan")
    if val_inputs is not None:
        logits = predict_classifier(val_inputs, params, cfg)
        acc = accuracy(logits, val_labels)
    return ProbeResult(acc, history, params)


def predict_classifier(inputs, params: dict, cfg: ProbeConfig, batch_size: int = 256) -> np.ndarray:
    p = as_params(params)
    x = _as_tokens(np.asarray(inputs))
    outs = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            chunk = T.Tensor(x[i:i + batch_size])
            out = linear_head(chunk, p) if cfg.kind == "linear" else attentive_head(chunk, p, cfg.heads)
            outs.append(out.data)
    return np.concatenate(outs) if outs else np.zeros((0, params["head.b"].shape[0]), np.float32)


def _as_tokens(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return x[:, None, :] if x.ndim == 2 else x


# -- image-level probes --------------------------------------------------------------

def augment_images(images: np.ndarray, indices: np.ndarray, seed: int, epoch: int, policy: str,
                   crop_scale=(0.08, 1.0), preset: str = "default", stream: int = 0) -> np.ndarray:
    """Training-time views for probes: crop+flip, optionally followed by
    source-style jitter and destructive transforms."""
    if policy == "none":
        return images[indices]
    aug = get_preset(preset)
    out = []
    for i in indices:
        rng = key_rng((seed, epoch, stream, int(i), 17))
        img = images[i].astype(np.float64)
        crop = sample_crop_flip(rng, img.shape[1:], crop_scale)
        x = random_resized_crop_flip(img, crop, img.shape[1:])
        if policy == "full":
            jit = sample_jitter(rng, aug.strengths, aug.p_jitter)
            x = apply_destructive(apply_jitter(x, jit), sample_destructive(rng, aug))
        out.append(x)
    return np.stack(out).astype(np.float32)


def _encode_frozen(images: np.ndarray, encoder: dict, cfg: ViTConfig, batch_size: int = 64) -> np.ndarray:
    p = as_params(encoder)
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(encode(images[i:i + batch_size], p, cfg).data)
    return np.concatenate(outs)


def probe(encoder: dict[str, np.ndarray], enc_cfg: ViTConfig, dataset: Dataset,
          cfg: ProbeConfig) -> ProbeResult:
    """Train a probe on the frozen ``encoder`` and report held-out top-1 accuracy."""
    before = weights_hash(encoder)
    train_x, train_y = dataset.split("train")
    val_x, val_y = dataset.split("val")
    if cfg.probe_aug == "none":
        cached = _encode_frozen(train_x, encoder, enc_cfg)
        feats = (lambda idx, epoch: cached[idx])
    else:
        def feats(idx, epoch):
            views = augment_images(train_x, idx, cfg.seed, epoch, cfg.probe_aug, cfg.crop_scale, cfg.preset)
            return _encode_frozen(views, encoder, enc_cfg)
    result = train_classifier(feats, train_y, dataset.num_classes, cfg,
                              _encode_frozen(val_x, encoder, enc_cfg), val_y)
    if weights_hash(encoder) != before:
        raise RuntimeError("probe training modified the frozen encoder")
    return result


def linear_probe(encoder, enc_cfg: ViTConfig, dataset: Dataset, cfg: ProbeConfig | None = None) -> ProbeResult:
    cfg = cfg or ProbeConfig()
    if cfg.kind != "linear":
        cfg = ProbeConfig(**{**asdict(cfg), "kind": "linear"})
    return probe(encoder, enc_cfg, dataset, cfg)


def attentive_probe(encoder, enc_cfg: ViTConfig, dataset: Dataset, cfg: ProbeConfig | None = None) -> ProbeResult:
    cfg = cfg or ProbeConfig(kind="attentive", crop_scale=(0.3, 1.0))
    if cfg.kind != "attentive":
        cfg = ProbeConfig(**{**asdict(cfg), "kind": "attentive"})
    return probe(encoder, enc_cfg, dataset, cfg)


# -- predictor finetuning ------------------------------------------------------------

def _task_actions(n: int, null: bool, preset: str, seed: int, epoch: int, stream: int, action_dim: int):
    if null:
        return np.zeros((n, action_dim), np.float32)
    aug = get_preset(preset)
    rng = key_rng((seed, epoch, stream, 23))
    acts = [encode_action(SourceParams(), sample_jitter(rng, aug.strengths, 1.0)) for _ in range(n)]
    return np.stack(acts).astype(np.float32)


def _split_sizes(batch_size: int, k: int) -> list[int]:
    base, extra = divmod(batch_size, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def _cycle_batches(n: int, size: int, seed: int, stream: int):
    """Endless shuffled passes over ``range(n)`` in fixed-size chunks; yields (pass, indices)."""
    size = min(size, n)
    pas = 0
    while True:
        order = _epoch_order(n, seed, pas, stream)
        for b in range(max(1, n // size)):
            yield pas, order[b * size:(b + 1) * size]
        pas += 1


def _predictor_forward(tokens: T.Tensor, action, pp: dict, pcfg: PredictorConfig, task: PredictionTaskConfig,
                       task_token: T.Tensor | None, record: list | None = None) -> T.Tensor:
    b, g, _ = tokens.shape
    pos = np.tile(np.arange(g), (b, 1))
    extra = None
    if task_token is not None:
        d = task_token.shape[-1]
        extra = [T.broadcast_to(T.reshape(task_token, (1, 1, d)), (b, 1, d))]
    return predict(tokens, pos, pos, action, pp, pcfg, extra_tokens=extra,
                   aggregate=task.single_token, record=record)


def tune_predictor(model, tasks: list[TaskSpec], cfg: FinetuneConfig | None = None,
                   task: PredictionTaskConfig | None = None, task_tokens: bool | None = None) -> FinetuneResult:
    """Shared loop behind predictor finetuning and multitask tuning.

    Each step draws an evenly split batch across ``tasks``; every sub-batch
    goes through the frozen encoder and the shared predictor (with its task
    token appended when ``task_tokens``) into that task's attentive head; the
    weighted cross-entropies are summed.
    """
    cfg = cfg or FinetuneConfig()
    task = task or PredictionTaskConfig()
    if not tasks:
        raise ValueError("need at least one task")
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"task id collision in {ids}")
    k = len(tasks)
    use_tokens = k > 1 if task_tokens is None else task_tokens
    if cfg.batch_size < k:
        raise ValueError("batch size smaller than the number of tasks")

    enc_cfg: ViTConfig = model.encoder_cfg
    pcfg: PredictorConfig = model.predictor_cfg
    encoder = model.teacher if task.use_teacher else model.student
    enc_hash = weights_hash(encoder)
    enc_params = as_params(encoder)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    if task.pretrained_predictor:
        predictor = {kk: v.copy() for kk, v in model.predictor.items()}
    else:
        predictor = init_predictor(pcfg, enc_cfg.dim, enc_cfg.num_patches, rng)
    n_out = 1 if task.single_token else enc_cfg.num_patches
    params = {f"predictor.{kk}": v for kk, v in predictor.items()}
    for t in tasks:
        for kk, v in init_attentive_head(enc_cfg.dim, t.n_classes, rng, n_out).items():
            params[f"head.{t.task_id}.{kk}"] = v
        # task tokens exist for every task; they only enter the predictor when enabled
        params[f"token.{t.task_id}"] = _normal(rng, (1, pcfg.dim))
    lr_scale = {}
    if task.pretrained_predictor:
        lr_scale = {name: 1.0 / task.lr_divisor for name in params if name.startswith("predictor.")}

    sizes = _split_sizes(cfg.batch_size, k)
    train_sets = [t.dataset.split("train") for t in tasks]
    if cfg.steps is not None:
        total = int(cfg.steps)
    else:
        total = cfg.epochs * _steps_per_epoch(len(train_sets[0][1]), cfg.batch_size)
    spe = max(1, total // max(1, cfg.epochs))
    streams = [_cycle_batches(len(y), s, cfg.seed, i) for i, ((_, y), s) in enumerate(zip(train_sets, sizes))]
    record: list = []
    token_counts: list[int] = []

    def batches():
        while True:
            yield [next(s) for s in streams]

    def loss_fn(tp, batch):
        pp = {kk[len("predictor."):]: v for kk, v in tp.items() if kk.startswith("predictor.")}
        total_loss = None
        for ti, (t, (pas, idx)) in enumerate(zip(tasks, batch)):
            x, y = train_sets[ti]
            views = augment_images(x, idx, cfg.seed, pas, cfg.probe_aug, cfg.crop_scale, cfg.preset, stream=ti)
            with T.no_grad():
                z = encode(views, enc_params, enc_cfg)
            action = _task_actions(len(idx), task.null_latents, cfg.preset, cfg.seed, pas * 100003 + int(idx[0]),
                                   ti, pcfg.action_dim)
            record.clear()
            out = _predictor_forward(z, action, pp, pcfg, task, tp[f"token.{t.task_id}"] if use_tokens else None,
                                     record)
            if not token_counts:
                token_counts.append(record[0].shape[-1])
            hp = {kk[len(f"head.{t.task_id}."):]: v for kk, v in tp.items() if kk.startswith(f"head.{t.task_id}.")}
            loss = T.cross_entropy(attentive_head(out, hp, cfg.head_heads), y[idx]) * t.weight
            total_loss = loss if total_loss is None else total_loss + loss
        return total_loss

    params, history = _fit(params, loss_fn, batches(), total, cfg.lr, cfg.weight_decay,
                           int(round(cfg.warmup_epochs * spe)), lr_scale)
    if weights_hash(encoder) != enc_hash:
        raise RuntimeError("predictor tuning modified the frozen encoder")

    accs = {}
    pp = as_params({kk[len("predictor."):]: v for kk, v in params.items() if kk.startswith("predictor.")})
    for ti, t in enumerate(tasks):
        vx, vy = t.dataset.split("val")
        hp = as_params({kk[len(f"head.{t.task_id}."):]: v for kk, v in params.items()
                        if kk.startswith(f"head.{t.task_id}.")})
        token = as_params({"t": params[f"token.{t.task_id}"]})["t"] if use_tokens else None
        logits = []
        with T.no_grad():
            for i in range(0, len(vx), 64):
                chunk = vx[i:i + 64]
                z = encode(chunk, enc_params, enc_cfg)
                action = _task_actions(len(chunk), task.null_latents, cfg.preset, cfg.seed + 1, i, ti,
                                       pcfg.action_dim)
                out = _predictor_forward(z, action, pp, pcfg, task, token)
                logits.append(attentive_head(out, hp, cfg.head_heads).data)
        accs[t.task_id] = accuracy(np.concatenate(logits), vy) if logits else float("nan")
    return FinetuneResult(accs, total, {t.task_id: s * total for t, s in zip(tasks, sizes)},
                          token_counts[0] if token_counts else 0, enc_hash, history)


def predictor_finetune(model, dataset: Dataset, task: PredictionTaskConfig | None = None,
                       cfg: FinetuneConfig | None = None) -> FinetuneResult:
    return tune_predictor(model, [TaskSpec("task", dataset)], cfg, task, task_tokens=False)


def multitask_finetune(model, tasks: list[TaskSpec], cfg: FinetuneConfig | None = None,
                       task: PredictionTaskConfig | None = None) -> FinetuneResult:
    if len(tasks) < 2:
        # a lone task keeps its token out of the predictor, so it behaves as plain finetuning
        return tune_predictor(model, tasks, cfg, task, task_tokens=False)
    return tune_predictor(model, tasks, cfg, task, task_tokens=True)


def single_task_baselines(model, tasks: list[TaskSpec], cfg: FinetuneConfig,
                          task: PredictionTaskConfig | None = None) -> dict[str, FinetuneResult]:
    """One finetuning run per task with the same seed, schedule and total
    iteration count as the multitask run (each using the full batch)."""
    if cfg.steps is None:
        raise ValueError("matched baselines need an explicit iteration count (cfg.steps)")
    return {t.task_id: predictor_finetune(model, t.dataset, task, cfg) for t in tasks}


def ablation_grid(model, dataset: Dataset, cfg: FinetuneConfig, pretrained: bool = True,
                  lr_divisor: float = 10.0) -> list[dict]:
    """All eight (null latents, teacher, single token) combinations."""
    rows = []
    for null in (False, True):
        for teacher in (False, True):
            for one in (False, True):
                tcfg = PredictionTaskConfig(teacher, null, one, pretrained, lr_divisor)
                res = predictor_finetune(model, dataset, tcfg, cfg)
                rows.append({"null_latents": int(null), "on_teacher": int(teacher),
                             "one_token": int(one), "accuracy": res.accuracy["task"],
                             "predictor_tokens": res.predictor_tokens})
    return rows
