"""World-model quality: mean reciprocal rank over banks of augmented targets,
nearest-neighbour retrieval, invariance by marginalisation and similarity
matrices."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import (AugPreset, IDENTITY_JITTER, JitterParams, SourceParams, apply_jitter,
                      encode_action, get_preset, key_rng, sample_jitter, sample_view_pair)
from .vit import PredictorConfig, ViTConfig, as_params, encode, encode_numpy, predict


@dataclass
class Model:
    """Read-only snapshot of a trained IWM."""
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    predictor: dict[str, np.ndarray]
    encoder_cfg: ViTConfig
    predictor_cfg: PredictorConfig

    @classmethod
    def from_state(cls, state, cfg) -> "Model":
        return cls(state.student, state.teacher, state.predictor, cfg.encoder, cfg.predictor)


@dataclass
class TargetBank:
    images: np.ndarray  # (n, 3, H, W)
    params: list[JitterParams]
    tokens: np.ndarray  # (n, G, d) teacher representations
    includes_clean: bool = False

    @property
    def pooled(self) -> np.ndarray:
        return self.tokens.mean(axis=1)

    def __len__(self):
        return len(self.params)


def build_bank(image: np.ndarray, n: int, preset: AugPreset, model: Model, seed: int = 0,
               include_clean: bool = False) -> TargetBank:
    """``n`` photometric variants of one image, encoded by the teacher.

    Jitter is always applied to bank entries (so no two entries coincide);
    with ``include_clean`` entry 0 is the unmodified image.
    """
    if n < 2:
        raise ValueError("bank needs at least two entries")
    rng = key_rng((seed, 31337))
    params = []
    for i in range(n):
        if include_clean and i == 0:
            params.append(IDENTITY_JITTER)
        else:
            params.append(sample_jitter(rng, preset.strengths, 1.0))
    base = image.astype(np.float64)
    images = np.stack([apply_jitter(base, p) for p in params]).astype(np.float32)
    tokens = encode_numpy(images, model.teacher, model.encoder_cfg)
    return TargetBank(images, params, tokens, include_clean)


def actions_for(params: list[JitterParams]) -> np.ndarray:
    """Actions taking the clean image to each listed target jitter."""
    clean = SourceParams()
    return np.stack([encode_action(clean, p) for p in params]).astype(np.float32)


def predict_from_clean(image: np.ndarray, actions: np.ndarray, model: Model,
                       batch_size: int = 64) -> np.ndarray:
    """Student encodes the clean image (no masking); the predictor applies each
    action to produce the full grid of target tokens. Returns (N, G, d)."""
    g = model.encoder_cfg.num_patches
    with T.no_grad():
        z = encode(image[None].astype(np.float32), as_params(model.student), model.encoder_cfg).data
        pp = as_params(model.predictor)
        outs = []
        for i in range(0, len(actions), batch_size):
            a = actions[i:i + batch_size]
            b = len(a)
            pos = np.tile(np.arange(g), (b, 1))
            ctx = T.Tensor(np.repeat(z, b, axis=0))
            outs.append(predict(ctx, pos, pos, a, pp, model.predictor_cfg).data)
    return np.concatenate(outs, axis=0)


def predict_into_bank(clean: np.ndarray, bank: TargetBank, model: Model) -> np.ndarray:
    return predict_from_clean(clean, actions_for(bank.params), model)


def distances(query: np.ndarray, bank: np.ndarray, metric: str = "pooled") -> np.ndarray:
    """Distances from one query to every bank entry.

    ``pooled``: Euclidean between mean-pooled vectors (inputs (d,) / (n, d) or
    token grids, which are pooled first). ``tokens``: sum over positions of the
    per-token Euclidean distance (inputs (G, d) / (n, G, d)).
    """
    query = np.asarray(query, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    if metric == "pooled":
        if query.ndim == 2:
            query = query.mean(axis=0)
        if bank.ndim == 3:
            bank = bank.mean(axis=1)
        return np.sqrt(((bank - query) ** 2).sum(axis=-1))
    if metric == "tokens":
        return np.sqrt(((bank - query[None]) ** 2).sum(axis=-1)).sum(axis=-1)
    raise ValueError(f"unknown distance metric {metric!r}")


def rank_of(dist: np.ndarray, truth: int) -> int:
    """1-based rank of ``truth``; ties go to the lower bank index."""
    d = dist[truth]
    return int(1 + np.sum(dist < d) + np.sum(dist[:truth] == d))


def retrieve_nn(query: np.ndarray, bank: np.ndarray, k: int, metric: str = "pooled") -> np.ndarray:
    """Indices of the ``k`` nearest bank entries, ascending distance, ties by index."""
    dist = distances(query, bank, metric)
    if not 1 <= k <= len(dist):
        raise ValueError(f"k must lie in [1, {len(dist)}]")
    return np.lexsort((np.arange(len(dist)), dist))[:k]


def reciprocal_ranks(predictions: np.ndarray, bank: np.ndarray, truths, metric: str = "pooled") -> np.ndarray:
    return np.array([1.0 / rank_of(distances(p, bank, metric), int(t))
                     for p, t in zip(predictions, truths)])


def mrr_from_predictions(predictions: np.ndarray, bank: np.ndarray, truths=None,
                         metric: str = "pooled") -> float:
    if truths is None:
        truths = np.arange(len(predictions))
    return float(reciprocal_ranks(predictions, bank, truths, metric).mean())


def mrr(model: Model, images: np.ndarray, n: int = 256, preset: AugPreset | str = "default",
        seed: int = 0, metric: str = "pooled", details: bool = False):
    """Mean reciprocal rank of the true target among ``n`` augmented candidates,
    averaged over every (image, bank entry) pair."""
    if isinstance(preset, str):
        preset = get_preset(preset)
    per_image = []
    for i, img in enumerate(images):
        bank = build_bank(img, n, preset, model, seed=seed * 100003 + i)
        preds = predict_into_bank(img, bank, model)
        pq = preds if metric == "tokens" else preds.mean(axis=1)
        bq = bank.tokens if metric == "tokens" else bank.pooled
        per_image.append(mrr_from_predictions(pq, bq, metric=metric))
    value = float(np.mean(per_image))
    if details:
        return value, per_image
    return value


def marginalize_invariant(z_x, actions: np.ndarray, model: Model, batch_size: int = 64) -> np.ndarray:
    """Average of predictor outputs over a set of actions, for a clean context
    ``z_x`` of shape (G, d)."""
    z = np.asarray(z_x.data if isinstance(z_x, T.Tensor) else z_x, dtype=np.float32)
    actions = np.asarray(actions, dtype=np.float32)
    if len(actions) < 1:
        raise ValueError("need at least one action")
    g = z.shape[0]
    total = None
    with T.no_grad():
        pp = as_params(model.predictor)
        for i in range(0, len(actions), batch_size):
            a = actions[i:i + batch_size]
            b = len(a)
            pos = np.tile(np.arange(g), (b, 1))
            out = predict(T.Tensor(np.repeat(z[None], b, axis=0)), pos, pos, a, pp, model.predictor_cfg).data
            s = out.sum(axis=0, dtype=np.float64)
            total = s if total is None else total + s
    if len(actions) == 1:
        return out[0]
    return (total / len(actions)).astype(np.float32)


def encode_clean(image: np.ndarray, model: Model) -> np.ndarray:
    with T.no_grad():
        return encode(image[None].astype(np.float32), as_params(model.student), model.encoder_cfg).data[0]


def sample_actions(n: int, preset: AugPreset, seed: int) -> tuple[list[JitterParams], np.ndarray]:
    rng = key_rng((seed, 4242))
    params = [sample_jitter(rng, preset.strengths, 1.0) for _ in range(n)]
    return params, actions_for(params)


def marginal_retrieval(model: Model, images: np.ndarray, n_actions: int = 64, bank_size: int = 256,
                       preset: AugPreset | str = "default", seed: int = 0, trials: int | None = None) -> dict:
    """For each trial: bank with the clean image at entry 0, invariant code from
    ``n_actions`` predictions; records whether entry 0 is the nearest neighbour.

    ``centroid_hit_rate`` repeats the lookup with the mean teacher embedding of
    the augmented entries, i.e. the code a perfect world model would average to.
    """
    if isinstance(preset, str):
        preset = get_preset(preset)
    trials = trials or len(images)
    hits, top5, centroid_hits = [], [], []
    for t in range(trials):
        img = images[t % len(images)]
        tseed = seed * 7919 + t
        bank = build_bank(img, bank_size, preset, model, seed=tseed, include_clean=True)
        _, acts = sample_actions(n_actions, preset, tseed)
        z_inv = marginalize_invariant(encode_clean(img, model), acts, model)
        order = retrieve_nn(z_inv, bank.pooled, min(5, bank_size))
        hits.append(int(order[0] == 0))
        top5.append([int(i) for i in order])
        centroid_hits.append(int(retrieve_nn(bank.pooled[1:].mean(axis=0), bank.pooled, 1)[0] == 0))
    return {"trials": trials, "hit_rate": float(np.mean(hits)), "hits": hits, "top5": top5,
            "centroid_hit_rate": float(np.mean(centroid_hits))}


def similarity_matrix(images: np.ndarray, views: int, encoder: dict[str, np.ndarray], cfg: ViTConfig,
                      preset: AugPreset | str = "default", seed: int = 0) -> np.ndarray:
    """Cosine similarity between mean-pooled embeddings of ``views`` augmented
    (source-style, unmasked) views of every image; rows grouped by image."""
    if isinstance(preset, str):
        preset = get_preset(preset)
    if len(images) < 1 or views < 1:
        raise ValueError("need at least one image and one view")
    stack = []
    for i, img in enumerate(images):
        for v in range(views):
            pair = sample_view_pair(img.astype(np.float64), (seed, i, v), preset, cfg.patch_size)
            stack.append(pair.source)
    emb = encode_numpy(np.stack(stack).astype(np.float32), encoder, cfg).mean(axis=1).astype(np.float64)
    return cosine_matrix(emb)


def cosine_matrix(emb: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    unit = emb / np.where(norms > 0, norms, 1.0)
    sim = unit @ unit.T
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def block_means(sim: np.ndarray, views: int) -> dict:
    """Mean similarity within the per-image diagonal blocks and outside them."""
    m = sim.shape[0] // views
    owner = np.repeat(np.arange(m), views)
    same = owner[:, None] == owner[None, :]
    off_diag = ~np.eye(len(sim), dtype=bool)
    return {"within": float(sim[same & off_diag].mean()) if views > 1 else 1.0,
            "between": float(sim[~same].mean()) if m > 1 else float("nan")}


def equivariance_grid(models: dict, images: np.ndarray, n: int = 256, seed: int = 0,
                      bank_presets: dict | None = None) -> dict:
    """MRR for each (augmentation preset, predictor preset) cell.

    ``models`` maps (preset, predictor) -> Model or None; missing cells stay
    ``None`` (absent), never zero.
    """
    report = {}
    for (preset, pred_name), model in models.items():
        if model is None:
            report[(preset, pred_name)] = None
            continue
        bank_preset = (bank_presets or {}).get(preset, preset)
        report[(preset, pred_name)] = mrr(model, images, n, bank_preset, seed)
    return report


def write_grid_csv(report: dict, path, meta: dict | None = None) -> None:
    presets = list(dict.fromkeys(k[0] for k in report))
    preds = list(dict.fromkeys(k[1] for k in report))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["preset"] + preds)
        for p in presets:
            row = [p]
            for q in preds:
                v = report.get((p, q))
                row.append("" if v is None else f"{v:.6f}")
            w.writerow(row)
    if meta:
        Path(str(path) + ".meta.json").write_text(
            __import__("json").dumps(meta, indent=1, sort_keys=True) + "\n")
