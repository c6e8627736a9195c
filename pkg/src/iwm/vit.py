"""Tiny ViT encoder and the action-conditioned predictor (the world model).

Weights live in flat ``name -> ndarray`` dicts. Forward functions take the
same dicts with values wrapped as :class:`~iwm.tensor.Tensor` so the caller
decides what is trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor

CONDITIONING_MODES = ("none", "sequence", "feature")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 192
    depth: int = 6
    heads: int = 3
    mlp_ratio: float = 4.0
    pos_embed: str = "learned"  # or "sinusoidal"
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.pos_embed not in ("learned", "sinusoidal"):
            raise ValueError(f"unknown positional embedding {self.pos_embed!r}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


@dataclass(frozen=True)
class PredictorConfig:
    depth: int = 6
    dim: int = 192
    heads: int = 3
    mlp_ratio: float = 4.0
    conditioning: str = "feature"
    action_dim: int = 8
    action_tokens: int | None = None  # sequence mode; defaults to action_dim

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("predictor depth must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}")

    @property
    def n_action_tokens(self) -> int:
        return self.action_tokens or self.action_dim

    @property
    def name(self) -> str:
        return f"IWM_{{{self.depth},{self.dim}}}"


PREDICTOR_PRESETS = {
    "shallow": dict(depth=3, dim=96, heads=3),
    "deep": dict(depth=6, dim=192, heads=3),
}


def predictor_preset(name: str, **overrides) -> PredictorConfig:
    return PredictorConfig(**{**PREDICTOR_PRESETS[name], **overrides})


def config_dict(cfg) -> dict:
    return asdict(cfg)


# -- initialisation -------------------------------------------------------------

def _normal(rng, shape, std=0.02):
    return (rng.standard_normal(shape) * std).astype(np.float32)


def _he(rng, fan_in, fan_out):
    return (rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _init_blocks(rng, p, prefix, depth, dim, mlp_ratio):
    hidden = int(dim * mlp_ratio)
    for i in range(depth):
        b = f"{prefix}blocks.{i}."
        p[b + "ln1.g"] = np.ones(dim, np.float32)
        p[b + "ln1.b"] = np.zeros(dim, np.float32)
        p[b + "attn.qkv.w"] = _normal(rng, (dim, 3 * dim))
        p[b + "attn.qkv.b"] = np.zeros(3 * dim, np.float32)
        p[b + "attn.proj.w"] = _normal(rng, (dim, dim))
        p[b + "attn.proj.b"] = np.zeros(dim, np.float32)
        p[b + "ln2.g"] = np.ones(dim, np.float32)
        p[b + "ln2.b"] = np.zeros(dim, np.float32)
        p[b + "mlp.fc1.w"] = _normal(rng, (dim, hidden))
        p[b + "mlp.fc1.b"] = np.zeros(hidden, np.float32)
        p[b + "mlp.fc2.w"] = _normal(rng, (hidden, dim))
        p[b + "mlp.fc2.b"] = np.zeros(dim, np.float32)
    p[prefix + "norm.g"] = np.ones(dim, np.float32)
    p[prefix + "norm.b"] = np.zeros(dim, np.float32)


def init_encoder(cfg: ViTConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p = {
        "patch.w": _normal(rng, (cfg.patch_dim, cfg.dim)),
        "patch.b": np.zeros(cfg.dim, np.float32),
    }
    if cfg.pos_embed == "learned":
        p["pos"] = _normal(rng, (cfg.num_patches, cfg.dim))
    _init_blocks(rng, p, "", cfg.depth, cfg.dim, cfg.mlp_ratio)
    return p


def init_predictor(cfg: PredictorConfig, enc_dim: int, num_patches: int,
                   rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, k = cfg.dim, cfg.action_dim
    p = {}
    if d != enc_dim:
        p["in.w"] = _normal(rng, (enc_dim, d))
        p["in.b"] = np.zeros(d, np.float32)
    p["pos"] = _normal(rng, (num_patches, d))
    p["mask_token"] = _normal(rng, (d,))
    p["agg_token"] = _normal(rng, (d,))
    if cfg.conditioning in ("feature", "none"):
        fan_in = d + k if cfg.conditioning == "feature" else d
        p["cond.fc1.w"] = _he(rng, fan_in, d)
        p["cond.fc1.b"] = np.zeros(d, np.float32)
        p["cond.fc2.w"] = _he(rng, d, d)
        p["cond.fc2.b"] = np.zeros(d, np.float32)
        p["cond.fc3.w"] = _he(rng, d, d)
        p["cond.fc3.b"] = np.zeros(d, np.float32)
    else:
        n_a = cfg.n_action_tokens
        p["act.w"] = _normal(rng, (k, n_a * d), std=1.0 / np.sqrt(k))
        p["act.b"] = _normal(rng, (n_a * d,))
    _init_blocks(rng, p, "", cfg.depth, d, cfg.mlp_ratio)
    if d != enc_dim:
        p["out.w"] = _normal(rng, (d, enc_dim))
        p["out.b"] = np.zeros(enc_dim, np.float32)
    return p


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def predictor_param_count(cfg: PredictorConfig, enc_dim: int, num_patches: int) -> int:
    """Closed-form parameter count of :func:`init_predictor`."""
    d, k = cfg.dim, cfg.action_dim
    hidden = int(d * cfg.mlp_ratio)
    per_block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    n = cfg.depth * per_block + 2 * d
    n += num_patches * d + 2 * d
    if cfg.conditioning == "sequence":
        n += k * cfg.n_action_tokens * d + cfg.n_action_tokens * d
    else:
        fan_in = d + k if cfg.conditioning == "feature" else d
        n += fan_in * d + d + 2 * (d * d + d)
    if d != enc_dim:
        n += enc_dim * d + d + d * enc_dim + enc_dim
    return n


def as_params(arrays: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in arrays.items()}


# -- building blocks -----------------------------------------------------------------

def linear(x: Tensor, p: dict, prefix: str) -> Tensor:
    return x @ p[prefix + ".w"] + p[prefix + ".b"]


def norm(x: Tensor, p: dict, prefix: str, eps: float = 1e-6) -> Tensor:
    return T.layer_norm(x, -1, eps) * p[prefix + ".g"] + p[prefix + ".b"]


def attention(x: Tensor, p: dict, prefix: str, heads: int, record: list | None = None) -> Tensor:
    bsz, n, d = x.shape
    dh = d // heads
    qkv = linear(x, p, prefix + ".qkv").reshape(bsz, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = T.softmax((q @ T.swap_last(k)) * (1.0 / np.sqrt(dh)), axis=-1)
    if record is not None:
        record.append(attn.data)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(bsz, n, d)
    return linear(out, p, prefix + ".proj")


def transformer(x: Tensor, p: dict, depth: int, heads: int, eps: float = 1e-6,
                record: list | None = None) -> Tensor:
    for i in range(depth):
        b = f"blocks.{i}."
        x = x + attention(norm(x, p, b + "ln1", eps), p, b + "attn", heads, record)
        h = norm(x, p, b + "ln2", eps)
        x = x + linear(T.gelu(linear(h, p, b + "mlp.fc1")), p, b + "mlp.fc2")
    return norm(x, p, "norm", eps)


def sinusoidal_positions(num: int, dim: int) -> np.ndarray:
    pos = np.arange(num)[:, None]
    i = np.arange(dim // 2)[None]
    ang = pos / (10000 ** (2 * i / dim))
    out = np.zeros((num, dim), np.float32)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang[:, : dim - dim // 2])
    return out


# -- encoder ---------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, 3, H, W) -> (B, G, 3*P*P), row-major over the patch grid."""
    if images.ndim == 3:
        images = images[None]
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image size {(h, w)} not divisible by patch size {patch}")
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


def full_positions(batch: int, num_patches: int) -> np.ndarray:
    return np.tile(np.arange(num_patches), (batch, 1))


def patchify_embed(images: np.ndarray, positions: np.ndarray | None, p: dict, cfg: ViTConfig) -> Tensor:
    """Embed the patches at ``positions`` (B, K); ``None`` keeps the whole grid."""
    patches = patchify(np.asarray(images, dtype=np.float32), cfg.patch_size)
    bsz, n, _ = patches.shape
    if n != cfg.num_patches:
        raise ValueError(f"expected {cfg.num_patches} patches, got {n}")
    if positions is None:
        positions = full_positions(bsz, n)
    positions = np.asarray(positions, dtype=np.int64)
    rows = np.take_along_axis(patches, positions[:, :, None], axis=1)
    tokens = linear(Tensor(rows), p, "patch")
    if cfg.pos_embed == "learned":
        pos = T.gather_rows(p["pos"], positions)
    else:
        pos = Tensor(sinusoidal_positions(n, cfg.dim)[positions])
    return tokens + pos


def encode_tokens(tokens: Tensor, p: dict, cfg: ViTConfig, record: list | None = None) -> Tensor:
    if tokens.shape[-1] != cfg.dim:
        raise ValueError(f"token dim {tokens.shape[-1]} != encoder dim {cfg.dim}")
    return transformer(tokens, p, cfg.depth, cfg.heads, cfg.ln_eps, record)


def encode(images: np.ndarray, p: dict, cfg: ViTConfig, positions: np.ndarray | None = None,
           record: list | None = None) -> Tensor:
    return encode_tokens(patchify_embed(images, positions, p, cfg), p, cfg, record)


def encode_numpy(images: np.ndarray, arrays: dict[str, np.ndarray], cfg: ViTConfig,
                 batch_size: int = 64) -> np.ndarray:
    """Gradient-free encoding of a stack of images; returns (B, G, d)."""
    params = as_params(arrays)
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(encode(images[i:i + batch_size], params, cfg).data)
    return np.concatenate(outs, axis=0)


# -- predictor ---------------------------------------------------------------------

def _action_tensor(action, dtype) -> Tensor:
    if isinstance(action, Tensor):
        return action
    return Tensor(np.asarray(action, dtype=dtype))


def build_mask_tokens(positions: np.ndarray, action, p: dict, cfg: PredictorConfig,
                      aggregate: bool = False) -> Tensor:
    """Mask tokens for the requested target positions, mixed with the action.

    ``aggregate`` replaces the per-position tokens by a single learned query
    (no positional embedding).
    """
    positions = np.asarray(positions, dtype=np.int64)
    bsz = positions.shape[0]
    d = cfg.dim
    if aggregate:
        m = T.broadcast_to(T.reshape(p["agg_token"], (1, 1, d)), (bsz, 1, d))
    else:
        m = T.gather_rows(p["pos"], positions) + p["mask_token"]
    if cfg.conditioning == "sequence":
        return m
    n = m.shape[1]
    if cfg.conditioning == "feature":
        action = _action_tensor(action, m.dtype)
        if action.shape != (bsz, cfg.action_dim):
            raise ValueError(f"action must have shape {(bsz, cfg.action_dim)}, got {action.shape}")
        a = T.broadcast_to(T.reshape(action, (bsz, 1, cfg.action_dim)), (bsz, n, cfg.action_dim))
        m = T.concat([m, a], axis=-1)
    h = T.relu(linear(m, p, "cond.fc1"))
    h = T.relu(linear(h, p, "cond.fc2"))
    return linear(h, p, "cond.fc3")


def append_action_tokens(action, p: dict, cfg: PredictorConfig) -> Tensor:
    """One token per learned affine map of the action: token_j = a @ W_j + b_j."""
    action = _action_tensor(action, p["act.w"].dtype)
    bsz = action.shape[0]
    out = action @ p["act.w"] + p["act.b"]
    return out.reshape(bsz, cfg.n_action_tokens, cfg.dim)


def predict(context: Tensor, context_pos: np.ndarray, target_pos: np.ndarray, action,
            p: dict, cfg: PredictorConfig, extra_tokens: list[Tensor] | None = None,
            aggregate: bool = False, record: list | None = None, return_hidden: bool = False):
    """Predict target-view representations at ``target_pos`` from encoded context.

    ``context`` is (B, Kc, d_enc). Returns (B, Kt, d_enc), or (B, 1, d_enc)
    when ``aggregate`` is set. With ``return_hidden`` the predictor-width
    outputs before the output adapter are returned instead.
    """
    context_pos = np.asarray(context_pos, dtype=np.int64)
    target_pos = np.asarray(target_pos, dtype=np.int64)
    bsz, kc, _ = context.shape
    x = linear(context, p, "in") if "in.w" in p else context
    if x.shape[-1] != cfg.dim:
        raise ValueError(f"context dim {x.shape[-1]} does not match predictor dim {cfg.dim}")
    x = x + T.gather_rows(p["pos"], context_pos)
    masks = build_mask_tokens(target_pos, action, p, cfg, aggregate)
    parts = [x, masks]
    if cfg.conditioning == "sequence":
        parts.append(append_action_tokens(action, p, cfg))
    if extra_tokens:
        parts.extend(extra_tokens)
    seq = T.concat(parts, axis=1)
    out = transformer(seq, p, cfg.depth, cfg.heads, record=record)
    out = out[:, kc:kc + masks.shape[1]]
    if return_hidden:
        return out
    return linear(out, p, "out") if "out.w" in p else out


def predictor_token_count(num_context: int, num_targets: int, cfg: PredictorConfig,
                          aggregate: bool = False, extra: int = 0) -> int:
    n = num_context + (1 if aggregate else num_targets) + extra
    if cfg.conditioning == "sequence":
        n += cfg.n_action_tokens
    return n
