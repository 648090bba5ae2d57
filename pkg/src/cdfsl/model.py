"""Tiny spatio-temporal transformer: tube tokenizer, encoder, MAE decoder, head.

Clips are ``[T, C, H, W]`` (or batched ``[B, T, C, H, W]``) float arrays. Every
forward function accepts a batch; single-clip calls are promoted and squeezed.
Parameter names follow ``blocks.{i}.attn.q.weight`` style; anything under
``decoder.`` is used only by :func:`mae_forward`, anything under ``head.`` only
by :func:`classify`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConsistencyError, DimensionError, ValidationError
from .params import ModelParams
from .tensor import Tensor

LN_EPS = 1e-6


@dataclass(frozen=True)
class ClipSpec:
    frames: int = 8
    channels: int = 3
    height: int = 16
    width: int = 16
    patch_t: int = 2
    patch_h: int = 4
    patch_w: int = 4
    # fixed input standardization applied before the patch projection
    pixel_mean: float = 0.1
    pixel_std: float = 0.25

    def __post_init__(self):
        for name in ("frames", "channels", "height", "width", "patch_t", "patch_h", "patch_w"):
            if getattr(self, name) < 1:
                raise ValidationError(f"ClipSpec.{name} must be positive")
        if self.frames % self.patch_t or self.height % self.patch_h or self.width % self.patch_w:
            raise ValidationError("clip dimensions must be divisible by the patch size")
        if not self.pixel_std > 0:
            raise ValidationError("ClipSpec.pixel_std must be positive")
        if self.token_count < 4:
            raise ValidationError(f"ClipSpec yields {self.token_count} tokens, need at least 4")

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.frames // self.patch_t, self.height // self.patch_h, self.width // self.patch_w)

    @property
    def token_count(self) -> int:
        gt, gh, gw = self.grid
        return gt * gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_t * self.patch_h * self.patch_w * self.channels

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.channels, self.height, self.width)


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    decoder_dim: int = 16
    decoder_depth: int = 1

    def __post_init__(self):
        if self.embed_dim < 2 or self.decoder_dim < 2:
            raise ValidationError("embedding widths must be at least 2")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ValidationError("embed_dim must be divisible by heads")
        if self.depth < 1 or self.decoder_depth < 1:
            raise ValidationError("depth and decoder_depth must be at least 1")
        if self.mlp_ratio <= 0:
            raise ValidationError("mlp_ratio must be positive")

    @property
    def decoder_heads(self) -> int:
        return self.heads if self.decoder_dim % self.heads == 0 else 1


@dataclass(frozen=True)
class ModelConfig:
    clip: ClipSpec = field(default_factory=ClipSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def to_dict(self) -> dict:
        return {"clip": asdict(self.clip), "encoder": asdict(self.encoder)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(ClipSpec(**d.get("clip", {})), EncoderConfig(**d.get("encoder", {})))


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskPlan:
    """Boolean ``mask`` over tokens; True marks a token hidden from the encoder."""

    mask: np.ndarray
    mask_ratio: float

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValidationError("mask_ratio must lie in (0, 1)")
        expected = masked_count(self.mask.size, self.mask_ratio)
        if int(self.mask.sum()) != expected:
            raise ValidationError(
                f"mask hides {int(self.mask.sum())} tokens, ratio {self.mask_ratio} requires {expected}"
            )

    @property
    def keep_index(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    @property
    def mask_index(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


def masked_count(token_count: int, mask_ratio: float) -> int:
    # round half up; Python's round() would bank toward even
    return int(math.floor(mask_ratio * token_count + 0.5))


def sample_mask(token_count: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Tube mask: whole spatio-temporal patches hidden uniformly at random."""
    n = masked_count(token_count, mask_ratio)
    if n < 1 or n >= token_count:
        raise ValidationError(
            f"mask ratio {mask_ratio} hides {n} of {token_count} tokens; need at least one of each"
        )
    mask = np.zeros(token_count, dtype=bool)
    mask[rng.permutation(token_count)[:n]] = True
    return MaskPlan(mask, mask_ratio)


# ---------------------------------------------------------------------------
# initialization


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def _block_params(prefix: str, dim: int, hidden: int, rng) -> dict[str, np.ndarray]:
    p = {}
    p[f"{prefix}.norm1.gain"] = np.ones(dim)
    p[f"{prefix}.norm1.bias"] = np.zeros(dim)
    for proj in ("q", "k", "v", "proj"):
        p[f"{prefix}.attn.{proj}.weight"] = trunc_normal(rng, (dim, dim))
        p[f"{prefix}.attn.{proj}.bias"] = np.zeros(dim)
    p[f"{prefix}.norm2.gain"] = np.ones(dim)
    p[f"{prefix}.norm2.bias"] = np.zeros(dim)
    p[f"{prefix}.mlp.fc1.weight"] = trunc_normal(rng, (dim, hidden))
    p[f"{prefix}.mlp.fc1.bias"] = np.zeros(hidden)
    p[f"{prefix}.mlp.fc2.weight"] = trunc_normal(rng, (hidden, dim))
    p[f"{prefix}.mlp.fc2.bias"] = np.zeros(dim)
    return p


def init_encoder(cfg: ModelConfig, rng: np.random.Generator, decoder: bool = True) -> ModelParams:
    spec, enc = cfg.clip, cfg.encoder
    d, L = enc.embed_dim, spec.token_count
    arrays = {
        "patch_embed.weight": trunc_normal(rng, (spec.patch_dim, d)),
        "patch_embed.bias": np.zeros(d),
        "pos_embed": trunc_normal(rng, (L, d)),
    }
    hidden = int(round(d * enc.mlp_ratio))
    for i in range(enc.depth):
        arrays.update(_block_params(f"blocks.{i}", d, hidden, rng))
    arrays["norm.gain"] = np.ones(d)
    arrays["norm.bias"] = np.zeros(d)
    if decoder:
        dd = enc.decoder_dim
        dhidden = int(round(dd * enc.mlp_ratio))
        arrays["decoder.embed.weight"] = trunc_normal(rng, (d, dd))
        arrays["decoder.embed.bias"] = np.zeros(dd)
        arrays["decoder.mask_token"] = trunc_normal(rng, (dd,))
        arrays["decoder.pos_embed"] = trunc_normal(rng, (L, dd))
        for i in range(enc.decoder_depth):
            arrays.update(_block_params(f"decoder.blocks.{i}", dd, dhidden, rng))
        arrays["decoder.norm.gain"] = np.ones(dd)
        arrays["decoder.norm.bias"] = np.zeros(dd)
        arrays["decoder.pred.weight"] = trunc_normal(rng, (dd, spec.patch_dim))
        arrays["decoder.pred.bias"] = np.zeros(spec.patch_dim)
    return ModelParams.from_arrays(arrays)


def init_head(embed_dim: int, n_classes: int, rng: np.random.Generator) -> ModelParams:
    return ModelParams.from_arrays(
        {"head.weight": trunc_normal(rng, (embed_dim, n_classes)), "head.bias": np.zeros(n_classes)}
    )


# ---------------------------------------------------------------------------
# forward pieces


def _as_batch(clips: np.ndarray, spec: ClipSpec) -> tuple[np.ndarray, bool]:
    clips = np.asarray(clips, dtype=np.float64)
    single = clips.ndim == 4
    if single:
        clips = clips[None]
    if clips.ndim != 5 or clips.shape[1:] != spec.clip_shape:
        raise ValidationError(f"clip shape {clips.shape} does not match spec {spec.clip_shape}")
    return clips, single


def patchify(clips: np.ndarray, spec: ClipSpec) -> np.ndarray:
    """``[B, T, C, H, W] -> [B, L, patch_dim]``; tokens ordered (t, h, w) row-major."""
    clips, single = _as_batch(clips, spec)
    b = clips.shape[0]
    gt, gh, gw = spec.grid
    x = clips.reshape(b, gt, spec.patch_t, spec.channels, gh, spec.patch_h, gw, spec.patch_w)
    x = x.transpose(0, 1, 4, 6, 2, 5, 7, 3).reshape(b, gt * gh * gw, spec.patch_dim)
    x = np.ascontiguousarray(x)
    return x[0] if single else x


def normalized_patches(clips: np.ndarray, spec: ClipSpec, eps: float = 1e-6) -> np.ndarray:
    """Per-patch standardized pixels, the reconstruction target."""
    p = patchify(clips, spec)
    mu = p.mean(axis=-1, keepdims=True)
    var = p.var(axis=-1, keepdims=True)
    return (p - mu) / np.sqrt(var + eps)


def standardize(clips: np.ndarray, spec: ClipSpec) -> np.ndarray:
    """Map [0, 1] pixels to the encoder's input scale."""
    return (np.asarray(clips, dtype=np.float64) - spec.pixel_mean) / spec.pixel_std


def tokenize(clip: np.ndarray, spec: ClipSpec, params: ModelParams) -> Tensor:
    """Linear tube-patch embedding plus positional embedding: ``[.., L, D]``."""
    patches = patchify(clip, spec)
    x = T.linear(T.as_tensor(patches), params["patch_embed.weight"], params["patch_embed.bias"])
    return x + params["pos_embed"]


def _attention(x: Tensor, params: ModelParams, prefix: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads

    def split(name):
        y = T.linear(x, params[f"{prefix}.{name}.weight"], params[f"{prefix}.{name}.bias"])
        return T.transpose(T.reshape(y, (b, n, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = T.softmax(scores)
    out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    return T.linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def _block(x: Tensor, params: ModelParams, prefix: str, heads: int) -> Tensor:
    h = T.layer_norm(x, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"], LN_EPS)
    x = x + _attention(h, params, f"{prefix}.attn", heads)
    h = T.layer_norm(x, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"], LN_EPS)
    h = T.gelu(T.linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    return x + T.linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])


def _keep_index(plans, batch: int) -> np.ndarray:
    if isinstance(plans, MaskPlan):
        plans = [plans] * batch
    if len(plans) != batch:
        raise ValidationError(f"{len(plans)} mask plans for a batch of {batch}")
    idx = [p.keep_index for p in plans]
    if len({len(i) for i in idx}) != 1:
        raise ValidationError("all mask plans in a batch must keep the same number of tokens")
    return np.stack(idx)


def encode(
    tokens: Tensor,
    params: ModelParams,
    cfg: EncoderConfig,
    keep_mask: MaskPlan | list[MaskPlan] | None = None,
) -> tuple[Tensor, Tensor]:
    """Run the encoder; with a mask plan only visible tokens enter.

    Returns ``(features [.., L_keep, D], pooled [.., D])``.
    """
    single = tokens.ndim == 2
    x = T.reshape(tokens, (1, *tokens.shape)) if single else tokens
    if keep_mask is not None:
        x = T.gather_rows(x, _keep_index(keep_mask, x.shape[0]))
    if x.shape[1] == 0:
        raise ValidationError("encoder received zero tokens")
    for i in range(cfg.depth):
        x = _block(x, params, f"blocks.{i}", cfg.heads)
    x = T.layer_norm(x, params["norm.gain"], params["norm.bias"], LN_EPS)
    pooled = T.mean(x, axis=1)
    if single:
        return T.reshape(x, x.shape[1:]), T.reshape(pooled, pooled.shape[1:])
    return x, pooled


def mae_loss(pred_masked: Tensor, target_masked: np.ndarray) -> Tensor:
    """Mean squared error over masked patches only."""
    if pred_masked.shape != np.shape(target_masked):
        raise DimensionError(f"prediction {pred_masked.shape} vs target {np.shape(target_masked)}")
    return T.mse(pred_masked, target_masked)


def mae_forward(
    clip: np.ndarray,
    spec: ClipSpec,
    params: ModelParams,
    cfg: EncoderConfig,
    plan: MaskPlan | list[MaskPlan],
    target_clip: np.ndarray | None = None,
) -> Tensor:
    """Masked reconstruction loss for one clip or a batch.

    ``target_clip`` defaults to ``clip``; it exists so tests can perturb the
    target independently of the encoder input.
    """
    clips, _ = _as_batch(clip, spec)
    b, L = clips.shape[0], spec.token_count
    plans = [plan] * b if isinstance(plan, MaskPlan) else list(plan)
    for p in plans:
        if p.mask.size != L:
            raise ValidationError(f"mask plan covers {p.mask.size} tokens, clip has {L}")
        n_masked = int(p.mask.sum())
        if n_masked == 0 or n_masked == L:
            raise ValidationError("mask plan must hide at least one and keep at least one token")
    keep = _keep_index(plans, b)
    hidden = np.stack([p.mask_index for p in plans])

    tokens = tokenize(standardize(clips, spec), spec, params)
    feats, _ = encode(tokens, params, cfg, plans)

    dd = cfg.decoder_dim
    vis = T.linear(feats, params["decoder.embed.weight"], params["decoder.embed.bias"])
    fill = T.broadcast_to(params["decoder.mask_token"], (b, hidden.shape[1], dd))
    full = T.concat([vis, fill], axis=1)
    restore = np.argsort(np.concatenate([keep, hidden], axis=1), axis=1, kind="stable")
    x = T.gather_rows(full, restore) + params["decoder.pos_embed"]
    for i in range(cfg.decoder_depth):
        x = _block(x, params, f"decoder.blocks.{i}", cfg.decoder_heads)
    x = T.layer_norm(x, params["decoder.norm.gain"], params["decoder.norm.bias"], LN_EPS)
    pred = T.linear(T.gather_rows(x, hidden), params["decoder.pred.weight"], params["decoder.pred.bias"])

    target = normalized_patches(clips if target_clip is None else target_clip, spec)
    if target.ndim == 2:
        target = target[None]
    target_masked = target[np.arange(b)[:, None], hidden]
    return mae_loss(pred, target_masked)


def classify(pooled: Tensor, params: ModelParams, n_classes: int | None = None) -> Tensor:
    """Affine head over pooled features; returns logits (no softmax)."""
    w, bias = params["head.weight"], params["head.bias"]
    if w.shape[0] != pooled.shape[-1]:
        raise ConsistencyError(f"head expects {w.shape[0]}-d features, got {pooled.shape[-1]}")
    if n_classes is not None and w.shape[1] != n_classes:
        raise ConsistencyError(f"head width {w.shape[1]} does not match {n_classes} source classes")
    if pooled.ndim == 1:
        return T.reshape(T.linear(T.reshape(pooled, (1, -1)), w, bias), (w.shape[1],))
    return T.linear(pooled, w, bias)


def forward_logits(clips: np.ndarray, cfg: ModelConfig, params: ModelParams) -> Tensor:
    tokens = tokenize(standardize(clips, cfg.clip), cfg.clip, params)
    _, pooled = encode(tokens, params, cfg.encoder)
    return classify(pooled, params)


def pooled_features(clips: np.ndarray, cfg: ModelConfig, params: ModelParams) -> Tensor:
    tokens = tokenize(standardize(clips, cfg.clip), cfg.clip, params)
    return encode(tokens, params, cfg.encoder)[1]
