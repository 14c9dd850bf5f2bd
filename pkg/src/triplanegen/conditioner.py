"""Text-conditioned triplane decoder.

Three conditioning mechanisms feed a StyleGAN-like decoder: a token-to-plane
transformation produces the 8x8 base feature map from token embeddings, a
style-injection branch mixes projected token features with Gaussian noise into
a style vector consumed by AdaIN, and cross-attention layers fuse token
embeddings into the feature maps at each attention block.

The decoder runs ``stages`` upsampling stages from the 8x8 base map; the first
(up to) three stages interleave attention and convolution blocks, later stages
are convolution-only, and a final projection emits the three feature planes of
a triplane.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .triplane import Triplane

# stages beyond this index carry no attention blocks
ATTENTION_STAGES = 3


@dataclass
class TextCondition:
    """Token embeddings (T, D) plus a sentence-level embedding (D,)."""

    token_embeddings: np.ndarray
    sentence_embedding: np.ndarray

    def __post_init__(self):
        self.token_embeddings = np.asarray(self.token_embeddings, dtype=np.float32)
        self.sentence_embedding = np.asarray(self.sentence_embedding, dtype=np.float32)
        if self.token_embeddings.ndim != 2 or self.token_embeddings.shape[0] < 1:
            raise ValueError(f"token_embeddings must be (T>=1, D), got {self.token_embeddings.shape}")
        if not np.all(np.isfinite(self.token_embeddings)):
            raise ValueError("non-finite token embeddings")
        if np.linalg.norm(self.sentence_embedding) == 0.0:
            raise ValueError("sentence embedding has zero norm")

    @property
    def num_tokens(self) -> int:
        return self.token_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.token_embeddings.shape[1]


@dataclass
class DecoderConfig:
    base_channel: int = 16
    layers_per_block: int = 2
    channel_multipliers: tuple = (2, 2, 1)
    base_resolution: int = 8
    stages: int = 3
    style_noise_dim: int = 64
    out_channels: int = 8
    out_resolution: int = 64
    token_reduce_dim: int = 16
    style_token_dim: int = 16
    attention_heads: int = 4

    def __post_init__(self):
        if len(self.channel_multipliers) != self.stages:
            raise ValueError(
                f"need {self.stages} channel multipliers, got {len(self.channel_multipliers)}")
        if self.base_resolution * 2 ** self.stages != self.out_resolution:
            raise ValueError(
                f"base_resolution {self.base_resolution} * 2^{self.stages} "
                f"!= out_resolution {self.out_resolution}")

    @property
    def stage_channels(self) -> list[int]:
        return [self.base_channel * m for m in self.channel_multipliers]


def paper_decoder_config() -> DecoderConfig:
    """Full-scale configuration (3 x 32 x 256 x 256 output triplane)."""
    return DecoderConfig(base_channel=80, layers_per_block=10,
                         channel_multipliers=(4, 4, 2, 1, 1), base_resolution=8,
                         stages=5, style_noise_dim=64, out_channels=32,
                         out_resolution=256)


def desk_decoder_config(**overrides) -> DecoderConfig:
    """Small configuration for CPU-scale runs (3 x 8 x 64 x 64 triplane)."""
    return DecoderConfig(**overrides)


@dataclass
class StyleVector:
    """Concatenation of projected token features and a Gaussian noise draw."""

    values: Tensor
    text_dim: int
    noise_dim: int


# ----------------------------------------------------------------------
# parameter construction
# ----------------------------------------------------------------------

def _trunc_normal(rng: np.random.Generator, shape, std=0.02):
    w = rng.normal(0.0, std, size=shape)
    return np.clip(w, -2 * std, 2 * std).astype(np.float32)


class _Builder:
    def __init__(self, rng):
        self.rng = rng
        self.values: dict[str, np.ndarray] = {}

    def linear(self, name, d_in, d_out):
        self.values[f"{name}.weight"] = _trunc_normal(self.rng, (d_in, d_out))
        self.values[f"{name}.bias"] = np.zeros(d_out, dtype=np.float32)

    def conv(self, name, c_in, c_out):
        self.values[f"{name}.weight"] = _trunc_normal(self.rng, (c_out, c_in, 3, 3))
        self.values[f"{name}.bias"] = np.zeros(c_out, dtype=np.float32)

    def attention(self, name, d_model, d_context=None):
        self.linear(f"{name}.q", d_model, d_model)
        self.linear(f"{name}.k", d_context or d_model, d_model)
        self.linear(f"{name}.v", d_context or d_model, d_model)
        self.linear(f"{name}.out", d_model, d_model)


def build_decoder_params(cfg: DecoderConfig, token_dim: int, num_tokens: int,
                         rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Parameter tensors for every decoder submodule, hierarchically named."""
    base_pixels = cfg.base_resolution ** 2
    if (base_pixels * cfg.base_channel) % num_tokens != 0:
        raise ValueError(
            f"{num_tokens} tokens cannot be reshaped to a "
            f"{cfg.base_channel}x{cfg.base_resolution}x{cfg.base_resolution} base map")
    b = _Builder(rng)
    # token-to-plane: reduce -> self-attention -> MLP refine -> reshape
    d_r = cfg.token_reduce_dim
    d_final = base_pixels * cfg.base_channel // num_tokens
    b.linear("decoder.t2p.reduce", token_dim, d_r)
    b.attention("decoder.t2p.attn", d_r)
    b.linear("decoder.t2p.mlp0", d_r, 4 * d_r)
    b.linear("decoder.t2p.mlp1", 4 * d_r, d_final)
    # style injection: project -> self-attention; noise concatenated at runtime
    ds = cfg.style_token_dim
    b.linear("decoder.style.proj", token_dim, ds)
    b.attention("decoder.style.attn", ds)
    style_dim = num_tokens * ds + cfg.style_noise_dim
    # stages
    in_ch = cfg.base_channel
    for i, ch in enumerate(cfg.stage_channels):
        b.conv(f"decoder.stage{i}.entry", in_ch, ch)
        blk = 0
        for _ in range(cfg.layers_per_block):
            if i < ATTENTION_STAGES:
                name = f"decoder.stage{i}.block{blk}"
                b.attention(f"{name}.self", ch)
                b.attention(f"{name}.cross", ch, token_dim)
                b.linear(f"{name}.ff0", ch, 4 * ch)
                b.linear(f"{name}.ff1", 4 * ch, ch)
                blk += 1
            name = f"decoder.stage{i}.block{blk}"
            b.conv(f"{name}.conv", ch, ch)
            b.linear(f"{name}.adain", style_dim, 2 * ch)
            blk += 1
        in_ch = ch
    b.conv("decoder.final", in_ch, 3 * cfg.out_channels)
    return b.values


def style_vector_dim(cfg: DecoderConfig, num_tokens: int) -> int:
    return num_tokens * cfg.style_token_dim + cfg.style_noise_dim


# ----------------------------------------------------------------------
# forward building blocks
# ----------------------------------------------------------------------

def _linear(P, name, x):
    return ad.matmul(x, P[f"{name}.weight"]) + P[f"{name}.bias"]


def _split_heads(x, heads):
    # (T, d) -> (heads, T, d/heads)
    T, d = x.data.shape
    return ad.transpose(ad.reshape(x, (T, heads, d // heads)), (1, 0, 2))


def _merge_heads(x):
    # (heads, T, dh) -> (T, heads*dh)
    h, T, dh = x.data.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (T, h * dh))


def _attention(P, name, query_tokens, context_tokens, heads):
    """Multi-head attention; context == query for self-attention."""
    d = P[f"{name}.q.weight"].data.shape[1]
    q = _split_heads(_linear(P, f"{name}.q", query_tokens), heads)
    k = _split_heads(_linear(P, f"{name}.k", context_tokens), heads)
    v = _split_heads(_linear(P, f"{name}.v", context_tokens), heads)
    scale = 1.0 / np.sqrt(d // heads)
    logits = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * scale
    attn = ad.softmax(logits, axis=-1)
    out = _merge_heads(ad.matmul(attn, v))
    return _linear(P, f"{name}.out", out)


def token_to_plane(cond: TextCondition, P, cfg: DecoderConfig):
    """Map token embeddings to the (base_channel, 8, 8) base feature map."""
    t = Tensor(cond.token_embeddings)
    x = _linear(P, "decoder.t2p.reduce", t)
    x = x + _attention(P, "decoder.t2p.attn", ad.layer_norm(x), ad.layer_norm(x),
                       cfg.attention_heads)
    x = _linear(P, "decoder.t2p.mlp1", ad.silu(_linear(P, "decoder.t2p.mlp0", x)))
    n = cond.num_tokens * x.data.shape[1]
    expected = cfg.base_channel * cfg.base_resolution ** 2
    if n != expected:
        raise ad.ShapeError(f"token_to_plane: {n} values cannot fill "
                            f"{cfg.base_channel}x{cfg.base_resolution}^2 map")
    return ad.reshape(x, (cfg.base_channel, cfg.base_resolution, cfg.base_resolution))


def style_inject(cond: TextCondition, noise: np.ndarray, P,
                 cfg: DecoderConfig) -> StyleVector:
    """Build the style vector: projected/attended token features + noise tail."""
    noise = np.asarray(noise, dtype=np.float32)
    if noise.shape != (cfg.style_noise_dim,):
        raise ad.ShapeError(
            f"style noise must have length {cfg.style_noise_dim}, got {noise.shape}")
    t = Tensor(cond.token_embeddings)
    x = _linear(P, "decoder.style.proj", t)
    x = x + _attention(P, "decoder.style.attn", ad.layer_norm(x), ad.layer_norm(x),
                       cfg.attention_heads)
    text_dim = cond.num_tokens * cfg.style_token_dim
    flat = ad.reshape(x, (text_dim,))
    if cfg.style_noise_dim == 0:
        values = flat
    else:
        values = ad.concat([flat, Tensor(noise)], axis=0)
    return StyleVector(values=values, text_dim=text_dim, noise_dim=cfg.style_noise_dim)


def adain(feature_map, style: StyleVector, P, name: str, eps: float = 1e-5):
    """Per-channel standardization then style-predicted affine (scale, bias)."""
    C = feature_map.data.shape[0]
    ls_lb = _linear(P, name, ad.reshape(style.values, (1, -1)))
    ls = ad.reshape(ls_lb[0, :C], (C, 1, 1))
    lb = ad.reshape(ls_lb[0, C:], (C, 1, 1))
    mu, std = ad.instance_stats(feature_map, eps=eps)
    return ls * ((feature_map - mu) / std) + lb


def cross_attention(feature_map, cond: TextCondition, P, name: str, heads: int):
    """Residual multi-head cross-attention from text tokens into a feature map."""
    C, H, W = feature_map.data.shape
    tokens = ad.transpose(ad.reshape(feature_map, (C, H * W)), (1, 0))  # (HW, C)
    out = _attention(P, name, ad.layer_norm(tokens), Tensor(cond.token_embeddings), heads)
    return ad.reshape(ad.transpose(tokens + out, (1, 0)), (C, H, W))


def _attention_block(x, cond, P, name, heads):
    C, H, W = x.data.shape
    t = ad.transpose(ad.reshape(x, (C, H * W)), (1, 0))               # (HW, C)
    t = t + _attention(P, f"{name}.self", ad.layer_norm(t), ad.layer_norm(t), heads)
    t = t + _attention(P, f"{name}.cross", ad.layer_norm(t),
                       Tensor(cond.token_embeddings), heads)
    t = t + _linear(P, f"{name}.ff1", ad.silu(_linear(P, f"{name}.ff0", ad.layer_norm(t))))
    return ad.reshape(ad.transpose(t, (1, 0)), (C, H, W))


def _conv_block(x, style, P, name):
    h = ad.conv3x3(x, P[f"{name}.conv.weight"], P[f"{name}.conv.bias"])
    h = adain(h, style, P, f"{name}.adain")
    return x + ad.silu(h)


def decode(cond: TextCondition, noise: np.ndarray, cfg: DecoderConfig, P) -> Triplane:
    """Full decoder forward pass: text condition + style noise -> Triplane."""
    style = style_inject(cond, noise, P, cfg)
    x = token_to_plane(cond, P, cfg)
    for i, ch in enumerate(cfg.stage_channels):
        x = ad.conv3x3(x, P[f"decoder.stage{i}.entry.weight"],
                       P[f"decoder.stage{i}.entry.bias"])
        blk = 0
        for _ in range(cfg.layers_per_block):
            if i < ATTENTION_STAGES:
                x = _attention_block(x, cond, P, f"decoder.stage{i}.block{blk}",
                                     cfg.attention_heads)
                blk += 1
            x = _conv_block(x, style, P, f"decoder.stage{i}.block{blk}")
            blk += 1
        x = ad.upsample2x(x)
    x = ad.conv3x3(x, P["decoder.final.weight"], P["decoder.final.bias"])
    C = cfg.out_channels
    return Triplane(x[:C], x[C:2 * C], x[2 * C:], extent=1.0)
