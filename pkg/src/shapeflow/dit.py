"""Velocity network: adaLN-modulated transformer over latent token sets.

Each block runs self-attention, condition cross-attention, and a
feedforward sub-layer in that order; every sub-layer is gated and
modulated by (gate, shift, scale) vectors produced from the timestep
embedding.  Gates and the output projection start at zero, so an
untrained network is exactly the identity map with zero velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import (Attention, FeedForward, Linear, attention_init,
                 feed_forward_init, linear_init)
from .tensor import Tensor, add, gelu, layer_norm, mul, reshape


@dataclass
class DiTConfig:
    num_blocks: int = 4
    width: int = 64
    num_heads: int = 4
    latent_len: int = 32
    cond_width: int = 16
    latent_width: int = 64
    ffn_mult: int = 4

    def __post_init__(self):
        if self.width % self.num_heads != 0:
            raise ValueError(
                f"width {self.width} not divisible by {self.num_heads} heads")


# full-scale reference configuration (not trainable on a desk machine)
FULL_SCALE = DiTConfig(num_blocks=24, width=768, num_heads=12,
                       latent_len=2048, cond_width=1024, latent_width=768)


@dataclass
class ConditionTokens:
    """Condition matrix plus the learned token used when it is dropped."""

    y: Tensor           # (K, cond_width)
    null_token: Tensor  # (1, cond_width), trained parameter

    def resolve(self, use_null: bool) -> Tensor:
        return self.null_token if use_null else self.y


@dataclass
class DiTBlockParams:
    adaln: Linear       # time embedding -> 9 * width, zero-initialized
    msa: Attention
    mca: Attention
    ffn: FeedForward


@dataclass
class DiTParams:
    config: DiTConfig
    time_fc1: Linear
    time_fc2: Linear
    in_proj: Linear
    blocks: list[DiTBlockParams]
    final_gamma: Tensor
    final_beta: Tensor
    out_proj: Linear    # zero-initialized: fresh models emit zero velocity
    cond_proj: Linear   # condition parameter vector -> K * cond_width
    null_token: Tensor  # (1, cond_width)
    num_cond_tokens: int


def init_dit(config: DiTConfig, cond_param_len: int = 20,
             num_cond_tokens: int = 4, seed: int = 0) -> DiTParams:
    rng = np.random.default_rng(seed)
    d = config.width
    blocks = [
        DiTBlockParams(
            adaln=linear_init(d, 9 * d, rng, zero=True),
            msa=attention_init(d, config.num_heads, rng),
            mca=attention_init(d, config.num_heads, rng,
                               kv_width=config.cond_width),
            ffn=feed_forward_init(d, rng, config.ffn_mult),
        )
        for _ in range(config.num_blocks)
    ]
    return DiTParams(
        config=config,
        time_fc1=linear_init(d, d, rng),
        time_fc2=linear_init(d, d, rng),
        in_proj=linear_init(config.latent_width, d, rng),
        blocks=blocks,
        final_gamma=Tensor(np.ones(d), requires_grad=True),
        final_beta=Tensor(np.zeros(d), requires_grad=True),
        out_proj=linear_init(d, config.latent_width, rng, zero=True),
        cond_proj=linear_init(cond_param_len,
                              num_cond_tokens * config.cond_width, rng),
        null_token=Tensor(rng.normal(0.0, 0.02, size=(1, config.cond_width)),
                          requires_grad=True),
        num_cond_tokens=num_cond_tokens,
    )


def condition_tokens(params: DiTParams, cond_vec: np.ndarray) -> ConditionTokens:
    """Embed a condition parameter vector into K condition tokens."""
    vec = Tensor(np.asarray(cond_vec, dtype=np.float64).reshape(1, -1))
    flat = params.cond_proj(vec)
    y = reshape(flat, (params.num_cond_tokens, params.config.cond_width))
    return ConditionTokens(y=y, null_token=params.null_token)


def time_embedding(t: float, params: DiTParams) -> Tensor:
    """Sinusoidal features of t in [0, 1] through a two-layer MLP."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    d = params.config.width
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t * 1000.0 * freqs
    feats = np.concatenate([np.sin(angles), np.cos(angles)])
    if len(feats) < d:
        feats = np.concatenate([feats, np.zeros(d - len(feats))])
    h = reshape(Tensor(feats), (1, d))
    return reshape(params.time_fc2(gelu(params.time_fc1(h))), (d,))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """x * (1 + scale) + shift, broadcast over token rows."""
    return add(mul(x, add(Tensor(1.0), scale)), shift)


_ONES = {}
_ZEROS = {}


def _plain_norm(x: Tensor, width: int) -> Tensor:
    # non-affine normalization; the adaLN modulation supplies shift/scale
    if width not in _ONES:
        _ONES[width] = Tensor(np.ones(width))
        _ZEROS[width] = Tensor(np.zeros(width))
    return layer_norm(x, _ONES[width], _ZEROS[width])


def dit_block(z: Tensor, y: ConditionTokens, t_embed: Tensor,
              block: DiTBlockParams, use_null: bool = False) -> Tensor:
    """One gated residual block: self-attention, conditioning, feedforward."""
    d = t_embed.shape[-1]
    mods = block.adaln(reshape(gelu(t_embed), (1, d)))
    chunks = [reshape(mods[:, i * d:(i + 1) * d], (d,)) for i in range(9)]
    (scale_msa, shift_msa, gate_msa,
     scale_mca, shift_mca, gate_mca,
     scale_ffn, shift_ffn, gate_ffn) = chunks

    h = modulate(_plain_norm(z, d), shift_msa, scale_msa)
    z = add(z, mul(gate_msa, block.msa(h, h)))

    h = modulate(_plain_norm(z, d), shift_mca, scale_mca)
    z = add(z, mul(gate_mca, block.mca(h, y.resolve(use_null))))

    h = modulate(_plain_norm(z, d), shift_ffn, scale_ffn)
    z = add(z, mul(gate_ffn, block.ffn(h)))
    return z


def predict_velocity(z_t: Tensor, t: float, y: ConditionTokens,
                     params: DiTParams, use_null: bool = False) -> Tensor:
    """Velocity of the latent flow at (z_t, t) under condition y."""
    cfg = params.config
    if z_t.shape != (cfg.latent_len, cfg.latent_width):
        raise ValueError(
            f"latent shape {z_t.shape} does not match configured "
            f"({cfg.latent_len}, {cfg.latent_width})")
    t_embed = time_embedding(t, params)
    h = params.in_proj(z_t)
    for block in params.blocks:
        h = dit_block(h, y, t_embed, block, use_null=use_null)
    h = layer_norm(h, params.final_gamma, params.final_beta)
    return params.out_proj(h)


def velocity_fn(params: DiTParams, y: ConditionTokens):
    """Close over trained parameters as a plain-array velocity field."""
    def velocity(z: np.ndarray, t: float, use_null: bool = False) -> np.ndarray:
        out = predict_velocity(Tensor(z), t, y, params, use_null=use_null)
        return out.data
    return velocity
