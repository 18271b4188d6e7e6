"""Set-latent shape autoencoder.

The encoder cross-attends positionally embedded query anchors into the
embedded surface cloud and reads out variational token statistics; the
decoder runs the tokens through self-attention blocks and lets arbitrary
query positions cross-attend into them to regress signed distance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import PointCloud
from .nn import (Attention, FeedForward, Linear, attention_init,
                 feed_forward_init, linear_init)
from .sampling import QuerySet
from .tensor import (Tensor, add, concat, cos, exp, layer_norm, mul, reshape,
                     sin, square, sub, tmean)


@dataclass
class VaeConfig:
    width: int = 64            # transformer width D
    latent_width: int = 64     # token channels (kept equal to width)
    num_heads: int = 4
    decoder_blocks: int = 2
    num_frequencies: int = 6   # Fourier feature octaves L
    ffn_mult: int = 4

    def feature_width(self) -> int:
        return 3 + 6 * self.num_frequencies


@dataclass
class PosEmbedParams:
    """Fourier features followed by a learnable projection to the width."""

    num_frequencies: int
    proj: Linear


@dataclass
class SelfBlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: Attention
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ffn: FeedForward


@dataclass
class VaeParams:
    config: VaeConfig
    pos_embed: PosEmbedParams
    encoder_attn: Attention
    mean_head: Linear
    logvar_head: Linear
    decoder_blocks: list[SelfBlockParams]
    decoder_attn: Attention
    out_head: Linear


@dataclass
class LatentSet:
    """M latent tokens plus the query anchors that produced them."""

    tokens: Tensor            # (M, latent_width)
    mean: Tensor              # (M, latent_width)
    logvar: Tensor            # (M, latent_width)
    anchors: Optional[QuerySet] = None


def _affine_pair(width: int) -> tuple[Tensor, Tensor]:
    return (Tensor(np.ones(width), requires_grad=True),
            Tensor(np.zeros(width), requires_grad=True))


def init_vae(config: VaeConfig, seed: int = 0) -> VaeParams:
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(config.decoder_blocks):
        g1, b1 = _affine_pair(config.width)
        g2, b2 = _affine_pair(config.width)
        blocks.append(SelfBlockParams(
            ln1_gamma=g1, ln1_beta=b1,
            attn=attention_init(config.width, config.num_heads, rng),
            ln2_gamma=g2, ln2_beta=b2,
            ffn=feed_forward_init(config.width, rng, config.ffn_mult)))
    return VaeParams(
        config=config,
        pos_embed=PosEmbedParams(
            num_frequencies=config.num_frequencies,
            proj=linear_init(config.feature_width(), config.width, rng)),
        encoder_attn=attention_init(config.width, config.num_heads, rng),
        mean_head=linear_init(config.width, config.latent_width, rng),
        logvar_head=linear_init(config.width, config.latent_width, rng),
        decoder_blocks=blocks,
        decoder_attn=attention_init(config.width, config.num_heads, rng),
        out_head=linear_init(config.width, 1, rng),
    )


def pos_embed(points, params: PosEmbedParams) -> Tensor:
    """[p, sin(2^j pi p), cos(2^j pi p)]_{j<L} projected to the model width."""
    pts = points.points if isinstance(points, PointCloud) else points
    x = pts if isinstance(pts, Tensor) else Tensor(np.asarray(pts, dtype=np.float64))
    feats = [x]
    for j in range(params.num_frequencies):
        scaled = x * float(2 ** j * np.pi)
        feats.append(sin(scaled))
        feats.append(cos(scaled))
    return params.proj(concat(feats, axis=-1))


def encode(surface, queries, params: VaeParams,
           mode: str = "deterministic", seed: int = 0) -> LatentSet:
    """Cross-attend embedded queries into the embedded surface cloud.

    mode "deterministic" returns tokens == mean; "sampled" applies the
    reparameterization trick with the given seed.  surface and queries may
    be clouds / query sets or raw position tensors.
    """
    if mode not in ("deterministic", "sampled"):
        raise ValueError(f"unknown encode mode {mode!r}")
    query_pts = queries.points if isinstance(queries, QuerySet) else queries
    q = pos_embed(query_pts, params.pos_embed)
    kv = pos_embed(surface, params.pos_embed)
    h = params.encoder_attn(q, kv)
    mean = params.mean_head(h)
    logvar = params.logvar_head(h)
    if mode == "sampled":
        eps = np.random.default_rng(seed).standard_normal(mean.shape)
        tokens = add(mean, mul(exp(logvar * 0.5), Tensor(eps)))
    else:
        tokens = mean
    anchors = queries if isinstance(queries, QuerySet) else None
    return LatentSet(tokens=tokens, mean=mean, logvar=logvar, anchors=anchors)


def decode(latent: LatentSet, positions, params: VaeParams) -> Tensor:
    """Predicted signed distance at each query position, shape (n,)."""
    h = latent.tokens
    for block in params.decoder_blocks:
        normed = layer_norm(h, block.ln1_gamma, block.ln1_beta)
        h = add(h, block.attn(normed, normed))
        h = add(h, block.ffn(layer_norm(h, block.ln2_gamma, block.ln2_beta)))
    q = pos_embed(positions, params.pos_embed)
    mixed = params.decoder_attn(q, h)
    out = params.out_head(mixed)
    return reshape(out, (out.shape[0],))


def kl_divergence(mean: Tensor, logvar: Tensor) -> Tensor:
    """Mean over tokens and channels of KL(N(mu, sigma^2) || N(0, 1))."""
    if mean.shape != logvar.shape:
        raise ValueError(f"mean {mean.shape} vs logvar {logvar.shape}")
    term = sub(add(square(mean), exp(logvar)), add(Tensor(1.0), logvar))
    return tmean(term) * 0.5


def vae_loss(pred_sdf: Tensor, true_sdf: Tensor, mean: Tensor,
             logvar: Tensor, beta_kl: float = 1e-6) -> Tensor:
    """SDF regression MSE plus beta-weighted KL."""
    if pred_sdf.shape != true_sdf.shape:
        raise ValueError(
            f"prediction {pred_sdf.shape} vs target {true_sdf.shape}")
    recon = tmean(square(sub(pred_sdf, true_sdf)))
    return add(recon, kl_divergence(mean, logvar) * beta_kl)
