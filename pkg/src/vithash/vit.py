"""Vision-transformer backbone: patches, embeddings and pre-norm encoder blocks.

Patch layout is fixed for reproducibility:

* patches are scanned row-major over the patch grid (left to right, then
  top to bottom), so patch ``k`` covers grid cell ``(k // (W/P), k % (W/P))``;
* each patch is flattened in (row, col, channel) order, i.e. a plain
  C-order reshape of its ``P x P x C`` block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .layers import LayerNorm, Linear, Module, trunc_normal


@dataclass
class BackboneConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 32
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    final_norm: bool = True
    ln_eps: float = 1e-6

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def validate(self) -> None:
        if self.image_size < 1 or self.patch_size < 1:
            raise ConfigError("backbone.image_size and backbone.patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"backbone.image_size={self.image_size} is not divisible by patch_size={self.patch_size}"
            )
        if self.channels < 1:
            raise ConfigError(f"backbone.channels must be positive, got {self.channels}")
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ConfigError("backbone.embed_dim and backbone.num_heads must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"backbone.embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}"
            )
        if self.num_blocks < 2:
            raise ConfigError(
                f"backbone.num_blocks must be >= 2 (the last block is the dual-stream layer), got {self.num_blocks}"
            )
        if self.mlp_dim < 1:
            raise ConfigError(f"backbone.mlp_ratio gives an empty MLP: {self.mlp_ratio}")


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N, P*P*C) with N = H*W/P^2."""
    image = np.asarray(image)
    *lead, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    gh, gw = h // p, w // p
    x = image.reshape(*lead, gh, p, gw, p, c)
    nd = len(lead)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return x.reshape(*lead, gh * gw, p * p * c)


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    *lead, n, flat = patches.shape
    p = patch_size
    c = flat // (p * p)
    gh, gw = height // p, width // p
    if gh * gw != n or c * p * p != flat:
        raise ShapeError(f"patch array {patches.shape} does not tile a {height}x{width} image")
    x = patches.reshape(*lead, gh, gw, p, p, c)
    nd = len(lead)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return x.reshape(*lead, height, width, c)


class PatchEmbedder(Module):
    """Linear patch projection, prepended class token and learned 1-D positions."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        patch_dim = cfg.patch_size**2 * cfg.channels
        self.projection = Linear(patch_dim, cfg.embed_dim, rng)
        self.class_token = Tensor(np.zeros((1, cfg.embed_dim)), requires_grad=True)
        self.position = Tensor(trunc_normal(rng, (cfg.num_patches + 1, cfg.embed_dim)), requires_grad=True)

    def __call__(self, patches: Tensor) -> Tensor:
        """(..., N, P*P*C) -> (..., N+1, D)."""
        patches = ad.as_tensor(patches)
        if patches.shape[-1] != self.projection.in_dim:
            raise ShapeError(
                f"patch width {patches.shape[-1]} does not match projection input {self.projection.in_dim}"
            )
        if patches.shape[-2] + 1 != self.position.shape[0]:
            raise ShapeError(
                f"{patches.shape[-2]} patches do not match {self.position.shape[0]} position rows"
            )
        x = self.projection(patches)
        lead = x.shape[:-2]
        cls = ad.broadcast_to(self.class_token, lead + self.class_token.shape)
        return ad.concat([cls, x], axis=-2) + self.position


class Attention(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        self.num_heads = num_heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return msa(x, self)


def msa(x: Tensor, attn: Attention) -> Tensor:
    """Multi-head scaled dot-product self-attention over (..., T, D)."""
    *lead, t, d = x.shape
    h = attn.num_heads
    if d % h:
        raise ShapeError(f"width {d} is not divisible by {h} heads")
    hd = d // h

    def heads(y: Tensor) -> Tensor:
        y = ad.reshape(y, (*lead, t, h, hd))
        return ad.swapaxes(y, -3, -2)  # (..., h, T, hd)

    q = heads(attn.query(x))
    k = heads(attn.key(x))
    v = heads(attn.value(x))
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(hd))
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.swapaxes(ad.matmul(weights, v), -3, -2)
    return attn.out(ad.reshape(ctx, (*lead, t, d)))


class EncoderBlock(Module):
    """Pre-norm transformer block: x += MSA(LN(x)); x += MLP(LN(x))."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.norm1 = LayerNorm(d, cfg.ln_eps)
        self.attn = Attention(d, cfg.num_heads, rng)
        self.norm2 = LayerNorm(d, cfg.ln_eps)
        self.fc1 = Linear(d, cfg.mlp_dim, rng)
        self.fc2 = Linear(cfg.mlp_dim, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.attn(self.norm1(x)) + x
        return self.fc2(ad.gelu(self.fc1(self.norm2(x)))) + x

    def zero_residual_outputs(self) -> None:
        """Zero both residual-branch output projections, making the block the identity."""
        for layer in (self.attn.out, self.fc2):
            layer.weight.data = np.zeros_like(layer.weight.data)
            layer.bias.data = np.zeros_like(layer.bias.data)


def encoder_forward(z0: Tensor, blocks: list[EncoderBlock]) -> Tensor:
    x = z0
    for block in blocks:
        x = block(x)
    return x


class Backbone(Module):
    """Embeddings plus the L-1 shared encoder blocks (and optional final norm)."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.embed = PatchEmbedder(cfg, rng)
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.num_blocks - 1)]
        self.norm = LayerNorm(cfg.embed_dim, cfg.ln_eps) if cfg.final_norm else None

    def __call__(self, images) -> Tensor:
        """(n, H, W, C) pixel array -> Z_{L-1} of shape (n, N+1, D)."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        s, c = self.cfg.image_size, self.cfg.channels
        if images.shape[-3:] != (s, s, c):
            raise ConfigError(f"expected images of shape (..., {s}, {s}, {c}), got {images.shape}")
        z = encoder_forward(self.embed(Tensor(patchify(images, self.cfg.patch_size))), self.blocks)
        return self.norm(z) if self.norm is not None else z
