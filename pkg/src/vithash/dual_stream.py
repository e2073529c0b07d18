"""Dual-stream final layer (global + grouped local branches) and hash heads.

The last transformer layer is replaced by two blocks with disjoint weights:

* the global block runs on the whole sequence ``Z_{L-1}`` and its class-token
  output is the global feature;
* the local block runs once per token group. Patch tokens ``1..N`` are cut
  into ``K`` contiguous groups of ``N // K`` tokens, the last group taking the
  remainder; each group is prefixed with the shared class token, and that
  token's output is the group's local feature.

Each feature gets its own affine hash head. The global head emits ``B/2``
values; the ``B/2`` local bits are spread over the ``K`` heads as evenly as
possible (the first ``(B/2) % K`` heads get one extra bit).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .layers import Linear, Module
from .vit import Backbone, BackboneConfig, EncoderBlock

MIN_LOCAL_BITS = 4


@dataclass
class DualStreamConfig:
    num_groups: int = 2
    hash_bits: int = 16
    feature_dim: int | None = None

    @property
    def global_bits(self) -> int:
        return self.hash_bits // 2

    @property
    def local_bits(self) -> list[int]:
        base, extra = divmod(self.hash_bits // 2, self.num_groups)
        return [base + 1 if k < extra else base for k in range(self.num_groups)]

    def validate(self, num_patches: int | None = None) -> None:
        b, k = self.hash_bits, self.num_groups
        if k < 1:
            raise ConfigError(f"dual_stream.num_groups must be >= 1, got {k}")
        if b < 2 or b % 2:
            raise ConfigError(f"dual_stream.hash_bits must be a positive even number, got {b}")
        if (b // 2) // k < MIN_LOCAL_BITS:
            raise ConfigError(
                f"dual_stream: hash_bits={b} with num_groups={k} leaves {b / (2 * k):g} bits per local "
                f"hash vector; fewer than {MIN_LOCAL_BITS} local bits fails to converge"
            )
        if num_patches is not None and k > num_patches:
            raise ConfigError(f"dual_stream.num_groups={k} exceeds the {num_patches} patch tokens")


def check_feasible(hash_bits: int, num_groups: int) -> bool:
    """True when a (bits, K) combination passes config validation."""
    try:
        DualStreamConfig(num_groups=num_groups, hash_bits=hash_bits).validate()
    except ConfigError:
        return False
    return True


def group_bounds(num_patches: int, num_groups: int) -> list[tuple[int, int]]:
    """Half-open sequence-index ranges of each local group (token 0 is the class token)."""
    if num_groups < 1 or num_groups > num_patches:
        raise ConfigError(f"cannot split {num_patches} patch tokens into {num_groups} groups")
    size = num_patches // num_groups
    bounds = []
    for k in range(num_groups):
        start = 1 + k * size
        stop = 1 + num_patches if k == num_groups - 1 else start + size
        bounds.append((start, stop))
    return bounds


def global_branch(z: Tensor, block: EncoderBlock) -> Tensor:
    """(..., N+1, D) -> global feature (..., D)."""
    return block(z)[..., 0, :]


def local_branch(z: Tensor, block: EncoderBlock, num_groups: int) -> list[Tensor]:
    """(..., N+1, D) -> K local features, each (..., D), from one shared block."""
    cls = z[..., 0:1, :]
    features = []
    for start, stop in group_bounds(z.shape[-2] - 1, num_groups):
        seq = ad.concat([cls, z[..., start:stop, :]], axis=-2)
        features.append(block(seq)[..., 0, :])
    return features


def hash_project(feature: Tensor, layer: Linear) -> Tensor:
    """Affine hash head ``f W^T + b`` with no activation."""
    if feature.shape[-1] != layer.in_dim:
        raise ShapeError(f"hash layer expects features of width {layer.in_dim}, got {feature.shape}")
    return layer(feature)


@dataclass
class HashVectorSet:
    """Continuous hash vectors for a batch: global (n, B/2) and K locals (n, w_k)."""

    global_: Tensor
    locals_: list[Tensor]

    @property
    def streams(self) -> list[Tensor]:
        return [self.global_, *self.locals_]

    @property
    def num_bits(self) -> int:
        return sum(t.shape[-1] for t in self.streams)

    def concat(self) -> Tensor:
        return ad.concat(self.streams, axis=-1)


class HashModel(Module):
    """Backbone, dual-stream layer and hash heads as one shared parameter set.

    Both members of a training pair go through this same object, which is
    what makes the network Siamese.
    """

    def __init__(self, backbone: BackboneConfig, dual: DualStreamConfig, rng: np.random.Generator):
        backbone.validate()
        dual.validate(backbone.num_patches)
        if dual.feature_dim is not None and dual.feature_dim != backbone.embed_dim:
            raise ConfigError(
                f"dual_stream.feature_dim={dual.feature_dim} differs from backbone.embed_dim={backbone.embed_dim}"
            )
        self.backbone_cfg = backbone
        self.dual_cfg = dual
        self.backbone = Backbone(backbone, rng)
        self.global_block = EncoderBlock(backbone, rng)
        self.local_block = EncoderBlock(backbone, rng)
        d = backbone.embed_dim
        self.global_hash = Linear(d, dual.global_bits, rng)
        self.local_hash = [Linear(d, w, rng) for w in dual.local_bits]

    def __call__(self, images) -> HashVectorSet:
        z = self.backbone(images)
        h_global = hash_project(global_branch(z, self.global_block), self.global_hash)
        locals_ = local_branch(z, self.local_block, self.dual_cfg.num_groups)
        h_locals = [hash_project(f, layer) for f, layer in zip(locals_, self.local_hash)]
        return HashVectorSet(h_global, h_locals)
