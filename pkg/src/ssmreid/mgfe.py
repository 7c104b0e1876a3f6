"""Multi-granularity feature extraction.

Branch g splits the shared depth-(L-2) sequence into class and image tokens,
fuses each group of 2^g adjacent class tokens into one, re-interleaves the
fused tokens evenly among the untouched image tokens, runs two branch-owned
blocks, and reads the class rows back out.  Every branch then reduces and
concatenates its class rows into a global feature of the same dimension
M * D / r, so all granularities contribute equally.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .backbone import Backbone, BiMbBlock
from .config import ModelConfig
from .losses import BnNeckHead
from .tokens import TokenEmbedding, TokenSequence, embed_image, interleave_tokens

GEM_EPS = 1e-6


@dataclass
class FusionOp:
    """Elementwise reduction over a group of adjacent class tokens."""

    kind: str  # min | max | avg | gem
    gem_power: float | Tensor = 3.0

    def __post_init__(self) -> None:
        if self.kind not in ("min", "max", "avg", "gem"):
            raise ValueError(f"unknown fusion op {self.kind!r}")
        if self.kind == "gem" and float(torch.as_tensor(self.gem_power)) <= 0:
            raise ValueError("gem_power must be > 0")


def split_tokens(seq: TokenSequence) -> tuple[Tensor, Tensor]:
    """Gather class rows and image rows, each in ascending position order."""
    return seq.class_rows(), seq.image_rows()


def fuse_class_tokens(class_tokens: Tensor, g: int, op: FusionOp) -> Tensor:
    """Combine each group of 2^g adjacent class-token rows into one row."""
    group = 2**g
    m = class_tokens.shape[-2]
    if m % group != 0:
        raise ValueError(f"{m} class tokens not divisible into groups of {group}")
    if group == 1:
        return class_tokens
    grouped = class_tokens.reshape(
        *class_tokens.shape[:-2], m // group, group, class_tokens.shape[-1]
    )
    if op.kind == "min":
        return grouped.amin(dim=-2)
    if op.kind == "max":
        return grouped.amax(dim=-2)
    if op.kind == "avg":
        return grouped.mean(dim=-2)
    power = op.gem_power
    if not isinstance(power, Tensor):
        power = torch.as_tensor(power, dtype=class_tokens.dtype)
    clamped = grouped.clamp(min=GEM_EPS)
    # factor out the group max so large powers cannot overflow or underflow
    peak = clamped.amax(dim=-2, keepdim=True)
    scaled = (clamped / peak).pow(power).mean(dim=-2).pow(1.0 / power)
    return peak.squeeze(-2) * scaled


def reinterleave_tokens(class_tokens: Tensor, image_tokens: Tensor) -> TokenSequence:
    """Evenly mix fused class tokens back among the image tokens.

    Same layout rule as the layer-0 assembly but with the reduced token count;
    no position or camera embeddings are added again.
    """
    return interleave_tokens(class_tokens, image_tokens)


class Branch(nn.Module):
    """One granularity branch: fusion, two blocks, reduction, normalization."""

    def __init__(self, cfg: ModelConfig, g: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        if not 0 <= g < cfg.num_branches:
            raise ValueError(f"branch index {g} out of range")
        self.branch_index = g
        self.fusion_kind = cfg.fusion
        if cfg.fusion == "gem":
            self.gem_power = nn.Parameter(torch.tensor(cfg.gem_power, dtype=dtype))
        else:
            self.gem_power = None
        self.blocks = nn.ModuleList(
            BiMbBlock(
                cfg.embed_dim,
                cfg.inner_dim,
                cfg.state_dim,
                cfg.conv_width,
                drop_rate=cfg.drop_rate,
                dtype=dtype,
            )
            for _ in range(2)
        )
        self.pre_norm = nn.LayerNorm(cfg.embed_dim, dtype=dtype)
        self.reduce = nn.Linear(cfg.embed_dim, cfg.branch_row_dim(g), dtype=dtype)
        self.out_norm = nn.LayerNorm(cfg.feature_dim, dtype=dtype)

    def fusion_op(self) -> FusionOp:
        power = self.gem_power if self.gem_power is not None else 3.0
        return FusionOp(kind=self.fusion_kind, gem_power=power)

    def forward(
        self, z_shared: TokenSequence, rng: torch.Generator | None = None
    ) -> Tensor:
        """Class-token matrix (..., M / 2^g, D) of this branch."""
        class_tokens, image_tokens = split_tokens(z_shared)
        fused = fuse_class_tokens(class_tokens, self.branch_index, self.fusion_op())
        seq = reinterleave_tokens(fused, image_tokens)
        data = seq.data
        for block in self.blocks:
            data = block(data, rng=rng)
        return seq.with_data(data).class_rows()


def l2_normalize(x: Tensor, dim: int = -1) -> Tensor:
    norms = x.norm(dim=dim, keepdim=True)
    if (norms == 0).any():
        raise ValueError("cannot L2-normalize a zero vector")
    return x / norms


def extract_branch_feature(z_lg: Tensor, branch: Branch, l2: bool = False) -> Tensor:
    """Normalize rows, reduce each, concatenate, normalize the result.

    The concatenation is layer-normalized (the training-time feature); with
    ``l2=True`` the inference-time plain L2 normalization is applied on top.
    """
    if z_lg.shape[-1] != branch.pre_norm.normalized_shape[0]:
        raise ValueError(
            f"expected rows of dim {branch.pre_norm.normalized_shape[0]}, "
            f"got {z_lg.shape[-1]}"
        )
    if (z_lg == 0).all(dim=-1).any():
        raise ValueError("degenerate all-zero class-token row")
    rows = branch.pre_norm(z_lg)
    reduced = branch.reduce(rows)
    flat = reduced.flatten(-2)
    feature = branch.out_norm(flat)
    return l2_normalize(feature) if l2 else feature


@dataclass
class FeatureBundle:
    """Per-branch global features with their BN counterparts and logits."""

    features: list[Tensor]
    bn_features: list[Tensor]
    logits: list[Tensor]

    @property
    def num_branches(self) -> int:
        return len(self.features)


class ReidModel(nn.Module):
    """Shared trunk of L - 2 blocks feeding G granularity branches.

    With a single branch the model is exactly the plain baseline: the trunk
    plus the branch's two blocks form the full L-block stack, and the branch
    head realizes the normalize/reduce/concatenate read-out.
    """

    def __init__(
        self,
        config: ModelConfig,
        num_classes: int,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.config = config
        self.num_classes = num_classes
        self.dtype = dtype
        self.embedding = TokenEmbedding(config.embed, dtype=dtype)
        self.trunk = Backbone(
            [
                BiMbBlock(
                    config.embed_dim,
                    config.inner_dim,
                    config.state_dim,
                    config.conv_width,
                    drop_rate=config.drop_rate,
                    dtype=dtype,
                )
                for _ in range(config.depth - 2)
            ]
        )
        self.branches = nn.ModuleList(
            Branch(config, g, dtype=dtype) for g in range(config.num_branches)
        )
        self.heads = nn.ModuleList(
            BnNeckHead(config.feature_dim, num_classes, dtype=dtype)
            for _ in range(config.num_branches)
        )

    def shared_sequence(
        self,
        images: Tensor,
        camera_ids: int | Tensor,
        rng: torch.Generator | None = None,
    ) -> TokenSequence:
        seq = embed_image(images, self.embedding, camera_ids, self.config.embed)
        return self.trunk(seq, rng=rng)

    def branch_features(
        self,
        images: Tensor,
        camera_ids: int | Tensor,
        rng: torch.Generator | None = None,
    ) -> list[Tensor]:
        """Raw (pre-BN, layer-normalized) global feature per branch."""
        shared = self.shared_sequence(images, camera_ids, rng=rng)
        return [
            extract_branch_feature(branch(shared, rng=rng), branch)
            for branch in self.branches
        ]

    def forward(
        self,
        images: Tensor,
        camera_ids: int | Tensor,
        rng: torch.Generator | None = None,
    ) -> FeatureBundle:
        features = self.branch_features(images, camera_ids, rng=rng)
        bn_features, logits = [], []
        for feature, head in zip(features, self.heads):
            bn, lg = head(feature)
            bn_features.append(bn)
            logits.append(lg)
        return FeatureBundle(features=features, bn_features=bn_features, logits=logits)


def model_forward(
    images: Tensor,
    model: ReidModel,
    camera_ids: int | Tensor,
    rng: torch.Generator | None = None,
) -> FeatureBundle:
    return model(images, camera_ids, rng=rng)


def build_model(
    config: ModelConfig,
    num_classes: int,
    seed: int = 0,
    dtype: torch.dtype = torch.float64,
) -> ReidModel:
    """Construct a model with deterministic, seed-controlled initialization."""
    torch.manual_seed(seed)
    return ReidModel(config, num_classes, dtype=dtype)
