"""Interleaved class-token sequence layout and patch embedding.

An image is cut into a grid of (possibly overlapping) patches, each patch is
linearly projected to an embedding vector, and M learnable class tokens are
inserted evenly among the N image tokens: J = floor(N / (M + 1)) image tokens
precede each class token and the remaining N - M*J image tokens trail at the
end.  All index bookkeeping for locating class tokens lives here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn


@dataclass(frozen=True)
class EmbedConfig:
    """Geometry and embedding hyperparameters for the token layout."""

    image_height: int
    image_width: int
    patch_size: int
    stride: int
    embed_dim: int
    num_class_tokens: int
    num_cameras: int
    side_weight: float = 3.0

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not 1 <= self.stride <= self.patch_size:
            raise ValueError("stride must satisfy 1 <= stride <= patch_size")
        if self.image_height < self.patch_size or self.image_width < self.patch_size:
            raise ValueError("image must be at least one patch in each dimension")
        if self.num_class_tokens < 1:
            raise ValueError("num_class_tokens must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.num_cameras < 1:
            raise ValueError("num_cameras must be >= 1")
        if self.side_weight < 0:
            raise ValueError("side_weight must be >= 0")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int

    @property
    def count(self) -> int:
        return self.rows * self.cols


def compute_patch_grid(cfg: EmbedConfig) -> PatchGrid:
    """Number of patch rows/cols for an image under patch size and stride."""
    rows = (cfg.image_height + cfg.stride - cfg.patch_size) // cfg.stride
    cols = (cfg.image_width + cfg.stride - cfg.patch_size) // cfg.stride
    if rows < 1 or cols < 1:
        raise ValueError(
            f"image {cfg.image_height}x{cfg.image_width} smaller than patch "
            f"{cfg.patch_size} at stride {cfg.stride}"
        )
    return PatchGrid(rows=rows, cols=cols)


def class_token_positions(num_class_tokens: int, num_image_tokens: int) -> list[int]:
    """Sequence indices of the M class tokens among M + N total tokens.

    Class token j sits at (j + 1) * J + j with J = floor(N / (M + 1)), i.e.
    J image tokens between consecutive class tokens and the remainder at the
    end.
    """
    m, n = num_class_tokens, num_image_tokens
    if not 1 <= m < n:
        raise ValueError(f"need 1 <= M < N, got M={m}, N={n}")
    spacing = n // (m + 1)
    return [(j + 1) * spacing + j for j in range(m)]


@dataclass
class TokenSequence:
    """A token matrix plus the bookkeeping separating class from image rows.

    ``data`` has shape (..., M + N, D); leading batch dimensions are allowed.
    """

    data: Tensor
    class_positions: Tensor = field(repr=False)
    image_positions: Tensor = field(repr=False)
    spacing: int

    def __post_init__(self) -> None:
        total = self.class_positions.numel() + self.image_positions.numel()
        if self.data.shape[-2] != total:
            raise ValueError(
                f"data has {self.data.shape[-2]} rows, positions cover {total}"
            )

    @property
    def num_class_tokens(self) -> int:
        return int(self.class_positions.numel())

    @property
    def num_image_tokens(self) -> int:
        return int(self.image_positions.numel())

    def class_rows(self) -> Tensor:
        return self.data.index_select(-2, self.class_positions)

    def image_rows(self) -> Tensor:
        return self.data.index_select(-2, self.image_positions)

    def with_data(self, data: Tensor) -> "TokenSequence":
        """Same layout, new values; used by layout-preserving transforms."""
        return TokenSequence(
            data=data,
            class_positions=self.class_positions,
            image_positions=self.image_positions,
            spacing=self.spacing,
        )


def interleave_tokens(class_tokens: Tensor, image_tokens: Tensor) -> TokenSequence:
    """Evenly insert class-token rows among image-token rows.

    Pure layout operation; no embeddings are added.  Accepts broadcastable
    leading batch dimensions on either argument.
    """
    m = class_tokens.shape[-2]
    n = image_tokens.shape[-2]
    if class_tokens.shape[-1] != image_tokens.shape[-1]:
        raise ValueError("class and image tokens must share the embedding dim")
    cls_pos = class_token_positions(m, n)
    spacing = n // (m + 1)
    device = image_tokens.device
    cls_idx = torch.tensor(cls_pos, dtype=torch.long, device=device)
    mask = torch.zeros(m + n, dtype=torch.bool, device=device)
    mask[cls_idx] = True
    img_idx = (~mask).nonzero(as_tuple=False).squeeze(-1)

    batch = torch.broadcast_shapes(class_tokens.shape[:-2], image_tokens.shape[:-2])
    cls_exp = class_tokens.expand(*batch, m, class_tokens.shape[-1])
    img_exp = image_tokens.expand(*batch, n, image_tokens.shape[-1])
    stacked = torch.cat([cls_exp, img_exp], dim=-2)

    # inverse permutation: output slot -> row in [class_tokens; image_tokens]
    inverse = torch.empty(m + n, dtype=torch.long, device=device)
    inverse[cls_idx] = torch.arange(m, device=device)
    inverse[img_idx] = m + torch.arange(n, device=device)
    data = stacked.index_select(-2, inverse)
    return TokenSequence(
        data=data, class_positions=cls_idx, image_positions=img_idx, spacing=spacing
    )


class TokenEmbedding(nn.Module):
    """Learnable patch projection, class tokens, position and camera embeddings."""

    def __init__(self, cfg: EmbedConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.cfg = cfg
        grid = compute_patch_grid(cfg)
        self.grid = grid
        if cfg.num_class_tokens >= grid.count:
            raise ValueError(
                f"M={cfg.num_class_tokens} class tokens require more than "
                f"{grid.count} image tokens"
            )
        self.patch_projection = nn.Linear(cfg.patch_dim, cfg.embed_dim, dtype=dtype)
        self.class_token_values = nn.Parameter(
            torch.randn(cfg.num_class_tokens, cfg.embed_dim, dtype=dtype) * 0.02
        )
        self.position_embedding = nn.Parameter(
            torch.randn(cfg.num_class_tokens + grid.count, cfg.embed_dim, dtype=dtype)
            * 0.02
        )
        self.side_embedding = nn.Parameter(
            torch.randn(cfg.num_cameras, cfg.embed_dim, dtype=dtype) * 0.02
        )


def extract_patches(image: Tensor, cfg: EmbedConfig) -> Tensor:
    """Flattened patch vectors in row-major grid order, shape (..., N, P*P*3).

    Overlapping patches share pixels when stride < patch_size.  Each patch is
    flattened in (row, col, channel) order.
    """
    if image.shape[-3] != cfg.image_height or image.shape[-2] != cfg.image_width:
        raise ValueError(
            f"expected image of shape (..., {cfg.image_height}, {cfg.image_width}, 3), "
            f"got {tuple(image.shape)}"
        )
    if image.shape[-1] != 3:
        raise ValueError("images must have 3 channels")
    p, s = cfg.patch_size, cfg.stride
    # (..., H, W, 3) -> (..., h, W, 3, P) -> (..., h, w, 3, P, P)
    patches = image.unfold(-3, p, s).unfold(-3, p, s)
    # axes are now (..., h, w, 3, P_rows, P_cols); flatten per patch as (row, col, chan)
    patches = patches.movedim(-3, -1)  # (..., h, w, P, P, 3)
    grid = compute_patch_grid(cfg)
    return patches.reshape(*image.shape[:-3], grid.count, cfg.patch_dim)


def patchify_project(image: Tensor, state: TokenEmbedding, cfg: EmbedConfig) -> Tensor:
    """Project all patches of an image to embedding vectors, shape (..., N, D)."""
    return state.patch_projection(extract_patches(image, cfg))


def assemble_sequence(
    patch_tokens: Tensor,
    state: TokenEmbedding,
    camera_id: int | Tensor,
    cfg: EmbedConfig,
) -> TokenSequence:
    """Interleave class tokens with patch tokens and add position/camera terms.

    The camera (side-information) embedding, scaled by ``cfg.side_weight``, is
    added to every row of the sequence, class tokens included.
    """
    grid = compute_patch_grid(cfg)
    if patch_tokens.shape[-2] != grid.count:
        raise ValueError(
            f"expected {grid.count} patch tokens, got {patch_tokens.shape[-2]}"
        )
    seq = interleave_tokens(state.class_token_values, patch_tokens)
    cam = torch.as_tensor(camera_id, device=patch_tokens.device)
    if cam.lt(0).any() or cam.ge(cfg.num_cameras).any():
        raise ValueError(f"camera_id out of range [0, {cfg.num_cameras})")
    side = state.side_embedding[cam]  # (..., D); broadcasts over token rows
    if side.dim() > 1:
        side = side.unsqueeze(-2)
    data = seq.data + state.position_embedding + cfg.side_weight * side
    return seq.with_data(data)


def embed_image(
    image: Tensor,
    state: TokenEmbedding,
    camera_id: int | Tensor,
    cfg: EmbedConfig,
) -> TokenSequence:
    """Full layer-0 pipeline: patchify, project, interleave, add embeddings."""
    return assemble_sequence(patchify_project(image, state, cfg), state, camera_id, cfg)
