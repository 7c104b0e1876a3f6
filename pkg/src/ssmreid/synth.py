"""Synthetic person-like dataset: procedural identity textures under
camera-dependent color shifts and pixel noise.

Each identity is a deterministic texture of a color-block grid plus
sinusoidal stripes; every image re-renders the texture with a per-image
random stripe-phase jitter (the stand-in for pose change), then adds the
color shift of camera j mod num_cameras and pixel noise.  The first
``eval_rounds`` camera cycles of every identity form the evaluation split:
camera-0 images become queries and the rest gallery, so a query never shares
a camera with its gallery matches.  All later images form the training split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SynthSpec:
    num_identities: int = 32
    images_per_identity: int = 16
    num_cameras: int = 4
    image_height: int = 64
    image_width: int = 32
    noise_level: float = 0.05
    camera_shift: float = 0.08
    pose_jitter: float = 0.2  # stripe-phase jitter per image, fraction of a period
    eval_rounds: int = 2

    def __post_init__(self) -> None:
        if self.num_identities < 2:
            raise ValueError("need at least 2 identities")
        if self.num_cameras < 2:
            raise ValueError("need at least 2 cameras")
        if self.eval_rounds < 1:
            raise ValueError("eval_rounds must be >= 1")
        if self.images_per_identity < self.eval_rounds * self.num_cameras + 1:
            raise ValueError(
                "images_per_identity too small for the split: need "
                "eval_rounds * num_cameras evaluation images plus at least "
                "one training image per identity"
            )
        if self.image_height < 8 or self.image_width < 8:
            raise ValueError("images must be at least 8x8")
        if self.noise_level < 0 or self.camera_shift < 0 or self.pose_jitter < 0:
            raise ValueError("noise_level, camera_shift and pose_jitter must be >= 0")


@dataclass
class SyntheticDataset:
    spec: SynthSpec
    images: np.ndarray  # (num_images, H, W, 3) in [0, 1]
    identities: np.ndarray
    cameras: np.ndarray
    train_indices: np.ndarray
    query_indices: np.ndarray
    gallery_indices: np.ndarray

    @property
    def num_train_identities(self) -> int:
        return len(np.unique(self.identities[self.train_indices]))


def _identity_params(spec: SynthSpec, identity: int, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0, identity]))
    block_rows, block_cols = 4, 2
    return {
        "palette": rng.uniform(0.1, 0.9, size=(block_rows, block_cols, 3)),
        "freq_r": rng.uniform(2.0, 6.0),
        "freq_c": rng.uniform(2.0, 6.0),
        "phase_r": rng.uniform(0.0, 2 * np.pi),
        "phase_c": rng.uniform(0.0, 2 * np.pi),
        "amp": rng.uniform(0.1, 0.25, size=3),
    }


def _render_texture(
    spec: SynthSpec, params: dict, jitter_r: float = 0.0, jitter_c: float = 0.0
) -> np.ndarray:
    h, w = spec.image_height, spec.image_width
    palette = params["palette"]
    block_rows, block_cols = palette.shape[:2]
    row_block = np.minimum(np.arange(h) * block_rows // h, block_rows - 1)
    col_block = np.minimum(np.arange(w) * block_cols // w, block_cols - 1)
    tex = palette[row_block[:, None], col_block[None, :]]  # (h, w, 3)
    rows = np.arange(h)[:, None, None]
    cols = np.arange(w)[None, :, None]
    stripes = params["amp"] * (
        np.sin(2 * np.pi * params["freq_r"] * rows / h + params["phase_r"] + jitter_r)
        + np.sin(2 * np.pi * params["freq_c"] * cols / w + params["phase_c"] + jitter_c)
    )
    return np.clip(tex + stripes, 0.0, 1.0)


def identity_texture(spec: SynthSpec, identity: int, seed: int) -> np.ndarray:
    """Deterministic base texture for one identity, without pose jitter."""
    return _render_texture(spec, _identity_params(spec, identity, seed))


def camera_color_shift(spec: SynthSpec, camera: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1, camera]))
    return rng.uniform(-1.0, 1.0, size=3) * spec.camera_shift


def generate_synthetic_dataset(spec: SynthSpec, seed: int = 0) -> SyntheticDataset:
    """Render all images and split into train / query / gallery indices."""
    shifts = np.stack(
        [camera_color_shift(spec, c, seed) for c in range(spec.num_cameras)]
    )
    images = np.empty(
        (
            spec.num_identities * spec.images_per_identity,
            spec.image_height,
            spec.image_width,
            3,
        ),
        dtype=np.float64,
    )
    identities = np.empty(len(images), dtype=np.int64)
    cameras = np.empty(len(images), dtype=np.int64)
    train, query, gallery = [], [], []
    idx = 0
    for identity in range(spec.num_identities):
        params = _identity_params(spec, identity, seed)
        for j in range(spec.images_per_identity):
            camera = j % spec.num_cameras
            rng = np.random.default_rng(np.random.SeedSequence([seed, 2, identity, j]))
            jitter_r, jitter_c = rng.uniform(-1.0, 1.0, size=2) * (
                2 * np.pi * spec.pose_jitter
            )
            texture = _render_texture(spec, params, jitter_r, jitter_c)
            noise = rng.normal(0.0, spec.noise_level, size=texture.shape)
            images[idx] = np.clip(texture + shifts[camera] + noise, 0.0, 1.0)
            identities[idx] = identity
            cameras[idx] = camera
            if j < spec.eval_rounds * spec.num_cameras:
                (query if camera == 0 else gallery).append(idx)
            else:
                train.append(idx)
            idx += 1
    return SyntheticDataset(
        spec=spec,
        images=images,
        identities=identities,
        cameras=cameras,
        train_indices=np.asarray(train, dtype=np.int64),
        query_indices=np.asarray(query, dtype=np.int64),
        gallery_indices=np.asarray(gallery, dtype=np.int64),
    )


def desk_synth_spec(**overrides) -> SynthSpec:
    """Dataset matching the desk-scale training configuration."""
    defaults = dict(
        num_identities=32,
        images_per_identity=16,
        num_cameras=4,
        image_height=64,
        image_width=32,
        noise_level=0.05,
        camera_shift=0.08,
        pose_jitter=0.2,
        eval_rounds=2,
    )
    defaults.update(overrides)
    return SynthSpec(**defaults)
