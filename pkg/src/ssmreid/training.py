"""Training harness: PK sampling, augmentation, schedule, loop, inference."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .losses import LossBreakdown, RatrConfig, total_loss
from .metrics import (
    DiversityReport,
    RankedGallery,
    RetrievalMetrics,
    branch_diversity_report,
    evaluate_map_cmc,
)
from .mgfe import ReidModel, build_model, l2_normalize
from .synth import SyntheticDataset

logger = logging.getLogger(__name__)

PAD_PIXELS = 10
ERASE_PROB = 0.5
ERASE_AREA = (0.02, 0.4)
ERASE_ASPECT = (0.3, 3.3)
FLIP_PROB = 0.5

CSV_HEADER = [
    "step",
    "lr",
    "loss_total",
    "loss_id",
    "loss_tri",
    "loss_ratr_intra",
    "loss_ratr_inter",
    "mAP",
    "r1",
    "ktau_intra",
    "ktau_inter",
]


class TrainingDivergedError(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the breakdown."""

    def __init__(self, step: int, breakdown: LossBreakdown):
        super().__init__(
            f"non-finite loss at step {step}: "
            + "; ".join(f"{n}[{b}]={v!r}" for n, b, v in breakdown.records())
        )
        self.step = step
        self.breakdown = breakdown


def pk_sample(
    identity_to_indices: dict[int, np.ndarray],
    p: int,
    k: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """One P x K batch of dataset indices: P identities, K instances each.

    Instances are drawn without replacement when an identity has at least K
    images, with replacement otherwise.
    """
    identities = sorted(identity_to_indices)
    if len(identities) < p:
        raise ValueError(f"need {p} identities, dataset has {len(identities)}")
    chosen = rng.choice(len(identities), size=p, replace=False)
    batch = []
    for ci in chosen:
        pool = identity_to_indices[identities[ci]]
        replace = len(pool) < k
        batch.append(rng.choice(pool, size=k, replace=replace))
    return np.concatenate(batch)


class PKSampler:
    """Yields P x K batches, consuming each identity's pool without
    replacement across an epoch where possible."""

    def __init__(self, labels: np.ndarray, indices: np.ndarray, p: int, k: int,
                 rng: np.random.Generator):
        self.p = p
        self.k = k
        self.rng = rng
        self.pools: dict[int, np.ndarray] = {
            int(identity): indices[labels[indices] == identity]
            for identity in np.unique(labels[indices])
        }
        if len(self.pools) < p:
            raise ValueError(f"need {p} identities, got {len(self.pools)}")
        if min(len(v) for v in self.pools.values()) < 1:
            raise ValueError("every identity needs at least one training image")
        self._cursors: dict[int, list[int]] = {}

    def _draw(self, identity: int) -> list[int]:
        queue = self._cursors.setdefault(identity, [])
        out = []
        pool = self.pools[identity]
        while len(out) < self.k:
            if not queue:
                queue.extend(self.rng.permutation(len(pool)).tolist())
            out.append(int(pool[queue.pop()]))
        return out

    def next_batch(self) -> np.ndarray:
        identities = sorted(self.pools)
        chosen = self.rng.choice(len(identities), size=self.p, replace=False)
        batch = []
        for ci in chosen:
            batch.extend(self._draw(identities[ci]))
        return np.asarray(batch, dtype=np.int64)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base rate, then half-cosine decay to zero."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup, total = cfg.warmup_steps, cfg.total_steps
    if step >= total:
        return 0.0
    if warmup > 0 and step < warmup:
        frac = step / warmup
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac
    progress = (step - warmup) / (total - warmup)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def augment_batch(
    images: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> np.ndarray:
    """Horizontal flip, zero-pad + random crop, and random erasing."""
    out = images.copy()
    h, w = out.shape[1:3]
    for i in range(len(out)):
        if cfg.flip_aug and rng.random() < FLIP_PROB:
            out[i] = out[i, :, ::-1].copy()
        if cfg.crop_aug:
            padded = np.zeros((h + 2 * PAD_PIXELS, w + 2 * PAD_PIXELS, 3))
            padded[PAD_PIXELS : PAD_PIXELS + h, PAD_PIXELS : PAD_PIXELS + w] = out[i]
            top = rng.integers(0, 2 * PAD_PIXELS + 1)
            left = rng.integers(0, 2 * PAD_PIXELS + 1)
            out[i] = padded[top : top + h, left : left + w]
        if cfg.erase_aug and rng.random() < ERASE_PROB:
            area = rng.uniform(*ERASE_AREA) * h * w
            aspect = rng.uniform(*ERASE_ASPECT)
            eh = min(h, max(1, int(round(math.sqrt(area * aspect)))))
            ew = min(w, max(1, int(round(math.sqrt(area / aspect)))))
            top = rng.integers(0, h - eh + 1)
            left = rng.integers(0, w - ew + 1)
            out[i, top : top + eh, left : left + ew] = rng.uniform(size=(eh, ew, 3))
    return out


def train_step(
    model: ReidModel,
    images: Tensor,
    camera_ids: Tensor,
    labels: Tensor,
    optimizer: torch.optim.Optimizer,
    step: int,
    cfg: TrainConfig,
    rng: torch.Generator | None = None,
) -> LossBreakdown:
    """One SGD step at the scheduled learning rate; returns the loss terms."""
    lr = lr_schedule(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    bundle = model(images, camera_ids, rng=rng)
    loss, breakdown = total_loss(
        bundle,
        labels,
        margin=cfg.margin,
        smoothing=cfg.label_smoothing,
        ratr_cfg=RatrConfig(tau=cfg.ratr_tau, weight=cfg.ratr_weight),
    )
    if not math.isfinite(breakdown.total):
        raise TrainingDivergedError(step, breakdown)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return breakdown


def infer_branch_features(
    model: ReidModel, images: Tensor, camera_ids: Tensor
) -> list[Tensor]:
    """Flip-averaged, L2-normalized feature per branch, in branch order."""
    model.eval()
    with torch.no_grad():
        direct = model.branch_features(images, camera_ids)
        mirrored = model.branch_features(images.flip(-2), camera_ids)
    return [l2_normalize((a + b) / 2.0) for a, b in zip(direct, mirrored)]


def infer_features(model: ReidModel, images: Tensor, camera_ids: Tensor) -> Tensor:
    """Concatenation of all branch features; each segment has unit norm."""
    return torch.cat(infer_branch_features(model, images, camera_ids), dim=-1)


@dataclass
class EvalResult:
    retrieval: RetrievalMetrics
    diversity: DiversityReport | None


def _to_tensor(images: np.ndarray, dtype: torch.dtype) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).to(dtype)


def evaluate_model(
    model: ReidModel,
    dataset: SyntheticDataset,
    ranks: tuple[int, ...] = (1, 5, 10),
    batch_size: int = 64,
) -> EvalResult:
    """Retrieval metrics on the query/gallery split plus branch diversity."""
    eval_indices = np.concatenate([dataset.query_indices, dataset.gallery_indices])
    per_branch: list[list[np.ndarray]] = [[] for _ in model.branches]
    for start in range(0, len(eval_indices), batch_size):
        chunk = eval_indices[start : start + batch_size]
        images = _to_tensor(dataset.images[chunk], model.dtype)
        cams = torch.from_numpy(dataset.cameras[chunk])
        feats = infer_branch_features(model, images, cams)
        for g, f in enumerate(feats):
            per_branch[g].append(f.numpy())
    branch_feats = [np.concatenate(parts) for parts in per_branch]
    concat = np.concatenate(branch_feats, axis=1)
    nq = len(dataset.query_indices)
    gallery = RankedGallery(
        query_features=concat[:nq],
        query_ids=dataset.identities[dataset.query_indices],
        query_cams=dataset.cameras[dataset.query_indices],
        gallery_features=concat[nq:],
        gallery_ids=dataset.identities[dataset.gallery_indices],
        gallery_cams=dataset.cameras[dataset.gallery_indices],
    )
    retrieval = evaluate_map_cmc(gallery, ranks)
    diversity = None
    if len(model.branches) >= 2:
        diversity = branch_diversity_report(
            branch_feats, dataset.identities[eval_indices]
        )
    return EvalResult(retrieval=retrieval, diversity=diversity)


@dataclass
class TrainResult:
    model: ReidModel
    loss_history: list[LossBreakdown]
    final_eval: EvalResult
    csv_path: Path | None = None
    checkpoint_path: Path | None = None
    wall_seconds: float = 0.0


def train(
    cfg: TrainConfig,
    dataset: SyntheticDataset,
    out_dir: str | Path | None = None,
    dtype: torch.dtype = torch.float64,
) -> TrainResult:
    """Deterministic training loop over P x K batches of the train split.

    Writes a per-step metrics CSV and a final checkpoint when ``out_dir`` is
    given.  All randomness (init, sampling, augmentation, stochastic depth)
    derives from ``cfg.seed``.
    """
    start_time = time.perf_counter()
    train_identities = np.unique(dataset.identities[dataset.train_indices])
    relabel = {int(identity): i for i, identity in enumerate(train_identities)}
    num_classes = len(train_identities)

    model = build_model(cfg.model, num_classes, seed=cfg.seed, dtype=dtype)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=cfg.warmup_start_lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    sampler = PKSampler(
        dataset.identities,
        dataset.train_indices,
        cfg.batch_p,
        cfg.batch_k,
        np.random.default_rng(np.random.SeedSequence([cfg.seed, 100])),
    )
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    depth_rng = torch.Generator().manual_seed(cfg.seed + 202)

    rows: list[dict[str, object]] = []
    history: list[LossBreakdown] = []
    for step in range(cfg.total_steps):
        indices = sampler.next_batch()
        images = augment_batch(dataset.images[indices], cfg, aug_rng)
        batch = _to_tensor(images, dtype)
        cams = torch.from_numpy(dataset.cameras[indices])
        labels = torch.tensor(
            [relabel[int(i)] for i in dataset.identities[indices]], dtype=torch.long
        )
        breakdown = train_step(
            model, batch, cams, labels, optimizer, step, cfg, rng=depth_rng
        )
        history.append(breakdown)
        row: dict[str, object] = {
            "step": step,
            "lr": lr_schedule(step, cfg),
            "loss_total": breakdown.total,
            "loss_id": breakdown.id_mean,
            "loss_tri": breakdown.triplet_mean,
            "loss_ratr_intra": breakdown.ratr_intra,
            "loss_ratr_inter": breakdown.ratr_inter,
            "mAP": "",
            "r1": "",
            "ktau_intra": "",
            "ktau_inter": "",
        }
        is_last = step == cfg.total_steps - 1
        if is_last or (cfg.eval_every > 0 and (step + 1) % cfg.eval_every == 0):
            result = evaluate_model(model, dataset)
            row["mAP"] = result.retrieval.mean_ap
            row["r1"] = result.retrieval.cmc.get(1, "")
            if result.diversity is not None:
                row["ktau_intra"] = result.diversity.intra
                row["ktau_inter"] = result.diversity.inter
            logger.info(
                "step %d: loss=%.4f mAP=%.4f r1=%s",
                step,
                breakdown.total,
                result.retrieval.mean_ap,
                row["r1"],
            )
            if is_last:
                final_eval = result
        rows.append(row)

    csv_path = checkpoint_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_HEADER)
            writer.writeheader()
            writer.writerows(rows)
        checkpoint_path = out / "model.ckpt"
        save_checkpoint(model, checkpoint_path)
    return TrainResult(
        model=model,
        loss_history=history,
        final_eval=final_eval,
        csv_path=csv_path,
        checkpoint_path=checkpoint_path,
        wall_seconds=time.perf_counter() - start_time,
    )
