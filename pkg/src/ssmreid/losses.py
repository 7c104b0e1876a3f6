"""Training objectives: BNNeck heads, smoothed ID loss, batch-hard triplet
loss, and the ranking-diversity regularizer built from a differentiable
Kendall rank correlation.

The regularizer compares, across branch pairs, how each branch ranks an
anchor's positives (intra-class term) and the centroids of its negative
classes (inter-class term); minimizing the correlation pushes the branches to
order neighbors differently.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

logger = logging.getLogger(__name__)


class BnNeckHead(nn.Module):
    """Batch-normalization neck with a bias-free classifier.

    The metric loss consumes the raw feature; the classifier consumes the
    batch-normalized one.  Running statistics update only in training mode;
    eval mode before any training step uses the initialized statistics.
    """

    def __init__(self, feature_dim: int, num_classes: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.bn = nn.BatchNorm1d(feature_dim, dtype=dtype)
        self.classifier = nn.Linear(feature_dim, num_classes, bias=False, dtype=dtype)
        nn.init.normal_(self.classifier.weight, std=0.001)

    def forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        bn_features = self.bn(features)
        return bn_features, self.classifier(bn_features)


def bnneck_apply(features: Tensor, head: BnNeckHead) -> tuple[Tensor, Tensor]:
    return head(features)


def id_loss(logits: Tensor, labels: Tensor, smoothing: float = 0.1) -> Tensor:
    """Cross entropy against a label-smoothed target distribution.

    The true class receives 1 - smoothing; the remaining mass is spread
    uniformly over the other C - 1 classes.
    """
    if not 0 <= smoothing < 1:
        raise ValueError("smoothing must be in [0, 1)")
    num_classes = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("label out of range")
    if num_classes < 2 and smoothing > 0:
        raise ValueError("smoothing needs at least 2 classes")
    log_probs = F.log_softmax(logits, dim=-1)
    true_logp = log_probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    if smoothing == 0:
        return -true_logp.mean()
    rest_logp = log_probs.sum(dim=-1) - true_logp
    per_sample = (1.0 - smoothing) * true_logp + smoothing / (num_classes - 1) * rest_logp
    return -per_sample.mean()


def pairwise_distances(features: Tensor) -> Tensor:
    """Euclidean distance matrix with a clamped sqrt for gradient stability."""
    sq = (features * features).sum(dim=-1)
    d2 = sq.unsqueeze(-1) + sq.unsqueeze(-2) - 2.0 * features @ features.transpose(-1, -2)
    return torch.sqrt(d2.clamp(min=1e-12))


def _check_pk_structure(labels: Tensor) -> tuple[Tensor, int, int]:
    """Return (sorted distinct labels, P, K); labels must be exactly P x K."""
    classes, counts = torch.unique(labels, return_counts=True)
    if classes.numel() < 2:
        raise ValueError("batch needs at least 2 identities")
    if counts.min() < 2:
        raise ValueError("every identity needs at least 2 instances")
    if (counts != counts[0]).any():
        raise ValueError("batch is not P x K structured: unequal identity counts")
    return classes, int(classes.numel()), int(counts[0])


def batch_hard_triplet(features: Tensor, labels: Tensor, margin: float = 1.2) -> Tensor:
    """Hinge on hardest-positive minus hardest-negative distance per anchor."""
    _check_pk_structure(labels)
    dist = pairwise_distances(features)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    hardest_pos = dist.masked_fill(~pos_mask, -torch.inf).amax(dim=1)
    hardest_neg = dist.masked_fill(~neg_mask, torch.inf).amin(dim=1)
    return F.relu(hardest_pos - hardest_neg + margin).mean()


def cosine_similarity_matrix(features: Tensor) -> Tensor:
    """Row-wise cosine similarities; rejects zero-norm rows."""
    norms = features.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("zero-norm feature row")
    unit = features / norms
    sims = unit @ unit.transpose(-1, -2)
    return 0.5 * (sims + sims.transpose(-1, -2))


def dktau(x: Tensor, y: Tensor, tau: float) -> Tensor:
    """Differentiable Kendall correlation: sign replaced by tanh(. / tau).

    Supports batched inputs of shape (..., B); the correlation is computed
    over the last dimension.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if x.shape != y.shape:
        raise ValueError("sequences must have equal length")
    length = x.shape[-1]
    if length < 2:
        raise ValueError("sequences must have length >= 2")
    dx = torch.tanh((x.unsqueeze(-1) - x.unsqueeze(-2)) / tau)
    dy = torch.tanh((y.unsqueeze(-1) - y.unsqueeze(-2)) / tau)
    # each unordered pair appears twice with the same product; the diagonal is 0
    pair_sum = (dx * dy).sum(dim=(-1, -2)) / 2.0
    return pair_sum / math.comb(length, 2)


def class_centroids(features: Tensor, labels: Tensor) -> tuple[Tensor, Tensor]:
    """Per-class mean features, classes in ascending label order."""
    classes = torch.unique(labels)
    centroids = torch.stack(
        [features[labels == c].mean(dim=0) for c in classes], dim=0
    )
    return classes, centroids


def negative_centroid_similarities(
    features: Tensor, labels: Tensor, anchor: int
) -> Tensor:
    """Cosine similarity of one anchor to each negative-class centroid.

    Classes are ordered by ascending label, so the sequence is comparable
    across branches.
    """
    classes, centroids = class_centroids(features, labels)
    if classes.numel() < 2:
        raise ValueError("need at least 2 identities for negative centroids")
    keep = classes != labels[anchor]
    anchor_f = features[anchor]
    sims = F.cosine_similarity(anchor_f.unsqueeze(0), centroids[keep], dim=-1)
    return sims


def _all_negative_centroid_similarities(features: Tensor, labels: Tensor) -> Tensor:
    """(PK, P-1) matrix of anchor-to-negative-centroid cosine similarities."""
    classes, centroids = class_centroids(features, labels)
    num_classes = classes.numel()
    unit_f = features / features.norm(dim=-1, keepdim=True)
    unit_c = centroids / centroids.norm(dim=-1, keepdim=True)
    sims = unit_f @ unit_c.T  # (PK, P)
    own = labels.unsqueeze(1) == classes.unsqueeze(0)
    return sims[~own].reshape(len(labels), num_classes - 1)


@dataclass
class SimilarityView:
    """Per-branch similarity structure for one P x K minibatch."""

    sim: Tensor  # (PK, PK) cosine similarities
    positive_indices: Tensor = field(repr=False)  # (PK, K-1) long
    negative_centroid_sim: Tensor = field(repr=False)  # (PK, P-1)

    @property
    def positive_sims(self) -> Tensor:
        return self.sim.gather(1, self.positive_indices)


def build_similarity_views(
    branch_features: list[Tensor], labels: Tensor
) -> list[SimilarityView]:
    """Build one SimilarityView per branch over shared labels."""
    _, p, k = _check_pk_structure(labels)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos_mask = same & ~eye
    pos_indices = pos_mask.nonzero(as_tuple=False)[:, 1].reshape(len(labels), k - 1)
    views = []
    for features in branch_features:
        views.append(
            SimilarityView(
                sim=cosine_similarity_matrix(features),
                positive_indices=pos_indices,
                negative_centroid_sim=_all_negative_centroid_similarities(
                    features, labels
                ),
            )
        )
    return views


@dataclass(frozen=True)
class RatrConfig:
    tau: float = 0.1
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")


def _pair_mean(views: list[SimilarityView], sequences: list[Tensor], tau: float) -> Tensor:
    """Mean over anchors of the branch-pair sum of dktau, / C(G, 2)."""
    num_branches = len(views)
    total = sequences[0].new_zeros(())
    for i in range(num_branches):
        for j in range(i + 1, num_branches):
            total = total + dktau(sequences[i], sequences[j], tau).mean()
    return total / math.comb(num_branches, 2)


def ratr_intra(views: list[SimilarityView], cfg: RatrConfig) -> Tensor:
    """Intra-class ranking-agreement penalty across branch pairs.

    With a single branch there are no pairs and the result is 0; with K = 2
    the positive sequences have length 1 and carry no ranking, contributing 0.
    """
    if len(views) < 2:
        return views[0].sim.new_zeros(()) if views else torch.zeros(())
    k_minus_1 = views[0].positive_indices.shape[1]
    if k_minus_1 < 1:
        raise ValueError("intra diversity undefined: no positives per anchor")
    if k_minus_1 < 2:
        return views[0].sim.new_zeros(())
    return _pair_mean(views, [v.positive_sims for v in views], cfg.tau)


def ratr_inter(views: list[SimilarityView], cfg: RatrConfig) -> Tensor:
    """Inter-class ranking-agreement penalty over negative-class centroids."""
    if len(views) < 2:
        return views[0].sim.new_zeros(()) if views else torch.zeros(())
    p_minus_1 = views[0].negative_centroid_sim.shape[1]
    if p_minus_1 < 2:
        raise ValueError("inter diversity undefined (sequence too short)")
    return _pair_mean(views, [v.negative_centroid_sim for v in views], cfg.tau)


def ratr(views: list[SimilarityView], cfg: RatrConfig) -> Tensor:
    return ratr_intra(views, cfg) + ratr_inter(views, cfg)


@dataclass
class LossBreakdown:
    """Detached per-term values for logging and the metrics CSV."""

    id_terms: list[float]
    triplet_terms: list[float]
    ratr_intra: float
    ratr_inter: float
    total: float

    @property
    def id_mean(self) -> float:
        return sum(self.id_terms) / len(self.id_terms)

    @property
    def triplet_mean(self) -> float:
        return sum(self.triplet_terms) / len(self.triplet_terms)

    def records(self) -> list[tuple[str, int | None, float]]:
        rows: list[tuple[str, int | None, float]] = []
        for g, value in enumerate(self.id_terms):
            rows.append(("id", g, value))
        for g, value in enumerate(self.triplet_terms):
            rows.append(("triplet", g, value))
        rows.append(("ratr_intra", None, self.ratr_intra))
        rows.append(("ratr_inter", None, self.ratr_inter))
        rows.append(("total", None, self.total))
        return rows


def total_loss(
    bundle,
    labels: Tensor,
    *,
    margin: float = 1.2,
    smoothing: float = 0.1,
    ratr_cfg: RatrConfig | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Mean of per-branch supervised losses plus the weighted diversity term.

    ``bundle`` is a FeatureBundle over a P x K batch; the triplet loss and the
    diversity term consume the raw (pre-BN) branch features.
    """
    cfg = ratr_cfg or RatrConfig(weight=0.0)
    num_branches = len(bundle.features)
    id_terms = [id_loss(logits, labels, smoothing) for logits in bundle.logits]
    tri_terms = [
        batch_hard_triplet(f, labels, margin) for f in bundle.features
    ]
    supervised = (
        torch.stack(id_terms).sum() + torch.stack(tri_terms).sum()
    ) / num_branches
    if cfg.weight > 0:
        views = build_similarity_views(bundle.features, labels)
        intra = ratr_intra(views, cfg)
        inter = ratr_inter(views, cfg)
        loss = supervised + cfg.weight * (intra + inter)
    else:
        intra = supervised.new_zeros(())
        inter = supervised.new_zeros(())
        loss = supervised
    breakdown = LossBreakdown(
        id_terms=[float(t.detach()) for t in id_terms],
        triplet_terms=[float(t.detach()) for t in tri_terms],
        ratr_intra=float(intra.detach()),
        ratr_inter=float(inter.detach()),
        total=float(loss.detach()),
    )
    for name, branch, value in breakdown.records():
        logger.debug("loss term=%s branch=%s value=%.9g", name, branch, value)
    return loss, breakdown
