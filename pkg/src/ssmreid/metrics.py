"""Exact ranking statistics and retrieval evaluation.

Evaluation follows the standard re-identification protocol: per query, the
gallery is ranked by descending cosine similarity, entries sharing both
identity and camera with the query are excluded, and average precision plus
the first-match rank are accumulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _as_1d(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D sequence, got shape {arr.shape}")
    return arr


def ktau_exact(x, y) -> float:
    """Kendall rank correlation: mean over pairs of sign(dx) * sign(dy)."""
    xs, ys = _as_1d(x), _as_1d(y)
    if xs.shape != ys.shape:
        raise ValueError("sequences must have equal length")
    n = len(xs)
    if n < 2:
        raise ValueError("sequences must have length >= 2")
    sx = np.sign(xs[:, None] - xs[None, :])
    sy = np.sign(ys[:, None] - ys[None, :])
    upper = np.triu_indices(n, k=1)
    return float((sx[upper] * sy[upper]).sum() / math.comb(n, 2))


def average_precision(ranked_relevance) -> float:
    """Mean over relevant positions of precision at that position."""
    rel = np.asarray(ranked_relevance, dtype=bool)
    if rel.ndim != 1:
        raise ValueError("relevance must be a 1-D sequence")
    num_rel = int(rel.sum())
    if num_rel == 0:
        raise ValueError("no relevant entries")
    hits = rel.cumsum()
    precision_at = hits[rel] / (np.flatnonzero(rel) + 1)
    return float(precision_at.sum() / num_rel)


def _normalized(features: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{what} features must be 2-D")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError(f"zero-norm row in {what} features")
    return arr / norms


@dataclass
class RankedGallery:
    """Query and gallery feature sets with identity and camera labels."""

    query_features: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_features: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray

    def __post_init__(self) -> None:
        nq = len(self.query_ids)
        ng = len(self.gallery_ids)
        if len(self.query_features) != nq or len(self.query_cams) != nq:
            raise ValueError("query arrays disagree in length")
        if len(self.gallery_features) != ng or len(self.gallery_cams) != ng:
            raise ValueError("gallery arrays disagree in length")


@dataclass
class RetrievalMetrics:
    mean_ap: float
    cmc: dict[int, float]
    num_queries: int
    num_excluded: int

    def csv_row(self) -> dict[str, float]:
        row = {"mAP": self.mean_ap}
        row.update({f"r{k}": v for k, v in self.cmc.items()})
        row["excluded"] = self.num_excluded
        return row


def evaluate_map_cmc(
    gallery: RankedGallery, ranks: tuple[int, ...] = (1, 5, 10)
) -> RetrievalMetrics:
    """Mean average precision and CMC at the requested ranks.

    Ties in similarity are broken by gallery index (stable sort).  Queries
    with no valid match after the same-camera exclusion are skipped and
    counted in ``num_excluded``.
    """
    qf = _normalized(gallery.query_features, "query")
    gf = _normalized(gallery.gallery_features, "gallery")
    sims = qf @ gf.T
    order = np.argsort(-sims, axis=1, kind="stable")
    aps: list[float] = []
    first_hit: list[int] = []
    excluded = 0
    for qi in range(len(qf)):
        ranked = order[qi]
        ranked_ids = gallery.gallery_ids[ranked]
        ranked_cams = gallery.gallery_cams[ranked]
        keep = ~(
            (ranked_ids == gallery.query_ids[qi])
            & (ranked_cams == gallery.query_cams[qi])
        )
        relevance = ranked_ids[keep] == gallery.query_ids[qi]
        if not relevance.any():
            excluded += 1
            continue
        aps.append(average_precision(relevance))
        first_hit.append(int(np.flatnonzero(relevance)[0]))
    if not aps:
        raise ValueError("no query has a valid gallery match")
    hits = np.asarray(first_hit)
    cmc = {k: float((hits < k).mean()) for k in ranks}
    return RetrievalMetrics(
        mean_ap=float(np.mean(aps)),
        cmc=cmc,
        num_queries=len(aps),
        num_excluded=excluded,
    )


@dataclass
class DiversityReport:
    """Mean exact rank correlation between branch pairs, per constraint kind."""

    intra: float
    inter: float
    num_intra_anchors: int
    num_inter_anchors: int


def _to_numpy_features(branch_features) -> list[np.ndarray]:
    out = []
    for f in branch_features:
        if hasattr(f, "detach"):
            f = f.detach().cpu().numpy()
        out.append(np.asarray(f, dtype=np.float64))
    return out


def branch_diversity_report(branch_features, labels) -> DiversityReport:
    """Exact-sign analogue of the diversity constraints, for evaluation only.

    For every anchor, the positive-similarity sequence (intra) and the
    negative-class-centroid similarity sequence (inter) are compared across
    all branch pairs with the exact rank correlation; anchors whose sequence
    is shorter than 2 are skipped.
    """
    feats = _to_numpy_features(branch_features)
    if len(feats) < 2:
        raise ValueError("diversity report needs at least 2 branches")
    labels = np.asarray(labels)
    num = len(labels)
    classes = np.unique(labels)
    units = [_normalized(f, f"branch {g}") for g, f in enumerate(feats)]
    sims = [u @ u.T for u in units]
    centroid_sims = []
    for u, f in zip(units, feats):
        centroids = np.stack([f[labels == c].mean(axis=0) for c in classes])
        centroid_sims.append(u @ _normalized(centroids, "centroid").T)

    pairs = [
        (i, j) for i in range(len(feats)) for j in range(i + 1, len(feats))
    ]
    intra_vals: list[float] = []
    inter_vals: list[float] = []
    intra_anchors = 0
    inter_anchors = 0
    for k in range(num):
        pos = np.flatnonzero((labels == labels[k]) & (np.arange(num) != k))
        if len(pos) >= 2:
            intra_anchors += 1
            for i, j in pairs:
                intra_vals.append(ktau_exact(sims[i][k, pos], sims[j][k, pos]))
        neg_classes = np.flatnonzero(classes != labels[k])
        if len(neg_classes) >= 2:
            inter_anchors += 1
            for i, j in pairs:
                inter_vals.append(
                    ktau_exact(
                        centroid_sims[i][k, neg_classes],
                        centroid_sims[j][k, neg_classes],
                    )
                )
    if not intra_vals:
        raise ValueError("no anchor has >= 2 positives; intra diversity undefined")
    if not inter_vals:
        raise ValueError("fewer than 3 identities; inter diversity undefined")
    return DiversityReport(
        intra=float(np.mean(intra_vals)),
        inter=float(np.mean(inter_vals)),
        num_intra_anchors=intra_anchors,
        num_inter_anchors=inter_anchors,
    )
