import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmreid.losses import (
    BnNeckHead,
    RatrConfig,
    SimilarityView,
    batch_hard_triplet,
    bnneck_apply,
    build_similarity_views,
    cosine_similarity_matrix,
    dktau,
    id_loss,
    negative_centroid_similarities,
    ratr,
    ratr_inter,
    ratr_intra,
    total_loss,
)
from ssmreid.metrics import ktau_exact
from oracles import (
    brute_force_cosine_matrix,
    brute_force_dktau,
    brute_force_ratr,
    cosine,
    exhaustive_batch_hard_triplet,
)


class TestBnNeck:
    def test_constant_batch_centers_to_zero(self):
        torch.manual_seed(0)
        head = BnNeckHead(6, 3)
        head.train()
        batch = torch.ones(8, 6, dtype=torch.float64) * 2.5
        bn, _ = bnneck_apply(batch, head)
        assert bn.abs().max() < 1e-6

    def test_matches_standardization_oracle(self):
        torch.manual_seed(1)
        head = BnNeckHead(4, 3)
        head.train()
        batch = torch.randn(16, 4, dtype=torch.float64)
        bn, logits = head(batch)
        mean = batch.mean(0)
        var = batch.var(0, unbiased=False)
        standardized = (batch - mean) / torch.sqrt(var + head.bn.eps)
        assert torch.allclose(bn, standardized, atol=1e-10)
        assert torch.allclose(logits, standardized @ head.classifier.weight.T, atol=1e-10)

    def test_eval_uses_frozen_stats_deterministically(self):
        torch.manual_seed(2)
        head = BnNeckHead(4, 3)
        head.train()
        for _ in range(3):
            head(torch.randn(8, 4, dtype=torch.float64))
        head.eval()
        x = torch.randn(5, 4, dtype=torch.float64)
        a, _ = head(x)
        b, _ = head(x)
        assert torch.equal(a, b)

    def test_eval_before_training_is_defined(self):
        head = BnNeckHead(4, 3)
        head.eval()
        bn, logits = head(torch.randn(2, 4, dtype=torch.float64))
        assert torch.isfinite(bn).all() and torch.isfinite(logits).all()


class TestIdLoss:
    def test_peaked_logits_zero_loss(self):
        logits = torch.full((4, 5), -50.0, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 3])
        for i, l in enumerate(labels):
            logits[i, l] = 50.0
        assert id_loss(logits, labels, smoothing=0.0) < 1e-9

    @pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
    def test_uniform_logits_log_c(self, eps):
        logits = torch.zeros(6, 7, dtype=torch.float64)
        labels = torch.randint(0, 7, (6,))
        assert abs(id_loss(logits, labels, eps) - math.log(7)) < 1e-12

    def test_hand_computed_three_classes(self):
        logits = torch.tensor([[2.0, 0.5, -1.0]], dtype=torch.float64)
        labels = torch.tensor([1])
        eps = 0.1
        logp = torch.log_softmax(logits, dim=-1)[0]
        expected = -(0.9 * logp[1] + 0.05 * logp[0] + 0.05 * logp[2])
        assert abs(id_loss(logits, labels, eps) - expected) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            id_loss(torch.zeros(2, 3, dtype=torch.float64), torch.tensor([0, 3]))

    def test_bad_smoothing(self):
        with pytest.raises(ValueError):
            id_loss(torch.zeros(2, 3, dtype=torch.float64), torch.tensor([0, 1]), 1.0)


class TestBatchHardTriplet:
    def test_separated_clusters_zero(self):
        f = torch.tensor(
            [[0.0, 0.0], [0.1, 0.0], [100.0, 0.0], [100.1, 0.0]],
            dtype=torch.float64,
        )
        labels = torch.tensor([0, 0, 1, 1])
        assert batch_hard_triplet(f, labels, margin=1.2) == 0.0

    def test_identical_features_equal_margin(self):
        f = torch.ones(6, 3, dtype=torch.float64)
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        loss = batch_hard_triplet(f, labels, margin=1.2)
        assert abs(loss.item() - 1.2) < 1e-12

    def test_hand_placed_points_match_exhaustive_oracle(self):
        f = torch.tensor(
            [[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.5, 1.5]], dtype=torch.float64
        )
        labels = torch.tensor([0, 0, 1, 1])
        got = batch_hard_triplet(f, labels, margin=1.2).item()
        want = exhaustive_batch_hard_triplet(f.numpy(), labels.numpy(), 1.2)
        assert abs(got - want) < 1e-9

    def test_random_instances_match_oracle(self):
        torch.manual_seed(3)
        for _ in range(10):
            f = torch.randn(12, 5, dtype=torch.float64)
            labels = torch.tensor(sum([[i] * 3 for i in range(4)], []))
            got = batch_hard_triplet(f, labels, margin=0.7).item()
            want = exhaustive_batch_hard_triplet(f.numpy(), labels.numpy(), 0.7)
            assert abs(got - want) < 1e-9

    def test_rejects_degenerate_batches(self):
        f = torch.randn(3, 2, dtype=torch.float64)
        with pytest.raises(ValueError):
            batch_hard_triplet(f, torch.tensor([0, 0, 0]), 1.0)
        with pytest.raises(ValueError):
            batch_hard_triplet(f, torch.tensor([0, 0, 1]), 1.0)

    def test_zero_gradient_when_margins_satisfied(self):
        f = torch.tensor(
            [[0.0, 0.0], [0.1, 0.0], [50.0, 0.0], [50.1, 0.0]],
            dtype=torch.float64,
            requires_grad=True,
        )
        labels = torch.tensor([0, 0, 1, 1])
        loss = batch_hard_triplet(f, labels, margin=1.0)
        loss.backward()
        assert loss.item() == 0.0
        assert torch.all(f.grad == 0)


class TestCosineSimilarity:
    def test_identical_rows_all_ones(self):
        f = torch.ones(4, 3, dtype=torch.float64)
        assert torch.allclose(
            cosine_similarity_matrix(f), torch.ones(4, 4, dtype=torch.float64)
        )

    def test_orthogonal_rows_identity(self):
        f = torch.eye(3, dtype=torch.float64)
        assert torch.allclose(
            cosine_similarity_matrix(f), torch.eye(3, dtype=torch.float64), atol=1e-15
        )

    def test_matches_brute_force(self):
        torch.manual_seed(4)
        f = torch.randn(6, 4, dtype=torch.float64)
        got = cosine_similarity_matrix(f).numpy()
        want = brute_force_cosine_matrix(f.numpy())
        assert np.abs(got - want).max() < 1e-12

    def test_symmetric_unit_diagonal(self):
        torch.manual_seed(5)
        f = torch.randn(5, 3, dtype=torch.float64)
        s = cosine_similarity_matrix(f)
        assert torch.equal(s, s.T)
        assert torch.allclose(s.diagonal(), torch.ones(5, dtype=torch.float64))

    def test_zero_row_rejected(self):
        f = torch.zeros(2, 3, dtype=torch.float64)
        with pytest.raises(ValueError, match="zero-norm"):
            cosine_similarity_matrix(f)


class TestDktau:
    def test_constant_x_gives_zero(self):
        x = torch.ones(5, dtype=torch.float64)
        y = torch.randn(5, dtype=torch.float64)
        assert dktau(x, y, tau=0.1).item() == 0.0

    def test_saturated_agreement_near_one(self):
        x = torch.arange(5, dtype=torch.float64) * 2.0  # gaps of 2 = 20 tau
        assert abs(dktau(x, x, tau=0.1).item() - 1.0) < 1e-6

    def test_tiny_tau_matches_exact(self):
        torch.manual_seed(6)
        for _ in range(10):
            x = torch.randn(7, dtype=torch.float64)
            y = torch.randn(7, dtype=torch.float64)
            approx = dktau(x, y, tau=1e-4).item()
            exact = ktau_exact(x.numpy(), y.numpy())
            assert abs(approx - exact) < 1e-3

    def test_matches_brute_force(self):
        torch.manual_seed(7)
        x = torch.randn(9, dtype=torch.float64)
        y = torch.randn(9, dtype=torch.float64)
        got = dktau(x, y, tau=0.37).item()
        want = brute_force_dktau(x.numpy(), y.numpy(), 0.37)
        assert abs(got - want) < 1e-12

    def test_batched(self):
        torch.manual_seed(8)
        x = torch.randn(4, 6, dtype=torch.float64)
        y = torch.randn(4, 6, dtype=torch.float64)
        batched = dktau(x, y, tau=0.2)
        for i in range(4):
            assert abs(batched[i].item() - dktau(x[i], y[i], 0.2).item()) < 1e-14

    def test_length_below_two_rejected(self):
        one = torch.tensor([1.0], dtype=torch.float64)
        with pytest.raises(ValueError):
            dktau(one, one, tau=0.1)

    @given(seed=st.integers(0, 10_000), n=st.integers(2, 12))
    @settings(max_examples=100, deadline=None)
    def test_bounded_by_one(self, seed, n):
        torch.manual_seed(seed)
        x = torch.randn(n, dtype=torch.float64)
        y = torch.randn(n, dtype=torch.float64)
        tau = float(torch.rand(1)) * 2 + 1e-3
        assert abs(dktau(x, y, tau).item()) <= 1.0 + 1e-12

    def test_symmetry(self):
        torch.manual_seed(9)
        x = torch.randn(6, dtype=torch.float64)
        y = torch.randn(6, dtype=torch.float64)
        assert torch.equal(dktau(x, y, 0.3), dktau(y, x, 0.3))

    def test_saturated_antisymmetry_under_order_reversal(self):
        x = torch.arange(6, dtype=torch.float64) * 3.0
        y = torch.tensor([5.0, 1.0, 9.0, 2.0, 14.0, 6.0], dtype=torch.float64) * 3.0
        reversed_y = -y  # strictly decreasing transform with gaps >> tau
        forward = dktau(x, y, tau=0.1).item()
        backward = dktau(x, reversed_y, tau=0.1).item()
        assert abs(forward + backward) < 1e-6

    def test_shift_invariance(self):
        torch.manual_seed(10)
        x = torch.randn(7, dtype=torch.float64)
        y = torch.randn(7, dtype=torch.float64)
        assert torch.allclose(dktau(x + 5.0, y, 0.2), dktau(x, y, 0.2), atol=1e-12)

    def test_convergence_bound_at_tau_gap_over_20(self):
        torch.manual_seed(11)
        for _ in range(10):
            x = torch.randperm(8).to(torch.float64) + 0.1 * torch.rand(8, dtype=torch.float64)
            y = torch.randperm(8).to(torch.float64) + 0.1 * torch.rand(8, dtype=torch.float64)
            gaps = []
            for s in (x, y):
                d = (s.unsqueeze(0) - s.unsqueeze(1)).abs()
                gaps.append(d[d > 0].min().item())
            delta = min(gaps)
            tau = delta / 20
            exact = ktau_exact(x.numpy(), y.numpy())
            assert abs(dktau(x, y, tau).item() - exact) < 1e-3


def make_pk_features(g=2, p=3, k=2, dim=5, seed=0):
    torch.manual_seed(seed)
    labels = torch.tensor(sum([[i] * k for i in range(p)], []))
    feats = [torch.randn(p * k, dim, dtype=torch.float64) for _ in range(g)]
    return feats, labels


class TestNegativeCentroids:
    def test_two_classes_single_element(self):
        feats, labels = make_pk_features(g=1, p=2, k=3)
        out = negative_centroid_similarities(feats[0], labels, anchor=0)
        assert out.shape == (1,)

    def test_identical_members_centroid_equals_member(self):
        f = torch.tensor(
            [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], dtype=torch.float64
        )
        labels = torch.tensor([0, 0, 1, 1])
        out = negative_centroid_similarities(f, labels, anchor=0)
        assert abs(out[0].item() - cosine(f[0].numpy(), f[2].numpy())) < 1e-12

    def test_matches_mean_then_cosine_oracle(self):
        feats, labels = make_pk_features(g=1, p=3, k=2, seed=2)
        f = feats[0]
        for anchor in range(6):
            got = negative_centroid_similarities(f, labels, anchor)
            negs = [c for c in (0, 1, 2) if c != labels[anchor]]
            want = [
                cosine(f[anchor].numpy(), f[labels == c].mean(0).numpy()) for c in negs
            ]
            assert np.abs(got.numpy() - np.asarray(want)).max() < 1e-12

    def test_order_is_ascending_class_label(self):
        feats, labels = make_pk_features(g=1, p=4, k=2, seed=3)
        views = build_similarity_views(feats, labels)
        # anchor of class 2: columns must be classes 0, 1, 3 in that order
        anchor = 4
        got = views[0].negative_centroid_sim[anchor]
        direct = negative_centroid_similarities(feats[0], labels, anchor)
        assert torch.allclose(got, direct, atol=1e-12)


class TestRatr:
    def test_single_branch_zero(self):
        feats, labels = make_pk_features(g=1, p=2, k=3)
        views = build_similarity_views(feats, labels)
        cfg = RatrConfig(tau=0.1)
        assert ratr_intra(views, cfg).item() == 0.0
        assert ratr_inter(views, cfg).item() == 0.0

    def test_identical_branches_saturated_intra(self):
        # distinct similarities with gaps >> tau across positives
        torch.manual_seed(13)
        base = torch.randn(8, 6, dtype=torch.float64)
        labels = torch.tensor([0, 0, 0, 0, 1, 1, 1, 1])
        views = build_similarity_views([base, base.clone()], labels)
        value = ratr_intra(views, RatrConfig(tau=1e-4)).item()
        assert abs(value - 1.0) < 1e-6

    def test_identical_branches_saturated_inter(self):
        torch.manual_seed(14)
        base = torch.randn(8, 6, dtype=torch.float64)
        labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
        views = build_similarity_views([base, base.clone()], labels)
        value = ratr_inter(views, RatrConfig(tau=1e-4)).item()
        assert abs(value - 1.0) < 1e-6

    def test_reversed_centroid_sequences_saturated_minus_one(self):
        sim = torch.eye(4, dtype=torch.float64)
        pos = torch.zeros(4, 1, dtype=torch.long)
        seq = torch.tensor(
            [[0.1, 0.4, 0.7], [0.2, 0.5, 0.8], [0.15, 0.45, 0.75], [0.3, 0.6, 0.9]],
            dtype=torch.float64,
        )
        views = [
            SimilarityView(sim=sim, positive_indices=pos, negative_centroid_sim=seq),
            SimilarityView(sim=sim, positive_indices=pos, negative_centroid_sim=-seq),
        ]
        value = ratr_inter(views, RatrConfig(tau=1e-3)).item()
        assert abs(value + 1.0) < 1e-6

    def test_k2_intra_contributes_zero(self):
        feats, labels = make_pk_features(g=2, p=3, k=2)
        views = build_similarity_views(feats, labels)
        assert ratr_intra(views, RatrConfig(tau=0.1)).item() == 0.0

    def test_inter_requires_three_classes(self):
        feats, labels = make_pk_features(g=2, p=2, k=3)
        views = build_similarity_views(feats, labels)
        with pytest.raises(ValueError, match="inter diversity undefined"):
            ratr_inter(views, RatrConfig(tau=0.1))

    def test_intra_matches_double_sum_oracle(self):
        feats, labels = make_pk_features(g=2, p=2, k=3, seed=21)
        views = build_similarity_views(feats, labels)
        got = ratr_intra(views, RatrConfig(tau=0.1)).item()
        want_intra, _ = brute_force_ratr([f.numpy() for f in feats], labels.numpy(), 0.1)
        assert abs(got - want_intra) < 1e-10

    def test_inter_matches_double_sum_oracle(self):
        feats, labels = make_pk_features(g=2, p=4, k=2, seed=22)
        views = build_similarity_views(feats, labels)
        got = ratr_inter(views, RatrConfig(tau=0.1)).item()
        _, want_inter = brute_force_ratr([f.numpy() for f in feats], labels.numpy(), 0.1)
        assert abs(got - want_inter) < 1e-10

    def test_ratr_is_sum_of_components(self):
        feats, labels = make_pk_features(g=3, p=3, k=3, seed=23)
        views = build_similarity_views(feats, labels)
        cfg = RatrConfig(tau=0.2)
        total = ratr(views, cfg).item()
        parts = ratr_intra(views, cfg).item() + ratr_inter(views, cfg).item()
        assert abs(total - parts) < 1e-14

    def test_three_branch_oracle(self):
        feats, labels = make_pk_features(g=3, p=3, k=3, seed=24)
        views = build_similarity_views(feats, labels)
        cfg = RatrConfig(tau=0.15)
        want = brute_force_ratr([f.numpy() for f in feats], labels.numpy(), 0.15)
        assert abs(ratr_intra(views, cfg).item() - want[0]) < 1e-10
        assert abs(ratr_inter(views, cfg).item() - want[1]) < 1e-10


class _Bundle:
    def __init__(self, features, bn_features, logits):
        self.features = features
        self.bn_features = bn_features
        self.logits = logits


def make_bundle(g=2, p=3, k=3, dim=6, classes=3, seed=30):
    torch.manual_seed(seed)
    labels = torch.tensor(sum([[i] * k for i in range(p)], []))
    features = [torch.randn(p * k, dim, dtype=torch.float64) for _ in range(g)]
    logits = [torch.randn(p * k, classes, dtype=torch.float64) for _ in range(g)]
    return _Bundle(features, features, logits), labels


class TestTotalLoss:
    def test_rho_zero_supervised_only(self):
        bundle, labels = make_bundle()
        loss, breakdown = total_loss(
            bundle, labels, margin=1.2, smoothing=0.1, ratr_cfg=RatrConfig(weight=0.0)
        )
        expected = (
            sum(id_loss(l, labels, 0.1) for l in bundle.logits)
            + sum(batch_hard_triplet(f, labels, 1.2) for f in bundle.features)
        ) / 2
        assert abs(loss.item() - expected.item()) < 1e-14
        assert breakdown.ratr_intra == 0.0 and breakdown.ratr_inter == 0.0

    def test_single_branch_rho_zero_is_baseline_loss(self):
        bundle, labels = make_bundle(g=1)
        loss, _ = total_loss(
            bundle, labels, margin=1.2, smoothing=0.1, ratr_cfg=RatrConfig(weight=0.0)
        )
        baseline = id_loss(bundle.logits[0], labels, 0.1) + batch_hard_triplet(
            bundle.features[0], labels, 1.2
        )
        assert loss.item() == baseline.item()

    def test_full_instance_matches_term_recomputation(self):
        bundle, labels = make_bundle(g=3, p=4, k=3, classes=4)
        cfg = RatrConfig(tau=0.1, weight=0.7)
        loss, breakdown = total_loss(
            bundle, labels, margin=0.9, smoothing=0.05, ratr_cfg=cfg
        )
        ids = [id_loss(l, labels, 0.05).item() for l in bundle.logits]
        tris = [batch_hard_triplet(f, labels, 0.9).item() for f in bundle.features]
        views = build_similarity_views(bundle.features, labels)
        intra = ratr_intra(views, cfg).item()
        inter = ratr_inter(views, cfg).item()
        expected = (sum(ids) + sum(tris)) / 3 + 0.7 * (intra + inter)
        assert abs(loss.item() - expected) < 1e-12
        assert breakdown.id_terms == pytest.approx(ids)
        assert breakdown.triplet_terms == pytest.approx(tris)
        assert breakdown.ratr_intra == pytest.approx(intra)
        assert breakdown.ratr_inter == pytest.approx(inter)

    def test_breakdown_records(self):
        bundle, labels = make_bundle()
        _, breakdown = total_loss(
            bundle, labels, margin=1.0, smoothing=0.1, ratr_cfg=RatrConfig(weight=1.0)
        )
        names = [r[0] for r in breakdown.records()]
        assert names.count("id") == 2
        assert names.count("triplet") == 2
        assert "ratr_intra" in names and "total" in names
