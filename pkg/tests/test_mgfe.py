import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmreid.backbone import Backbone
from ssmreid.config import ModelConfig, desk_model_config
from ssmreid.mgfe import (
    Branch,
    FusionOp,
    ReidModel,
    build_model,
    extract_branch_feature,
    fuse_class_tokens,
    reinterleave_tokens,
    split_tokens,
)
from ssmreid.tokens import interleave_tokens


def paper_shape_config(reduction=4, num_branches=3, depth=3) -> ModelConfig:
    """Full-width feature geometry on a shallow stack (dims don't depend on L)."""
    return ModelConfig(
        image_height=128,
        image_width=32,
        patch_size=16,
        stride=16,
        embed_dim=384,
        num_class_tokens=12,
        num_cameras=2,
        depth=depth,
        state_dim=2,
        expand=1,
        reduction=reduction,
        num_branches=num_branches,
        drop_rate=0.0,
    )


def random_sequence(m=4, n=32, d=16, seed=0):
    torch.manual_seed(seed)
    return interleave_tokens(
        torch.randn(m, d, dtype=torch.float64),
        torch.randn(n, d, dtype=torch.float64),
    )


class TestSplitTokens:
    def test_sentinel_rows_land_in_class_output(self):
        seq = random_sequence()
        data = seq.data.clone()
        data[seq.class_positions] = 99.0
        seq = seq.with_data(data)
        cls, img = split_tokens(seq)
        assert torch.all(cls == 99.0)
        assert not torch.any(img == 99.0)

    def test_split_then_reinterleave_identity(self):
        seq = random_sequence()
        cls, img = split_tokens(seq)
        rebuilt = reinterleave_tokens(cls, img)
        assert torch.equal(rebuilt.data, seq.data)
        assert torch.equal(rebuilt.class_positions, seq.class_positions)

    def test_permutation_oracle(self):
        seq = random_sequence(m=5, n=17, d=3, seed=2)
        cls, img = split_tokens(seq)
        stacked = torch.cat([cls, img], dim=-2)
        # scatter rows back by position and compare
        rebuilt = torch.empty_like(seq.data)
        rebuilt[seq.class_positions] = cls
        rebuilt[seq.image_positions] = img
        assert torch.equal(rebuilt, seq.data)
        assert stacked.shape == seq.data.shape


class TestFuseClassTokens:
    @pytest.mark.parametrize("kind", ["min", "max", "avg", "gem"])
    def test_g0_identity(self, kind):
        rows = torch.rand(4, 6, dtype=torch.float64) + 0.1
        out = fuse_class_tokens(rows, 0, FusionOp(kind))
        assert torch.equal(out, rows)

    def test_hand_example(self):
        rows = torch.tensor([[1.0, 4.0], [3.0, 2.0]], dtype=torch.float64)
        assert fuse_class_tokens(rows, 1, FusionOp("max")).tolist() == [[3.0, 4.0]]
        assert fuse_class_tokens(rows, 1, FusionOp("avg")).tolist() == [[2.0, 3.0]]
        assert fuse_class_tokens(rows, 1, FusionOp("min")).tolist() == [[1.0, 2.0]]

    def test_gem_limits(self):
        torch.manual_seed(4)
        rows = torch.rand(8, 5, dtype=torch.float64) + 0.2
        avg = fuse_class_tokens(rows, 2, FusionOp("avg"))
        gem1 = fuse_class_tokens(rows, 2, FusionOp("gem", gem_power=1.0))
        assert torch.allclose(gem1, avg, atol=1e-12)
        # worst-case gap to max at power p is max * (1 - group^(-1/p)); scale
        # the inputs so that bound sits below 1e-3 at p=64
        small = rows * 0.03
        mx = fuse_class_tokens(small, 2, FusionOp("max"))
        gem64 = fuse_class_tokens(small, 2, FusionOp("gem", gem_power=64.0))
        assert (gem64 - mx).abs().max() < 1e-3
        # convergence is monotone in p
        gem512 = fuse_class_tokens(small, 2, FusionOp("gem", gem_power=512.0))
        assert (gem512 - mx).abs().max() <= (gem64 - mx).abs().max()

    def test_non_divisible_rejected(self):
        rows = torch.rand(3, 4, dtype=torch.float64)
        with pytest.raises(ValueError):
            fuse_class_tokens(rows, 1, FusionOp("max"))

    @given(seed=st.integers(0, 1000), g=st.integers(0, 2))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariance_within_groups(self, seed, g):
        torch.manual_seed(seed)
        rows = torch.rand(8, 3, dtype=torch.float64) + 0.1
        group = 2**g
        grouped = rows.reshape(8 // group, group, 3)
        perm = torch.randperm(group)
        shuffled = grouped[:, perm, :].reshape(8, 3)
        for kind in ("min", "max", "avg", "gem"):
            a = fuse_class_tokens(rows, g, FusionOp(kind))
            b = fuse_class_tokens(shuffled, g, FusionOp(kind))
            assert torch.allclose(a, b, atol=1e-12)

    def test_idempotent_on_identical_rows(self):
        row = torch.rand(1, 5, dtype=torch.float64) + 0.1
        rows = row.repeat(4, 1)
        for kind in ("min", "max", "avg", "gem"):
            out = fuse_class_tokens(rows, 2, FusionOp(kind))
            assert torch.allclose(out, row, atol=1e-9)

    def test_monotone_ordering_on_positive_inputs(self):
        torch.manual_seed(5)
        rows = torch.rand(8, 4, dtype=torch.float64) + 0.05
        lo = fuse_class_tokens(rows, 1, FusionOp("min"))
        hi = fuse_class_tokens(rows, 1, FusionOp("max"))
        for p in (1.0, 2.0, 5.0):
            mid = fuse_class_tokens(rows, 1, FusionOp("gem", gem_power=p))
            assert torch.all(mid >= lo - 1e-12)
            assert torch.all(mid <= hi + 1e-12)


class TestReinterleave:
    def test_fused_layout(self):
        cls = torch.rand(2, 4, dtype=torch.float64)
        img = torch.rand(32, 4, dtype=torch.float64)
        seq = reinterleave_tokens(cls, img)
        assert seq.spacing == 10
        assert seq.class_positions.tolist() == [10, 21]

    def test_rejects_too_many_class_tokens(self):
        with pytest.raises(ValueError):
            reinterleave_tokens(
                torch.rand(6, 4, dtype=torch.float64),
                torch.rand(6, 4, dtype=torch.float64),
            )


class TestBranchForward:
    def test_output_shapes_per_granularity(self):
        cfg = paper_shape_config()
        torch.manual_seed(0)
        seq = interleave_tokens(
            torch.randn(12, 384, dtype=torch.float64),
            torch.randn(16, 384, dtype=torch.float64),
        )
        for g, expected_rows in [(0, 12), (1, 6), (2, 3)]:
            branch = Branch(cfg, g)
            branch.eval()
            out = branch(seq)
            assert out.shape == (expected_rows, 384)

    def test_eval_deterministic(self):
        cfg = desk_model_config()
        torch.manual_seed(1)
        branch = Branch(cfg, 1)
        branch.eval()
        seq = random_sequence(m=4, n=8, d=64, seed=3)
        assert torch.equal(branch(seq), branch(seq))

    def test_single_branch_reproduces_monolithic_stack(self):
        cfg = desk_model_config(num_branches=1, drop_rate=0.0)
        model = build_model(cfg, num_classes=4, seed=0)
        model.eval()
        images = torch.rand(2, 64, 32, 3, dtype=torch.float64)
        cams = torch.tensor([0, 1])
        shared = model.shared_sequence(images, cams)
        branch_out = model.branches[0](shared)
        full = Backbone(list(model.trunk.blocks) + list(model.branches[0].blocks))
        full.eval()
        seq = model.shared_sequence(images, cams)  # depth L-2 happens inside
        # compose from layer 0 instead: embed then all L blocks
        from ssmreid.tokens import embed_image

        z0 = embed_image(images, model.embedding, cams, cfg.embed)
        z_l = full(z0)
        assert torch.allclose(branch_out, z_l.class_rows(), atol=1e-12)


class TestExtractBranchFeature:
    def test_paper_dims(self):
        cfg = paper_shape_config(reduction=4)
        torch.manual_seed(0)
        for g, m_g in [(0, 12), (1, 6), (2, 3)]:
            branch = Branch(cfg, g)
            z = torch.randn(m_g, 384, dtype=torch.float64)
            feature = extract_branch_feature(z, branch)
            assert feature.shape == (1152,)

    def test_expansion_when_reduction_exceeded(self):
        cfg = paper_shape_config(reduction=2)
        torch.manual_seed(0)
        for g, m_g in [(0, 12), (1, 6), (2, 3)]:
            branch = Branch(cfg, g)
            z = torch.randn(m_g, 384, dtype=torch.float64)
            assert extract_branch_feature(z, branch).shape == (2304,)

    def test_l2_variant_unit_norm(self):
        cfg = desk_model_config()
        torch.manual_seed(2)
        branch = Branch(cfg, 0)
        z = torch.randn(4, 64, dtype=torch.float64)
        feature = extract_branch_feature(z, branch, l2=True)
        assert abs(feature.norm().item() - 1.0) < 1e-12

    def test_zero_rows_rejected(self):
        cfg = desk_model_config()
        branch = Branch(cfg, 0)
        with pytest.raises(ValueError, match="zero"):
            extract_branch_feature(torch.zeros(4, 64, dtype=torch.float64), branch)

    def test_dimension_mismatch(self):
        cfg = desk_model_config()
        branch = Branch(cfg, 0)
        with pytest.raises(ValueError):
            extract_branch_feature(torch.randn(4, 32, dtype=torch.float64), branch)

    @pytest.mark.parametrize(
        "m,r,g_count", [(4, 2, 2), (8, 4, 3), (12, 4, 3), (12, 2, 3), (8, 2, 2)]
    )
    def test_dimension_conservation_sweep(self, m, r, g_count):
        cfg = ModelConfig(
            image_height=256,
            image_width=64,
            embed_dim=16,
            num_class_tokens=m,
            num_cameras=2,
            depth=3,
            state_dim=2,
            expand=1,
            reduction=r,
            num_branches=g_count,
            drop_rate=0.0,
        )
        expected = m * 16 // r
        torch.manual_seed(0)
        for g in range(g_count):
            branch = Branch(cfg, g)
            z = torch.randn(m // 2**g, 16, dtype=torch.float64)
            assert extract_branch_feature(z, branch).shape == (expected,)


class TestModelForward:
    def test_bundle_shapes(self):
        cfg = desk_model_config()
        model = build_model(cfg, num_classes=7, seed=0)
        model.eval()
        images = torch.rand(3, 64, 32, 3, dtype=torch.float64)
        cams = torch.tensor([0, 1, 2])
        bundle = model(images, cams)
        assert bundle.num_branches == 2
        for f, bn, lg in zip(bundle.features, bundle.bn_features, bundle.logits):
            assert f.shape == (3, 128)
            assert bn.shape == (3, 128)
            assert lg.shape == (3, 7)

    def test_identical_images_identical_bundles(self):
        cfg = desk_model_config()
        model = build_model(cfg, num_classes=4, seed=0)
        model.eval()
        image = torch.rand(1, 64, 32, 3, dtype=torch.float64)
        images = image.repeat(2, 1, 1, 1)
        cams = torch.tensor([1, 1])
        bundle = model(images, cams)
        for f in bundle.features:
            assert torch.allclose(f[0], f[1], atol=1e-12)

    def test_rejects_bad_num_classes(self):
        with pytest.raises(ValueError):
            ReidModel(desk_model_config(), num_classes=0)
