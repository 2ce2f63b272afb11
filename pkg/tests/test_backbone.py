import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hccnet.backbone import (
    VARIANTS,
    Backbone,
    BackboneConfig,
    ConvNeXtBlock3d,
    Stem,
    build_backbone,
    count_params,
    decay_eligible,
    inflate_stem_weight,
    init_weights,
)

from fdcheck import max_relative_error


class TestShapes:
    @pytest.mark.parametrize("variant,c,blocks,h", [
        ("F", 48, (2, 2, 6, 2), 384),
        ("P", 64, (2, 2, 6, 2), 512),
        ("N", 80, (2, 2, 8, 2), 640),
        ("T", 96, (3, 3, 9, 3), 768),
    ])
    def test_variant_table(self, variant, c, blocks, h):
        v = VARIANTS[variant]
        assert (v.channels, v.blocks, v.hidden) == (c, blocks, h)
        assert v.hidden == 8 * v.channels and v.heads == v.hidden // 128

    def test_stage_channels(self):
        for v in VARIANTS.values():
            cfg = BackboneConfig(v.channels, v.blocks)
            assert cfg.stage_channels == (v.channels, 2 * v.channels, 4 * v.channels, 8 * v.channels)
            assert cfg.stage_channels[-1] == v.hidden

    def test_stem_downsamples_by_three(self):
        stem = Stem(1, 8)
        assert stem(torch.zeros(1, 1, 72, 72, 72)).shape == (1, 8, 24, 24, 24)
        with pytest.raises(ValueError):
            stem(torch.zeros(1, 1, 10, 9, 9))

    def test_smallest_valid_input(self):
        _, bb = build_backbone("F", channels=4, blocks=(1, 1, 1, 1))
        with torch.no_grad():
            assert bb(torch.zeros(1, 1, 24, 24, 24)).shape == (1, 32)
        with pytest.raises(RuntimeError):
            bb(torch.zeros(1, 1, 9, 9, 9))

    def test_embedding_sizes(self):
        _, f = build_backbone("F")
        with torch.no_grad():
            assert f(torch.zeros(1, 1, 48, 48, 48)).shape == (1, 384)

    @pytest.mark.slow
    def test_variant_p_full_size(self):
        _, p = build_backbone("P")
        with torch.no_grad():
            assert p(torch.randn(1, 1, 72, 72, 72)).shape == (1, 512)

    def test_block_channel_mismatch(self):
        with pytest.raises(ValueError):
            ConvNeXtBlock3d(4)(torch.zeros(1, 3, 3, 3, 3))


class TestParams:
    def test_block_count_c64(self):
        # depthwise 64*27+64, norm 128, expand 64*256+256, project 256*64+64
        block = ConvNeXtBlock3d(64)
        assert count_params(block) == 1792 + 128 + 16640 + 16448 == 35008
        assert count_params(block.state_dict()) == 35008

    def test_empty_and_value_invariance(self):
        assert count_params({}) == 0
        block = ConvNeXtBlock3d(8)
        n = count_params(block)
        with torch.no_grad():
            for p in block.parameters():
                p.mul_(3.0)
        assert count_params(block) == n

    def test_decay_groups(self):
        _, bb = build_backbone("F", channels=4, blocks=(1, 1, 1, 1))
        for name, p in bb.named_parameters():
            assert decay_eligible(name, p) == (p.ndim >= 2)
            if "norm" in name or name.endswith("bias"):
                assert not decay_eligible(name, p)


class TestInit:
    def test_deterministic_and_distribution(self):
        a = build_backbone("F", init_seed=3)[1].state_dict()
        b = build_backbone("F", init_seed=3)[1].state_dict()
        c = build_backbone("F", init_seed=4)[1].state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
        assert not torch.equal(a["stages.2.0.pwconv1.weight"], c["stages.2.0.pwconv1.weight"])
        w = a["stages.2.0.pwconv1.weight"]
        assert abs(w.std().item() - 0.02) < 0.001
        assert torch.all(a["norm.weight"] == 1) and torch.all(a["norm.bias"] == 0)


class TestInvariants:
    def test_block_gradients_fd(self):
        torch.manual_seed(0)
        block = ConvNeXtBlock3d(4).double()
        init_weights(block, 0, std=0.3)
        with torch.no_grad():
            for m in block.modules():
                if isinstance(m, torch.nn.LayerNorm):
                    m.weight.uniform_(0.5, 1.5)
                    m.bias.uniform_(-0.2, 0.2)
        x = torch.randn(1, 4, 9, 9, 9, dtype=torch.float64)
        target = torch.randn(1, 4, 9, 9, 9, dtype=torch.float64)

        def loss():
            return ((block(x) - target) ** 2).mean()

        worst, _ = max_relative_error(block, loss)
        assert worst < 1e-4

    def test_tiny_backbone_gradients_fd(self):
        cfg = BackboneConfig(4, (1, 1, 1, 1), 1)
        bb = Backbone(cfg).double()
        init_weights(bb, 1, std=0.3)
        # 24 is the smallest edge that survives the stem and three 2x transitions
        x = torch.randn(2, 1, 24, 24, 24, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        w = torch.randn(32, dtype=torch.float64, generator=torch.Generator().manual_seed(2))

        def loss():
            return (bb(x) * w).sum()

        worst, per = max_relative_error(bb, loss, max_entries=24)
        assert worst < 1e-4, per

    def test_zeroed_block_is_identity(self):
        block = ConvNeXtBlock3d(6)
        with torch.no_grad():
            for p in block.parameters():
                p.zero_()
        x = torch.randn(2, 6, 5, 5, 5)
        assert torch.equal(block(x), x)

    @settings(max_examples=10, deadline=None)
    @given(shift=st.integers(1, 3), axis=st.integers(0, 2))
    def test_stem_translation_covariance(self, shift, axis):
        stem = Stem(1, 4)
        init_weights(stem, 0)
        x = torch.randn(1, 1, 18, 18, 18, generator=torch.Generator().manual_seed(shift))
        shifted = torch.roll(x, 3 * shift, dims=2 + axis)
        a = stem(x)
        b = stem(shifted)
        n = a.shape[2 + axis]
        keep = slice(shift, n)
        lo = [slice(None)] * 5
        hi = [slice(None)] * 5
        lo[2 + axis] = slice(0, n - shift)
        hi[2 + axis] = keep
        torch.testing.assert_close(b[tuple(hi)], a[tuple(lo)])

    def test_stem_inflation_preserves_equal_channels(self):
        stem1 = Stem(1, 4)
        init_weights(stem1, 0)
        stem4 = Stem(4, 4)
        stem4.load_state_dict({**stem1.state_dict(), "conv.weight": inflate_stem_weight(stem1.conv.weight, 4)})
        x = torch.randn(1, 1, 6, 6, 6)
        torch.testing.assert_close(stem4(x.repeat(1, 4, 1, 1, 1)), stem1(x))
