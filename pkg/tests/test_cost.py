from dataclasses import replace

import pytest

from pixdiff import cost, uvit

# Hand-summed stage costs of the small 512 preset at 4x4 patching:
# 2 ResBlock levels (128^2 x 128, 64^2 x 256; 6 blocks each),
# Transformer 32^2 x 512 (6 blocks) and the 16-block 16^2 x 1024 middle.
SMALL_512_GFLOPS = 137.438953472


class TestFormulas:
    def test_empty(self):
        assert cost.transformer_gflops(32, 512, 0) == 0
        assert cost.resblock_gflops(32, 512, 0) == 0

    def test_transformer_value(self):
        assert cost.transformer_gflops(16, 1024, 16) == pytest.approx(53.687091200, rel=1e-12)

    def test_resblock_value(self):
        assert cost.resblock_gflops(128, 128, 3) == pytest.approx(14.495514624, rel=1e-12)

    def test_channel_doubling(self):
        lin = lambda c: 12 * c ** 2 * 4 * 64 ** 2  # noqa: E731
        attn = lambda c: 2 * 64 ** 4 * 4 * c  # noqa: E731
        assert lin(256) == 4 * lin(128) and attn(256) == 2 * attn(128)
        assert cost.transformer_gflops(64, 256, 4) == pytest.approx((lin(256) + attn(256)) / 1e9)

    def test_resblock_size_scaling(self):
        assert cost.resblock_gflops(64, 128, 3) == pytest.approx(cost.resblock_gflops(128, 128, 3) / 4)


class TestModelCost:
    def test_small_512_golden(self):
        rep = cost.model_cost(uvit.small(512), 512)
        assert rep.forward_gflops == pytest.approx(SMALL_512_GFLOPS, rel=1e-12)
        assert rep.train_step_gflops == 3 * rep.forward_gflops
        assert rep.forward_gflops == sum(s.gflops for s in rep.stages)
        assert rep.model_params == uvit.count_params(uvit.small(512))

    def test_additive(self):
        a = cost.stages(uvit.small(512), 512)
        rep_all = cost.report(a)
        first, rest = cost.report(a[:3]), cost.report(a[3:])
        assert rep_all.forward_gflops == pytest.approx(first.forward_gflops + rest.forward_gflops, rel=1e-14)
        assert rep_all.params == first.params + rest.params

    def test_patch_halving(self):
        p4 = cost.model_cost(uvit.small(512), 512)
        p2 = cost.model_cost(uvit.flop_heavy(512), 512)
        assert p2.params == p4.params
        # Linear/conv terms scale by exactly 4; attention terms by 16.
        ratio = p2.forward_gflops / p4.forward_gflops
        assert ratio == pytest.approx(4.75, rel=1e-12)

    def test_channel_doubling_preserves_ratio(self):
        cfg = uvit.small(512)
        wide = replace(cfg, channels=tuple(2 * c for c in cfg.channels))
        base, big = cost.model_cost(cfg, 512), cost.model_cost(wide, 512)
        assert big.params == 4 * base.params
        assert 3.5 <= big.forward_gflops / base.forward_gflops <= 4.0

    def test_report_json(self):
        d = cost.model_cost(uvit.small(128), 128).to_dict()
        assert d["train_step_gflops"] == 3 * d["forward_gflops"]
        assert "multiply-add" in d["convention"]
        assert "forward_gflops" in cost.model_cost(uvit.small(128), 128).table()

    def test_skip_memory(self):
        cfg = uvit.small(512)
        assert cost.skip_memory(cfg, 512, "blockwise_skip") == uvit.activation_memory(cfg, 512).blockwise_skip
        with pytest.raises(ValueError):
            cost.skip_memory(cfg, 512, "other")
