"""Analytical FLOP model: formula spot-checks, additivity, and the
full-vs-partial decoder comparisons."""

import numpy as np
import pytest

from cpdnet.costmodel import (MODES, compare, comparison_to_text, comparison_to_tsv,
                              model_cost)
from cpdnet.model import ModelConfig

VGG_CFG = ModelConfig(block_channels=(64, 128, 256, 512, 512), input_side=352)


class TestLayerFormulas:
    def test_conv_3x3_32_to_32_at_88(self):
        """2*9*32*32*88*88 = 142,737,408 plus bias 32*88*88 = 247,808."""
        cfg = ModelConfig(block_channels=(64, 128, 256, 512, 512), input_side=352,
                          context_channels=32)
        cm = model_cost(cfg, "partial_l3")
        fuse_layers = [l for l in cm.layers if l.name == "dec.fuse_3_4.conv"]
        assert len(fuse_layers) == 1
        assert fuse_layers[0].flops == 142_737_408 + 247_808

    def test_activation_bytes(self):
        cm = model_cost(VGG_CFG, "partial_l3")
        layer = next(l for l in cm.layers if l.name == "dec.logit")
        assert layer.output_shape == (1, 88, 88)
        assert layer.activation_bytes == 4 * 88 * 88


class TestModeComparisons:
    def test_partial_l3_decoder_at_most_third_of_full(self):
        full = model_cost(VGG_CFG, "full_decoder")
        part = model_cost(VGG_CFG, "partial_l3")
        assert part.decoder_flops <= full.decoder_flops / 3

    def test_two_branch_total_below_full_decoder(self):
        full = model_cost(VGG_CFG, "full_decoder")
        cpd = model_cost(VGG_CFG, "cpd_two_branch")
        assert cpd.total_flops < full.total_flops

    def test_additivity_of_groups(self):
        cm = model_cost(VGG_CFG, "cpd_two_branch")
        assert cm.total_flops == cm.backbone_flops + cm.decoder_flops + cm.attention_flops
        by_level = sum(cm.decoder_flops_at_level(l) for l in cm.decoded_levels())
        assert by_level == cm.decoder_flops + cm.attention_flops

    def test_decoder_level_cost_scales_with_grid_area(self):
        """For fixed channel width the per-level decoder cost shrinks roughly
        4x per level (grid area factor), modulo the level-count term."""
        cfg = ModelConfig(block_channels=(32, 32, 32, 32, 32), input_side=352,
                          context_channels=32)
        cm = model_cost(cfg, "full_decoder")
        costs = [cm.decoder_flops_at_level(l) for l in (1, 2, 3, 4, 5)]
        for shallower, deeper in zip(costs, costs[1:]):
            assert shallower > 2.5 * deeper

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            model_cost(VGG_CFG, "nope")


class TestCompare:
    def test_identical_models_ratio_one(self):
        a = model_cost(VGG_CFG, "partial_l3")
        b = model_cost(VGG_CFG, "partial_l3")
        rows = compare([a, b])
        totals = [r for r in rows if r.level == "total"]
        assert totals[0].vs_first == pytest.approx(1.0)
        assert totals[1].vs_first == pytest.approx(1.0)
        assert totals[0].cumulative_flops == totals[1].cumulative_flops

    def test_side_doubling_multiplies_conv_costs_by_four(self):
        small = model_cost(ModelConfig(block_channels=(64, 128, 256, 512, 512),
                                       input_side=352), "partial_l3")
        big = model_cost(ModelConfig(block_channels=(64, 128, 256, 512, 512),
                                     input_side=704), "partial_l3")
        assert big.backbone_flops == 4 * small.backbone_flops
        assert big.total_flops == 4 * small.total_flops
        rows_small = compare([small])
        rows_big = compare([big])
        for rs, rb in zip(rows_small, rows_big):
            assert rb.over_backbone == pytest.approx(rs.over_backbone)

    def test_cumulative_monotone_toward_shallow_levels(self):
        for mode in ("full_decoder", "partial_l3", "cpd_two_branch"):
            cm = model_cost(VGG_CFG, mode)
            rows = [r for r in compare([cm]) if r.level != "total"]
            levels = [r.level for r in rows]
            assert levels == sorted(levels, reverse=True)
            cums = [r.cumulative_flops for r in rows]
            assert all(b >= a for a, b in zip(cums, cums[1:]))
            assert all(r.over_backbone >= 1.0 for r in rows)

    def test_all_modes_enumerate(self):
        for mode in MODES:
            cm = model_cost(VGG_CFG, mode)
            assert cm.total_flops > 0
            assert cm.total_activation_bytes > 0

    def test_renderers(self):
        rows = compare([model_cost(VGG_CFG, "partial_l3"),
                        model_cost(VGG_CFG, "full_decoder")])
        tsv = comparison_to_tsv(rows)
        assert tsv.startswith("mode\tlevel\tflops")
        text = comparison_to_text(rows)
        assert "partial_l3" in text and "full_decoder" in text
