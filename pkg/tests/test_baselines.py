"""Post-hoc pruning baselines: op accounting, selection, restore semantics."""

import numpy as np
import pytest

from civicbench import baselines as bl
from civicbench import model_core as mc
from civicbench import weights
from civicbench.config import ConfigError, PipelineConfig


@pytest.fixture
def ph_cfg():
    return PipelineConfig(full_vis_len=16, vis_dim=4, vis_layers=2,
                          vis_heads=2, merge_factor=4, lm_dim=8, lm_layers=2,
                          lm_heads=2, prompt_len=4, prefix_len=1, vocab=17,
                          max_new_tokens=3, compact_vis_len=8, kv_slots=4,
                          seed=13).validate()


def inputs_for(cfg, seed=0):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(cfg.full_vis_len, cfg.vis_dim))
    return x0, [1] * cfg.prompt_len


# ---------------------------------------------------------------------------
# op log
# ---------------------------------------------------------------------------


def test_op_log_entries_are_kind_seconds_elements():
    log = bl.RoutingOpLog()
    log.add("score", 0.25, 64)
    log.add("gather", 0.5, 128)
    assert log.entries == [("score", 0.25, 64), ("gather", 0.5, 128)]
    assert log.total() == 0.75


def test_op_log_rejects_unknown_kind_and_negative_time():
    log = bl.RoutingOpLog()
    with pytest.raises(ValueError, match="unknown routing op"):
        log.add("teleport", 0.1, 1)
    with pytest.raises(ValueError, match="nonnegative"):
        log.add("score", -0.1, 1)


def test_route_cost_is_log_total():
    log = bl.RoutingOpLog()
    log.add("select", 1.0, 3)
    log.add("restore", 2.0, 9)
    assert bl.route_cost(log) == 3.0


# ---------------------------------------------------------------------------
# pruning arithmetic
# ---------------------------------------------------------------------------


def test_kept_count_ceils():
    assert bl.kept_count(1024, 0.75, 4, "dense_restore") == 768
    assert bl.kept_count(10, 0.71, 4, "dense_restore") == 8
    assert bl.kept_count(10, 0.01, 4, "dense_restore") == 1


def test_kept_count_propagate_aligns_up_to_merge():
    assert bl.kept_count(10, 0.01, 4, "propagate") == 4
    assert bl.kept_count(10, 0.55, 4, "propagate") == 8
    assert bl.kept_count(8, 1.0, 4, "propagate") == 8  # capped at t_e


def test_kept_count_rejects_zero_budget():
    with pytest.raises(ConfigError, match="zero tokens"):
        bl.kept_count(100, 0.0, 4, "dense_restore")


def test_propagate_prefill_token_oracle():
    """L=100 text tokens, keep 75% of 1024 patches, merge 4: 100 + 192."""
    k = bl.kept_count(1024, 0.75, 4, "propagate")
    assert k == 768
    assert 100 + k // 4 == 292


def test_posthoc_config_validation():
    bl.PostHocConfig().validate()
    with pytest.raises(ConfigError, match="keep_ratio"):
        bl.PostHocConfig(keep_ratio=0.0).validate()
    with pytest.raises(ConfigError, match="mode"):
        bl.PostHocConfig(mode="teleport").validate()
    with pytest.raises(ConfigError, match="scoring"):
        bl.PostHocConfig(scoring="entropy").validate()


def test_prune_layer_resolution(ph_cfg):
    assert bl.PostHocConfig().resolved_layer(ph_cfg) == ph_cfg.vis_layers - 1
    assert bl.PostHocConfig(prune_layer=0).resolved_layer(ph_cfg) == 0
    with pytest.raises(ConfigError, match="outside encoder depth"):
        bl.PostHocConfig(prune_layer=9).resolved_layer(ph_cfg)


# ---------------------------------------------------------------------------
# nearest-kept restoration
# ---------------------------------------------------------------------------


def test_nearest_kept_restore_oracle():
    h_kept = np.array([[10.0], [40.0]])
    got = bl.nearest_kept_restore(h_kept, np.array([1, 4]), 6)
    np.testing.assert_array_equal(got.ravel(), [10, 10, 10, 40, 40, 40])


def test_nearest_kept_restore_tie_prefers_earlier():
    h_kept = np.array([[1.0], [2.0]])
    got = bl.nearest_kept_restore(h_kept, np.array([0, 2]), 3)
    np.testing.assert_array_equal(got.ravel(), [1, 1, 2])  # slot 1 ties to 0


def test_nearest_kept_restore_kept_slots_map_to_themselves():
    rng = np.random.default_rng(1)
    h_kept = rng.normal(size=(3, 4))
    kept = np.array([0, 3, 5])
    got = bl.nearest_kept_restore(h_kept, kept, 7)
    for row, slot in enumerate(kept):
        np.testing.assert_array_equal(got[slot], h_kept[row])


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


def test_dense_restore_keeps_dense_interface(ph_cfg):
    bb = weights.build_backbone(ph_cfg)
    x0, prompt = inputs_for(ph_cfg)
    dense_ids, dense_stats = mc.run_dense(x0, prompt, ph_cfg, bb)
    ids, stats, log = bl.run_posthoc(x0, prompt, ph_cfg, bb,
                                     bl.PostHocConfig(keep_ratio=0.75))
    assert stats.model == "posthoc_dense_restore"
    assert stats.prefill_tokens == dense_stats.prefill_tokens
    assert stats.kv_cache_bytes == dense_stats.kv_cache_bytes
    assert stats.overhead_s > 0.0
    assert stats.overhead_s == log.total()
    assert len(ids) == len(dense_ids)
    kinds = [e[0] for e in log.entries]
    assert kinds == ["score", "select", "gather", "restore"]


def test_propagate_shrinks_the_interface(ph_cfg):
    bb = weights.build_backbone(ph_cfg)
    x0, prompt = inputs_for(ph_cfg)
    ph = bl.PostHocConfig(keep_ratio=0.5, mode="propagate")
    ids, stats, log = bl.run_posthoc(x0, prompt, ph_cfg, bb, ph)
    assert stats.model == "posthoc_propagate"
    k = bl.kept_count(ph_cfg.full_vis_len, 0.5, ph_cfg.merge_factor,
                      "propagate")
    assert stats.prefill_tokens == ph_cfg.prompt_len + k // ph_cfg.merge_factor
    assert stats.prefill_tokens < ph_cfg.dense_prefill_len
    assert stats.overhead_s == log.total() > 0.0
    assert [e[0] for e in log.entries] == ["score", "select", "gather",
                                           "scatter_unmerge"]
    assert len(ids) == ph_cfg.max_new_tokens


def test_propagate_positions_are_strictly_increasing(ph_cfg, monkeypatch):
    """Surviving merge groups take their first member's dense position."""
    bb = weights.build_backbone(ph_cfg)
    x0, prompt = inputs_for(ph_cfg, seed=2)
    captured = {}
    orig = bl.prefill

    def spy(seq, *a, **kw):
        captured["positions"] = seq.positions.copy()
        return orig(seq, *a, **kw)

    monkeypatch.setattr(bl, "prefill", spy)
    bl.run_posthoc(x0, prompt, ph_cfg, bb,
                   bl.PostHocConfig(keep_ratio=0.5, mode="propagate"))
    pos = captured["positions"]
    assert (np.diff(pos.astype(int)) > 0).all()
    pre, t_p = ph_cfg.prefix_len, ph_cfg.merged_vis_len
    vis = pos[pre:-(ph_cfg.prompt_len - pre)]
    assert (vis >= pre).all() and (vis < pre + t_p).all()


def test_keep_everything_still_pays_routing(ph_cfg):
    """keep_ratio=1 prunes nothing yet the score/select/gather ops still run."""
    bb = weights.build_backbone(ph_cfg)
    x0, prompt = inputs_for(ph_cfg, seed=3)
    dense_ids, dense_stats = mc.run_dense(x0, prompt, ph_cfg, bb)
    ids, stats, log = bl.run_posthoc(x0, prompt, ph_cfg, bb,
                                     bl.PostHocConfig(keep_ratio=1.0))
    assert stats.overhead_s > 0.0
    assert len(log.entries) == 4
    restore = log.entries[-1]
    assert restore[0] == "restore" and restore[2] == 0
    # nothing pruned: identical interface and identical tokens out
    assert stats.prefill_tokens == dense_stats.prefill_tokens
    assert ids == dense_ids


def test_gather_keeps_rows_bit_identical(ph_cfg, monkeypatch):
    """Pruning at the last layer forwards surviving rows without arithmetic."""
    bb = weights.build_backbone(ph_cfg)
    x0, prompt = inputs_for(ph_cfg, seed=4)
    ph = bl.PostHocConfig(keep_ratio=0.5, mode="propagate", scoring="norm")
    layer = ph.resolved_layer(ph_cfg)

    # reference: dense encode through every layer, then the same selection
    h = x0 + bb.vis_pos
    h = bl._encoder_layers(h, bb, ph_cfg, 0, layer + 1)
    scores = np.sqrt((h ** 2).sum(axis=1))
    k = bl.kept_count(ph_cfg.full_vis_len, 0.5, ph_cfg.merge_factor, ph.mode)
    order = np.lexsort((np.arange(ph_cfg.full_vis_len), -scores))
    kept_idx = np.sort(order[:k])
    want = h[kept_idx]

    seen = {}
    orig = bl.project_dense

    def spy(buf, *a, **kw):
        seen["h"] = np.array(buf, copy=True)
        return orig(buf, *a, **kw)

    monkeypatch.setattr(bl, "project_dense", spy)
    bl.run_posthoc(x0, prompt, ph_cfg, bb, ph)
    np.testing.assert_array_equal(seen["h"], want)


def test_attn_mass_scores_only_on_prune_layer(ph_cfg):
    """Scoring reflects the prune layer's attention, not an accumulation."""
    bb = weights.build_backbone(ph_cfg)
    x0, _ = inputs_for(ph_cfg, seed=5)
    t_e = ph_cfg.full_vis_len

    h = x0 + bb.vis_pos
    want = np.zeros(t_e)
    bl._encoder_layers(h, bb, ph_cfg, 0, 1, colsum_on=0, colsum=want)
    # column sums of row-stochastic attention distribute the row budget
    np.testing.assert_allclose(want.sum(), ph_cfg.vis_heads * t_e, atol=1e-9)

    both = np.zeros(t_e)
    h2 = bl._encoder_layers(x0 + bb.vis_pos, bb, ph_cfg, 0, 1,
                            colsum_on=0, colsum=both)
    bl._encoder_layers(h2, bb, ph_cfg, 1, 2, colsum_on=0, colsum=None)
    np.testing.assert_array_equal(both, want)


def test_scoring_variant_does_not_change_interface_size(ph_cfg):
    bb = weights.build_backbone(ph_cfg)
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(ph_cfg.full_vis_len, ph_cfg.vis_dim))
    x0[3] *= 30.0  # a huge-norm patch need not attract attention mass
    prompt = [1] * ph_cfg.prompt_len
    _, stats_a, _ = bl.run_posthoc(x0, prompt, ph_cfg, bb,
                                   bl.PostHocConfig(keep_ratio=0.25,
                                                    mode="propagate"))
    _, stats_n, _ = bl.run_posthoc(x0, prompt, ph_cfg, bb,
                                   bl.PostHocConfig(keep_ratio=0.25,
                                                    mode="propagate",
                                                    scoring="norm"))
    assert stats_a.prefill_tokens == stats_n.prefill_tokens


def test_posthoc_rejects_wrong_input_shape(ph_cfg):
    bb = weights.build_backbone(ph_cfg)
    with pytest.raises(Exception, match="patch sheet"):
        bl.run_posthoc(np.ones((3, 3)), [1] * ph_cfg.prompt_len, ph_cfg, bb,
                       bl.PostHocConfig())
