"""Parameter construction, determinism, casting, and checkpoint round-trips."""

import numpy as np
import pytest

from civicbench import weights
from civicbench.config import PipelineConfig


def test_backbone_is_seed_deterministic(toy_cfg):
    a = weights.build_backbone(toy_cfg)
    b = weights.build_backbone(toy_cfg)
    for name, t in a.named().items():
        np.testing.assert_array_equal(t, b.named()[name])
    c = weights.build_backbone(toy_cfg.replace(seed=toy_cfg.seed + 1))
    assert not np.array_equal(c.lm_head, a.lm_head)


def test_backbone_independent_of_compact_settings(toy_cfg):
    """Sweeping anchor or slot counts must not move a single frozen weight."""
    base = weights.theta_checksum(weights.build_backbone(toy_cfg))
    for kw in ({"compact_vis_len": 8}, {"kv_slots": 2},
               {"agg_temp": 0.5}, {"min_keep_ratio": 0.9}):
        other = weights.build_backbone(toy_cfg.replace(**kw).validate())
        assert weights.theta_checksum(other) == base


def test_backbone_shapes(toy_cfg):
    bb = weights.build_backbone(toy_cfg)
    c = toy_cfg
    assert bb.vis_pos.shape == (c.full_vis_len, c.vis_dim)
    assert len(bb.vis_blocks) == c.vis_layers
    assert bb.vis_blocks[0].mlp_in.shape == (c.vis_dim, 4 * c.vis_dim)
    assert bb.proj_w.shape == (c.merge_factor * c.vis_dim, c.lm_dim)
    assert bb.proj_b.shape == (1, c.lm_dim)
    assert bb.tok_embed.shape == (c.vocab, c.lm_dim)
    assert bb.lm_pos.shape == (c.dense_prefill_len + c.max_new_tokens, c.lm_dim)
    assert len(bb.lm_blocks) == c.lm_layers
    assert bb.lm_head.shape == (c.lm_dim, c.vocab)


def test_compact_params_shapes_and_projector_copy(toy_cfg):
    bb = weights.build_backbone(toy_cfg)
    cp = weights.build_compact(toy_cfg, bb)
    assert cp.anchors.shape == (toy_cfg.compact_vis_len, toy_cfg.vis_dim)
    assert len(cp.routes) == toy_cfg.vis_layers
    assert cp.routes[0].shape == (toy_cfg.vis_dim, toy_cfg.kv_slots)
    np.testing.assert_array_equal(cp.proj_w, bb.proj_w)
    cp.proj_w[0, 0] += 1.0
    assert bb.proj_w[0, 0] != cp.proj_w[0, 0]  # a copy, not a view


def test_anchor_budgets_nest(toy_cfg):
    """Halving the anchor budget keeps a subset of the same anchor rows."""
    bb = weights.build_backbone(toy_cfg)
    big = weights.build_compact(toy_cfg, bb)
    small_cfg = toy_cfg.replace(compact_vis_len=8, kv_slots=4).validate()
    small = weights.build_compact(small_cfg, bb)
    idx_big = weights.anchor_stride_indices(toy_cfg.full_vis_len,
                                            toy_cfg.compact_vis_len)
    idx_small = weights.anchor_stride_indices(toy_cfg.full_vis_len, 8)
    assert set(idx_small).issubset(set(idx_big))
    lookup = {pos: row for pos, row in zip(idx_big, big.anchors)}
    for pos, row in zip(idx_small, small.anchors):
        np.testing.assert_array_equal(row, lookup[pos])


def test_anchor_stride_indices_examples():
    np.testing.assert_array_equal(
        weights.anchor_stride_indices(8, 4), [0, 2, 4, 6])
    np.testing.assert_array_equal(
        weights.anchor_stride_indices(10, 4), [0, 2, 5, 7])
    np.testing.assert_array_equal(
        weights.anchor_stride_indices(6, 6), [0, 1, 2, 3, 4, 5])


def test_cast_round_trip_preserves_dtype_and_layout(toy_cfg):
    bb = weights.build_backbone(toy_cfg)
    bb32 = weights.cast_backbone(bb, np.float32)
    assert bb32.lm_head.dtype == np.float32
    assert bb32.vis_blocks[0].attn_q.dtype == np.float32
    assert bb32.lm_head.flags["C_CONTIGUOUS"]
    np.testing.assert_allclose(bb32.lm_head, bb.lm_head, rtol=1e-6)

    cp = weights.build_compact(toy_cfg, bb)
    cp32 = weights.cast_compact(cp, np.float32)
    assert cp32.anchors.dtype == np.float32
    assert all(r.dtype == np.float32 for r in cp32.routes)


def test_checkpoint_round_trip(tmp_path, tiny_cfg):
    bb = weights.build_backbone(tiny_cfg)
    cp = weights.build_compact(tiny_cfg, bb)
    named = {**bb.named(), **cp.named()}
    path = tmp_path / "ckpt.json"
    weights.save_checkpoint(path, named)
    loaded = weights.load_checkpoint(path)
    assert sorted(loaded) == sorted(named)
    for name in named:
        np.testing.assert_array_equal(loaded[name], np.asarray(named[name]))
    rebuilt = weights.compact_from_named(loaded, tiny_cfg.vis_layers)
    np.testing.assert_array_equal(rebuilt.anchors, cp.anchors)
    assert len(rebuilt.routes) == len(cp.routes)


def test_checkpoint_rejects_unknown_format(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format": "something-else", "tensors": {}}')
    with pytest.raises(ValueError, match="unsupported checkpoint format"):
        weights.load_checkpoint(p)


def test_checkpoint_rejects_non_2d(tmp_path):
    with pytest.raises(ValueError, match="2-D"):
        weights.save_checkpoint(tmp_path / "x.json",
                                {"bad": np.ones((2, 2, 2))})


def test_theta_checksum_detects_any_change(toy_cfg):
    bb = weights.build_backbone(toy_cfg)
    before = weights.theta_checksum(bb)
    assert before == weights.theta_checksum(weights.build_backbone(toy_cfg))
    bb.lm_blocks[1].mlp_out[0, 0] += 1e-12
    assert weights.theta_checksum(bb) != before


def test_namespaces_are_disjoint(toy_cfg):
    bb = weights.build_backbone(toy_cfg)
    cp = weights.build_compact(toy_cfg, bb)
    assert not set(bb.named()) & set(cp.named())
    assert all(k.startswith("civic.") for k in cp.named())
