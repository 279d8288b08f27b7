"""The path-consistent compact pipeline: anchor aggregation, a saliency
retention floor, slot-pooled (KV-compressed) visual attention, compact
projection, and a compact prefill that keeps dense text positions.

The visual stream is shortened once, up front, and never re-expanded; every
downstream buffer carries at most the surviving anchor count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numkit as nk
from .config import PipelineConfig
from .model_core import (MultimodalSequence, TEXT, VISUAL, add_positions,
                         decode_greedy, embed_text, make_cache, mlp, prefill,
                         project_merge)
from .report import RunStats, ShapeTrace, StageClock
from .weights import BackboneWeights, CompactParams, anchor_stride_indices


@dataclass
class AggregationResult:
    weights: object                 # anchor-over-patch attention, M x T
    compact: object                 # pooled patch embeddings, M x vis_dim
    saliency: Optional[np.ndarray]  # per-anchor attended input mass
    kept: Optional[np.ndarray]      # boolean keep mask, set by retention_floor


def aggregate(x0: np.ndarray, anchors, temp: float,
              eps: float = 1e-5) -> AggregationResult:
    """Cross-attend anchors onto dense patches (cosine logits, temperature).

    Similarity uses layernormed + l2-normalized views of both sides; the
    resulting row-stochastic weights pool the raw patch embeddings.
    """
    if temp <= 0:
        raise ValueError("aggregation temperature must be positive")
    keys = nk.ln_l2_rows(x0, eps)
    queries = nk.ln_l2_rows(anchors, eps)
    weights = nk.softmax_rows(nk.matmul(queries, nk.transpose(keys)),
                              1.0 / temp)
    compact = nk.matmul(weights, x0)
    w = nk.val(weights)
    patch_mass = np.sqrt((nk.val(x0) ** 2).sum(axis=1))
    saliency = w @ patch_mass
    return AggregationResult(weights, compact, saliency, None)


def retention_floor(res: AggregationResult, min_keep_ratio: float,
                    coverage: float, merge_factor: int) -> AggregationResult:
    """Select surviving anchors by saliency mass.

    Keep the smallest saliency-descending prefix reaching coverage of the
    total mass, never fewer than ceil(min_keep_ratio * M), rounded up to a
    merge_factor multiple. Surviving anchors keep their original order.
    """
    s = res.saliency
    m = s.shape[0]
    # stable descending order, ties broken toward the lower anchor index
    order = np.lexsort((np.arange(m), -s))
    csum = np.cumsum(s[order])
    total = csum[-1]
    if total <= 0.0:
        k = m  # degenerate all-zero saliency: keep everything
    else:
        k = int(np.searchsorted(csum, coverage * total, side="left")) + 1
    k = max(k, math.ceil(min_keep_ratio * m))
    k = min(m, math.ceil(k / merge_factor) * merge_factor)
    kept = np.zeros(m, dtype=bool)
    kept[order[:k]] = True
    return AggregationResult(res.weights, res.compact, res.saliency, kept)


def compact_positions(cfg: PipelineConfig) -> np.ndarray:
    """Anchor position rows: the dense encoder table at an even stride."""
    return anchor_stride_indices(cfg.full_vis_len, cfg.compact_vis_len)


def compact_attention(x_normed, blk, route, heads: int,
                      route_override=None, prob_unused=None):
    """Multi-head attention with keys/values pooled into assignment slots.

    The score matrix is rows x slots, never rows x rows. Queries, keys, and
    values reuse the frozen projections on the same normalized input; the
    learnable route maps that input to a row-stochastic slot assignment whose
    column-normalized transpose pools keys and values.
    """
    q = nk.matmul(x_normed, blk.attn_q)
    k = nk.matmul(x_normed, blk.attn_k)
    v = nk.matmul(x_normed, blk.attn_v)
    if route_override is not None:
        assign = route_override
    else:
        assign = nk.softmax_rows(nk.matmul(x_normed, route))
    pool = nk.col_normalize(assign)
    pool_t = nk.transpose(pool)
    k_c = nk.matmul(pool_t, k)     # slots x dim
    v_c = nk.matmul(pool_t, v)
    dim = nk.val(q).shape[1]
    head_dim = dim // heads
    scl = 1.0 / np.sqrt(head_dim)
    outs = []
    for h in range(heads):
        a, b = h * head_dim, (h + 1) * head_dim
        qs = nk.col_slice(q, a, b)
        ks = nk.col_slice(k_c, a, b)
        vs = nk.col_slice(v_c, a, b)
        with nk.region("compact_visual_attention"):
            scores = nk.matmul(qs, nk.transpose(ks))
            probs = nk.softmax_rows(scores, scl)
            outs.append(nk.matmul(probs, vs))
    return nk.matmul(nk.concat_cols(outs), blk.attn_out)


def encode_compact(z0, pos_rows: np.ndarray, bb: BackboneWeights,
                   params: CompactParams, cfg: PipelineConfig,
                   route_overrides=None):
    """Compact visual encoder over surviving anchors.

    pos_rows indexes the dense positional table for each surviving anchor.
    route_overrides (test hook) bypasses the learned assignment per layer.
    """
    rows = nk.val(z0).shape[0]
    if rows < 1:
        raise nk.ShapeError("compact encoder needs at least one anchor")
    h = nk.add(z0, bb.vis_pos[pos_rows])
    for li, blk in enumerate(bb.vis_blocks):
        override = None if route_overrides is None else route_overrides[li]
        x_normed = nk.layernorm_rows(h, cfg.ln_eps)
        attn = compact_attention(x_normed, blk, params.routes[li],
                                 cfg.vis_heads, route_override=override)
        h = nk.add(h, attn)
        h = nk.add(h, mlp(nk.layernorm_rows(h, cfg.ln_eps), blk))
    return h


def project_compact(h_c, params: CompactParams, cfg: PipelineConfig):
    rows = nk.val(h_c).shape[0]
    assert rows % cfg.merge_factor == 0, \
        "retention floor must deliver a merge-aligned anchor count"
    with nk.region("projector"):
        return project_merge(h_c, params.proj_w, params.proj_b,
                             cfg.merge_factor)


def compact_span_positions(cfg: PipelineConfig, kept_merged: int) -> np.ndarray:
    """Evenly strided position ids inside the dense visual span."""
    t_p = cfg.merged_vis_len
    span_start = cfg.prefix_len
    return span_start + np.array([(i * t_p) // kept_merged
                                  for i in range(kept_merged)], dtype=np.intp)


def merge_compact(text_emb, visual_emb, cfg: PipelineConfig) -> MultimodalSequence:
    """Compact layout: text keeps its dense positions; the visual span is
    replaced by the compact tokens at evenly strided dense position ids."""
    kept_merged = nk.val(visual_emb).shape[0]
    pre = cfg.prefix_len
    t_p = cfg.merged_vis_len
    segments = ([TEXT] * pre + [VISUAL] * kept_merged
                + [TEXT] * (cfg.prompt_len - pre))
    positions = np.concatenate([
        np.arange(pre, dtype=np.intp),
        compact_span_positions(cfg, kept_merged),
        np.arange(pre + t_p, cfg.prompt_len + t_p, dtype=np.intp),
    ])
    if cfg.prompt_len == pre:
        parts = [text_emb[:pre], visual_emb]
    else:
        parts = [text_emb[:pre], visual_emb, text_emb[pre:]]
    emb = nk.concat_rows([p for p in parts if nk.val(p).shape[0] > 0])
    return MultimodalSequence(emb, segments, positions)


def compact_student_logits(x0, prompt_ids, cfg: PipelineConfig,
                           bb: BackboneWeights, params: CompactParams,
                           floor_enabled: bool = False):
    """Aggregate-encode-project-prefill, returning logits at every position.

    The shared forward used by training (params as tape Vars, floor disabled)
    and by logit-level evaluation.
    """
    res = aggregate(x0, params.anchors, cfg.agg_temp, cfg.ln_eps)
    pos_rows = compact_positions(cfg)
    z = res.compact
    if floor_enabled:
        res = retention_floor(res, cfg.min_keep_ratio, cfg.coverage,
                              cfg.merge_factor)
        z = nk.row_gather(res.compact, np.flatnonzero(res.kept))
        pos_rows = pos_rows[res.kept]
    h = encode_compact(z, pos_rows, bb, params, cfg)
    vis = project_compact(h, params, cfg)
    seq = add_positions(merge_compact(embed_text(prompt_ids, bb), vis, cfg), bb)
    return prefill(seq, bb, cfg, cache=None), seq


def run_compact(x0: np.ndarray, prompt_ids, cfg: PipelineConfig,
                bb: BackboneWeights, params: CompactParams,
                steps: int | None = None, floor_enabled: bool = True,
                trace: ShapeTrace | None = None):
    """Full compact pipeline; returns (token ids, RunStats).

    The overhead stage covers aggregation plus the retention floor, the two
    operations the dense pipeline does not perform.
    """
    steps = cfg.max_new_tokens if steps is None else steps
    clock = StageClock()
    total = StageClock()
    stats = RunStats(model="civic")
    total.start()

    clock.start()
    res = aggregate(x0, params.anchors, cfg.agg_temp, cfg.ln_eps)
    if floor_enabled:
        res = retention_floor(res, cfg.min_keep_ratio, cfg.coverage,
                              cfg.merge_factor)
        kept_idx = np.flatnonzero(res.kept)
        z = nk.val(res.compact)[kept_idx]
        pos_rows = compact_positions(cfg)[kept_idx]
    else:
        z = nk.val(res.compact)
        pos_rows = compact_positions(cfg)
    stats.overhead_s = clock.stop()
    if trace is not None:
        trace.note("aggregate", nk.val(res.compact))
        trace.note("floor", z)

    clock.start()
    h = encode_compact(z, pos_rows, bb, params, cfg)
    stats.vision_enc_s = clock.stop()
    if trace is not None:
        trace.note("encode", nk.val(h))

    clock.start()
    vis = project_compact(h, params, cfg)
    stats.proj_s = clock.stop()
    if trace is not None:
        trace.note("project", nk.val(vis))

    seq = add_positions(merge_compact(embed_text(prompt_ids, bb), vis, cfg), bb)
    if trace is not None:
        trace.note("merge", nk.val(seq.embeddings))
    cache = make_cache(cfg, len(seq))

    clock.start()
    logits = prefill(seq, bb, cfg, cache)
    stats.prefill_s = clock.stop()
    stats.prefill_tokens = len(seq)
    stats.kv_cache_bytes = cache.bytes()
    if trace is not None:
        trace.note("prefill", nk.val(logits))

    # decode positions continue the dense numbering after the suffix text
    dense_end = cfg.prompt_len + cfg.merged_vis_len
    clock.start()
    ids = decode_greedy(cache, logits, steps, bb, cfg, start_pos=dense_end)
    stats.decode_s = clock.stop()

    stats.total_s = total.stop()
    return ids, stats
