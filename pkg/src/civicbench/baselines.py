"""Instrumented post-hoc token pruning baselines.

Both variants run the dense visual encoder up to a pruning layer, score the
patch rows, keep a fraction of them, and continue encoding on the shortened
buffer. They differ at the projector interface:

* dense_restore: pruned slots are re-filled from their nearest kept neighbor,
  so the projector and everything after it see dense-sized buffers again.
* propagate: the shortened stream flows through the projector, so the prefill
  stays short.

Every routing action (score, select, gather, restore, scatter_unmerge) is
wall-clock timed into a RoutingOpLog; that log is the baseline's accounted
overhead. The point of these stand-ins is the structural dichotomy: paying
routing cost without shrinking the interface vs actually shrinking it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .config import ConfigError, PipelineConfig
from .model_core import (MultimodalSequence, TEXT, VISUAL, add_positions,
                         attention_seq, decode_greedy, embed_text, make_cache,
                         mlp, prefill, project_dense)
from .report import RunStats, StageClock
from .weights import BackboneWeights

ROUTING_OPS = ("score", "select", "gather", "scatter_unmerge", "restore")


@dataclass
class RoutingOpLog:
    """Per-op ledger of routing work the dense path never performs.

    Entries are (op kind, wall seconds, element count) triples, appended in
    execution order.
    """

    entries: list = field(default_factory=list)

    def add(self, kind: str, seconds: float, elements: int) -> None:
        if kind not in ROUTING_OPS:
            raise ValueError(f"unknown routing op kind {kind!r}")
        if seconds < 0:
            raise ValueError("op durations must be nonnegative")
        self.entries.append((kind, seconds, int(elements)))

    def total(self) -> float:
        return sum(sec for _, sec, _ in self.entries)


class _TimedOp:
    """Times one routing op into a log; element count set before exit."""

    def __init__(self, log: RoutingOpLog, kind: str):
        self.log, self.kind, self.elements = log, kind, 0

    def __enter__(self):
        self._t0 = time.perf_counter_ns()
        return self

    def __exit__(self, *exc):
        self.log.add(self.kind, (time.perf_counter_ns() - self._t0) / 1e9,
                     self.elements)
        return False


@dataclass(frozen=True)
class PostHocConfig:
    keep_ratio: float = 0.75
    prune_layer: int | None = None   # None: last encoder layer
    mode: str = "dense_restore"      # or "propagate"
    scoring: str = "attn_mass"       # or "norm"

    def resolved_layer(self, cfg: PipelineConfig) -> int:
        layer = self.prune_layer
        if layer is None:
            layer = cfg.vis_layers - 1
        if not 0 <= layer < cfg.vis_layers:
            raise ConfigError(
                f"prune_layer {layer} outside encoder depth {cfg.vis_layers}")
        return layer

    def validate(self) -> None:
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError("keep_ratio must lie in (0, 1]")
        if self.mode not in ("dense_restore", "propagate"):
            raise ConfigError(f"unknown post-hoc mode {self.mode!r}")
        if self.scoring not in ("attn_mass", "norm"):
            raise ConfigError(f"unknown post-hoc scoring {self.scoring!r}")


def kept_count(t_e: int, keep_ratio: float, merge_factor: int,
               mode: str) -> int:
    """Tokens surviving the prune: ceil(keep_ratio * t_e), aligned up to a
    merge_factor multiple in propagate mode so row grouping stays exact."""
    k = math.ceil(keep_ratio * t_e)
    if k <= 0:
        raise ConfigError("degenerate pruning budget: zero tokens kept")
    if mode == "propagate":
        k = min(t_e, math.ceil(k / merge_factor) * merge_factor)
    return k


def route_cost(log: RoutingOpLog) -> float:
    """Total accounted routing cost in seconds."""
    return log.total()


def nearest_kept_restore(h_kept: np.ndarray, kept_idx: np.ndarray,
                         t_e: int) -> np.ndarray:
    """Rebuild a dense t_e-row buffer: every slot takes the row of its
    nearest kept slot (ties toward the earlier one); kept slots map to
    themselves."""
    pos = np.arange(t_e)
    d = np.abs(pos[:, None] - kept_idx[None, :])
    return h_kept[np.argmin(d, axis=1)]


def _encoder_layers(h, bb: BackboneWeights, cfg: PipelineConfig,
                    lo: int, hi: int, colsum_on: int = -1, colsum=None):
    """Encoder layers [lo, hi); attention column mass is accumulated only on
    layer colsum_on (the scoring layer)."""
    for li in range(lo, hi):
        blk = bb.vis_blocks[li]
        x_normed = nk.layernorm_rows(h, cfg.ln_eps)
        attn, _, _ = attention_seq(
            x_normed, blk, cfg.vis_heads, causal=False,
            interaction_region="visual_attention",
            prob_colsum=colsum if li == colsum_on else None)
        h = nk.add(h, attn)
        h = nk.add(h, mlp(nk.layernorm_rows(h, cfg.ln_eps), blk))
    return h


def run_posthoc(x0: np.ndarray, prompt_ids, cfg: PipelineConfig,
                bb: BackboneWeights, ph: PostHocConfig,
                steps: int | None = None):
    """Dense encode to the prune layer, prune, finish encoding, restore or
    propagate at the projector; returns (token ids, RunStats, RoutingOpLog).
    """
    ph.validate()
    layer = ph.resolved_layer(cfg)
    steps = cfg.max_new_tokens if steps is None else steps
    log = RoutingOpLog()
    clock = StageClock()
    total = StageClock()
    stats = RunStats(model=f"posthoc_{ph.mode}")
    total.start()

    t_e = cfg.full_vis_len
    if x0.shape != (t_e, cfg.vis_dim):
        raise nk.ShapeError(f"expected patch sheet {(t_e, cfg.vis_dim)}, "
                            f"got {x0.shape}")

    clock.start()
    h = nk.add(x0, bb.vis_pos[:t_e])
    colsum = np.full(t_e, 0.0, dtype=np.float64) \
        if ph.scoring == "attn_mass" else None
    h = _encoder_layers(h, bb, cfg, 0, layer + 1,
                        colsum_on=layer, colsum=colsum)
    enc_s = clock.stop()

    with _TimedOp(log, "score") as op:
        if ph.scoring == "attn_mass":
            scores = colsum
        else:
            scores = np.sqrt((nk.val(h) ** 2).sum(axis=1))
        op.elements = t_e
    with _TimedOp(log, "select") as op:
        k = kept_count(t_e, ph.keep_ratio, cfg.merge_factor, ph.mode)
        order = np.lexsort((np.arange(t_e), -scores))
        kept_idx = np.sort(order[:k])
        op.elements = k
    with _TimedOp(log, "gather") as op:
        h = nk.val(h)[kept_idx]
        op.elements = h.size

    clock.start()
    h = _encoder_layers(h, bb, cfg, layer + 1, cfg.vis_layers)
    enc_s += clock.stop()
    stats.vision_enc_s = enc_s

    if ph.mode == "dense_restore":
        with _TimedOp(log, "restore") as op:
            h = nearest_kept_restore(nk.val(h), kept_idx, t_e)
            op.elements = (t_e - k) * cfg.vis_dim
        vis_positions = None  # dense layout below
        kept_merged = cfg.merged_vis_len
    else:
        with _TimedOp(log, "scatter_unmerge") as op:
            # surviving tokens keep the dense position of their merge group's
            # first member; kept_idx sorted and distinct makes these strictly
            # increasing
            kept_merged = k // cfg.merge_factor
            firsts = kept_idx[::cfg.merge_factor]
            vis_positions = (cfg.prefix_len
                             + firsts // cfg.merge_factor).astype(np.intp)
            op.elements = kept_merged
    stats.overhead_s = log.total()

    clock.start()
    vis = project_dense(h, bb, cfg)
    stats.proj_s = clock.stop()

    pre = cfg.prefix_len
    t_p = cfg.merged_vis_len
    if vis_positions is None:
        vis_positions = np.arange(pre, pre + t_p, dtype=np.intp)
    segments = ([TEXT] * pre + [VISUAL] * kept_merged
                + [TEXT] * (cfg.prompt_len - pre))
    positions = np.concatenate([
        np.arange(pre, dtype=np.intp),
        vis_positions,
        np.arange(pre + t_p, cfg.prompt_len + t_p, dtype=np.intp),
    ])
    text_emb = embed_text(prompt_ids, bb)
    parts = [text_emb[:pre], nk.val(vis), text_emb[pre:]]
    emb = np.concatenate([p for p in parts if p.shape[0] > 0], axis=0)
    seq = add_positions(MultimodalSequence(emb, segments, positions), bb)
    cache = make_cache(cfg, len(seq))

    clock.start()
    logits = prefill(seq, bb, cfg, cache)
    stats.prefill_s = clock.stop()
    stats.prefill_tokens = len(seq)
    stats.kv_cache_bytes = cache.bytes()

    clock.start()
    ids = decode_greedy(cache, logits, steps, bb, cfg,
                        start_pos=cfg.prompt_len + t_p)
    stats.decode_s = clock.stop()

    stats.total_s = total.stop()
    return ids, stats, log
