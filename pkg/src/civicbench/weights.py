"""Model parameters: frozen backbone, trainable compact parameters, checkpoints.

The backbone is drawn from a generator seeded with cfg.seed in a fixed
documented order, so it is identical across compact-pathway settings. Compact
parameters come from an independent generator (cfg.seed + 1): sweeping anchor
counts or slot counts never perturbs the backbone.

Checkpoint format (stable): a JSON object
  {"format": "civicbench-weights-v1",
   "tensors": {name: {"shape": [rows, cols], "data": [row-major floats]}}}
Backbone tensors use the prefixes vision./proj./lm.; compact parameters live
under the disjoint civic. namespace.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig

CHECKPOINT_FORMAT = "civicbench-weights-v1"

_INIT_STD = 0.02
# positional tables and the output head carry deliberately strong scales:
# position structure is the content-independent signal the compact pathway
# distills, and a louder head keeps teacher logit differences above the
# numerical noise floor at these small dimensions
_POS_STD = 0.2
_HEAD_STD = 0.1


@dataclass
class BlockWeights:
    attn_q: np.ndarray
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_out: np.ndarray
    mlp_in: np.ndarray
    mlp_out: np.ndarray

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("attn_q", "attn_k", "attn_v",
                          "attn_out", "mlp_in", "mlp_out")}


@dataclass
class BackboneWeights:
    """All frozen parameters: encoder, projector, and language model."""
    vis_pos: np.ndarray                  # full_vis_len x vis_dim, added once
    vis_blocks: list[BlockWeights]
    proj_w: np.ndarray                   # (merge_factor*vis_dim) x lm_dim
    proj_b: np.ndarray                   # 1 x lm_dim
    tok_embed: np.ndarray                # vocab x lm_dim
    lm_pos: np.ndarray                   # (dense_prefill_len+max_new) x lm_dim
    lm_blocks: list[BlockWeights]
    lm_head: np.ndarray                  # lm_dim x vocab

    def named(self) -> dict[str, np.ndarray]:
        out = {"vision.pos": self.vis_pos}
        for i, blk in enumerate(self.vis_blocks):
            out.update(blk.named(f"vision.layers.{i}"))
        out["proj.w"] = self.proj_w
        out["proj.b"] = self.proj_b
        out["lm.tok"] = self.tok_embed
        out["lm.pos"] = self.lm_pos
        for i, blk in enumerate(self.lm_blocks):
            out.update(blk.named(f"lm.layers.{i}"))
        out["lm.head"] = self.lm_head
        return out


@dataclass
class CompactParams:
    """Trainable parameters of the compact pathway (disjoint from the backbone)."""
    anchors: np.ndarray                  # compact_vis_len x vis_dim
    routes: list[np.ndarray] = field(default_factory=list)  # vis_dim x kv_slots
    proj_w: np.ndarray = None            # copies of the dense projector at init
    proj_b: np.ndarray = None

    def named(self) -> dict[str, np.ndarray]:
        out = {"civic.anchors": self.anchors}
        for i, r in enumerate(self.routes):
            out[f"civic.layers.{i}.route"] = r
        out["civic.proj.w"] = self.proj_w
        out["civic.proj.b"] = self.proj_b
        return out


def _block(rng, dim: int) -> BlockWeights:
    def w(r, c):
        return rng.normal(0.0, _INIT_STD, size=(r, c))
    return BlockWeights(
        attn_q=w(dim, dim), attn_k=w(dim, dim), attn_v=w(dim, dim),
        attn_out=w(dim, dim), mlp_in=w(dim, 4 * dim), mlp_out=w(4 * dim, dim))


def build_backbone(cfg: PipelineConfig) -> BackboneWeights:
    rng = np.random.default_rng(cfg.seed)
    vis_pos = rng.normal(0.0, _POS_STD, size=(cfg.full_vis_len, cfg.vis_dim))
    vis_blocks = [_block(rng, cfg.vis_dim) for _ in range(cfg.vis_layers)]
    proj_w = rng.normal(0.0, _INIT_STD,
                        size=(cfg.merge_factor * cfg.vis_dim, cfg.lm_dim))
    proj_b = np.zeros((1, cfg.lm_dim))
    tok_embed = rng.normal(0.0, _INIT_STD, size=(cfg.vocab, cfg.lm_dim))
    lm_pos = rng.normal(0.0, _POS_STD,
                        size=(cfg.dense_prefill_len + cfg.max_new_tokens,
                              cfg.lm_dim))
    lm_blocks = [_block(rng, cfg.lm_dim) for _ in range(cfg.lm_layers)]
    lm_head = rng.normal(0.0, _HEAD_STD, size=(cfg.lm_dim, cfg.vocab))
    return BackboneWeights(vis_pos, vis_blocks, proj_w, proj_b,
                           tok_embed, lm_pos, lm_blocks, lm_head)


def anchor_stride_indices(full_len: int, compact_len: int) -> np.ndarray:
    return np.array([(i * full_len) // compact_len for i in range(compact_len)],
                    dtype=np.intp)


def build_compact(cfg: PipelineConfig,
                  backbone: BackboneWeights) -> CompactParams:
    rng = np.random.default_rng(cfg.seed + 1)
    # anchors start as an even-stride subsample of a full-length Gaussian
    # sheet scaled 1/sqrt(vis_dim), so larger anchor budgets nest smaller ones
    sheet = rng.normal(0.0, 1.0 / np.sqrt(cfg.vis_dim),
                       size=(cfg.full_vis_len, cfg.vis_dim))
    anchors = sheet[anchor_stride_indices(cfg.full_vis_len,
                                          cfg.compact_vis_len)].copy()
    routes = [rng.normal(0.0, _INIT_STD, size=(cfg.vis_dim, cfg.kv_slots))
              for _ in range(cfg.vis_layers)]
    return CompactParams(anchors=anchors, routes=routes,
                         proj_w=backbone.proj_w.copy(),
                         proj_b=backbone.proj_b.copy())


def cast_backbone(bb: BackboneWeights, dtype) -> BackboneWeights:
    def c(a):
        return np.ascontiguousarray(a, dtype=dtype)

    def cb(blk):
        return BlockWeights(*(c(getattr(blk, f)) for f in
                              ("attn_q", "attn_k", "attn_v",
                               "attn_out", "mlp_in", "mlp_out")))
    return BackboneWeights(
        c(bb.vis_pos), [cb(b) for b in bb.vis_blocks], c(bb.proj_w),
        c(bb.proj_b), c(bb.tok_embed), c(bb.lm_pos),
        [cb(b) for b in bb.lm_blocks], c(bb.lm_head))


def cast_compact(cp: CompactParams, dtype) -> CompactParams:
    def c(a):
        return np.ascontiguousarray(a, dtype=dtype)
    return CompactParams(c(cp.anchors), [c(r) for r in cp.routes],
                         c(cp.proj_w), c(cp.proj_b))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, named: dict[str, np.ndarray]) -> None:
    payload = {"format": CHECKPOINT_FORMAT, "tensors": {}}
    for name in sorted(named):
        a = np.asarray(named[name], dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"tensor {name!r} must be 2-D, got {a.shape}")
        payload["tensors"][name] = {
            "shape": [int(a.shape[0]), int(a.shape[1])],
            "data": a.reshape(-1).tolist(),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format')!r}")
    out = {}
    for name, rec in payload["tensors"].items():
        rows, cols = rec["shape"]
        a = np.asarray(rec["data"], dtype=np.float64).reshape(rows, cols)
        out[name] = a
    return out


def compact_from_named(named: dict[str, np.ndarray],
                       vis_layers: int) -> CompactParams:
    return CompactParams(
        anchors=named["civic.anchors"],
        routes=[named[f"civic.layers.{i}.route"] for i in range(vis_layers)],
        proj_w=named["civic.proj.w"],
        proj_b=named["civic.proj.b"])


def theta_checksum(bb: BackboneWeights) -> str:
    """Order-stable digest of every backbone tensor (frozen-weights witness)."""
    h = hashlib.sha256()
    for name, a in sorted(bb.named().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()
