"""The dense reference pipeline: visual encoding, merge-projection, multimodal
sequence assembly, causal prefill with a KV cache, and greedy decoding.

Attention materializes the full square score matrix and masks it additively,
so the recorded score MACs follow the exact quadratic law the cost model
predicts, and causality is exact (masked probabilities underflow to 0.0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .config import PipelineConfig
from .report import RunStats, StageClock
from .weights import BackboneWeights, BlockWeights

TEXT = "text"
VISUAL = "visual"


@dataclass
class MultimodalSequence:
    embeddings: np.ndarray          # len x lm_dim, positions already added
    segments: list[str]             # per-token TEXT / VISUAL tag
    positions: np.ndarray           # per-token position id (dense numbering)

    def __len__(self) -> int:
        return self.embeddings.shape[0] if not isinstance(
            self.embeddings, nk.Var) else self.embeddings.value.shape[0]


class KVCache:
    """Per-layer preallocated key/value buffers with exact byte accounting."""

    def __init__(self, layers: int, dim: int, capacity: int,
                 bytes_per_elem: int, dtype):
        self.layers = layers
        self.dim = dim
        self.capacity = capacity
        self.bytes_per_elem = bytes_per_elem
        self.current_len = 0
        self.keys = [np.empty((capacity, dim), dtype=dtype) for _ in range(layers)]
        self.values = [np.empty((capacity, dim), dtype=dtype) for _ in range(layers)]

    def fill(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        """Install the prefill keys/values for one layer."""
        n = k.shape[0]
        if n > self.capacity:
            raise ValueError(f"cache capacity {self.capacity} < prefill {n}")
        self.keys[layer][:n] = k
        self.values[layer][:n] = v
        self.current_len = n

    def append(self, layer: int, k_row: np.ndarray, v_row: np.ndarray) -> None:
        pos = self.current_len
        if pos >= self.capacity:
            raise ValueError("cache capacity exhausted")
        self.keys[layer][pos] = k_row
        self.values[layer][pos] = v_row

    def advance(self) -> None:
        """Commit one decode step after every layer appended its row."""
        self.current_len += 1

    def layer_view(self, layer: int, length: int | None = None):
        n = self.current_len if length is None else length
        return self.keys[layer][:n], self.values[layer][:n]

    def bytes(self) -> int:
        return 2 * self.layers * self.current_len * self.dim * self.bytes_per_elem


# ---------------------------------------------------------------------------
# transformer pieces (shared by the dense and compact pipelines)
# ---------------------------------------------------------------------------


def attention_seq(x_normed, blk: BlockWeights, heads: int, causal: bool,
                  interaction_region: str, prob_colsum=None):
    """Full-sequence multi-head attention on a pre-normalized input.

    Returns (output, keys, values). Score and value-mix products are counted
    under interaction_region (2 * len^2 * dim MACs for the dense square case);
    the q/k/v/output projections fall under the caller's ambient region.
    If prob_colsum is given (ndarray of len), attention probability column
    sums are accumulated into it across heads.
    """
    q = nk.matmul(x_normed, blk.attn_q)
    k = nk.matmul(x_normed, blk.attn_k)
    v = nk.matmul(x_normed, blk.attn_v)
    dim = nk.val(q).shape[1]
    head_dim = dim // heads
    scl = 1.0 / np.sqrt(head_dim)
    outs = []
    for h in range(heads):
        a, b = h * head_dim, (h + 1) * head_dim
        qs = nk.col_slice(q, a, b)
        ks = nk.col_slice(k, a, b)
        vs = nk.col_slice(v, a, b)
        with nk.region(interaction_region):
            scores = nk.matmul(qs, nk.transpose(ks))
            probs = (nk.causal_softmax_rows(scores, scl) if causal
                     else nk.softmax_rows(scores, scl))
            outs.append(nk.matmul(probs, vs))
        if prob_colsum is not None:
            prob_colsum += nk.val(probs).sum(axis=0)
    merged = nk.concat_cols(outs)
    return nk.matmul(merged, blk.attn_out), k, v


def mlp(x_normed, blk: BlockWeights):
    return nk.matmul(nk.gelu(nk.matmul(x_normed, blk.mlp_in)), blk.mlp_out)


def encoder_block(h, blk: BlockWeights, heads: int, eps: float,
                  interaction_region: str = "visual_attention",
                  prob_colsum=None):
    """Pre-norm block: full self-attention then a ratio-4 MLP, both residual."""
    attn, _, _ = attention_seq(nk.layernorm_rows(h, eps), blk, heads,
                               causal=False,
                               interaction_region=interaction_region,
                               prob_colsum=prob_colsum)
    h = nk.add(h, attn)
    return nk.add(h, mlp(nk.layernorm_rows(h, eps), blk))


def encode_dense(x0, bb: BackboneWeights, cfg: PipelineConfig):
    """Dense visual encoder: positions added once, then vis_layers blocks."""
    x = nk.val(x0)
    if x.shape != (cfg.full_vis_len, cfg.vis_dim):
        raise nk.ShapeError(
            f"visual input must be {(cfg.full_vis_len, cfg.vis_dim)}, "
            f"got {x.shape}")
    h = nk.add(x0, bb.vis_pos)
    for blk in bb.vis_blocks:
        h = encoder_block(h, blk, cfg.vis_heads, cfg.ln_eps)
    return h


def project_merge(h, proj_w, proj_b, merge_factor: int):
    """Concatenate merge_factor consecutive tokens, then one linear + gelu."""
    rows = nk.val(h).shape[0]
    if rows % merge_factor != 0:
        raise nk.ShapeError(
            f"projector needs rows divisible by {merge_factor}, got {rows}")
    cols = nk.val(h).shape[1]
    grouped = nk.reshape(h, rows // merge_factor, merge_factor * cols)
    return nk.gelu(nk.add_rowvec(nk.matmul(grouped, proj_w), proj_b))


def project_dense(h, bb: BackboneWeights, cfg: PipelineConfig):
    with nk.region("projector"):
        return project_merge(h, bb.proj_w, bb.proj_b, cfg.merge_factor)


def embed_text(prompt_ids, bb: BackboneWeights) -> np.ndarray:
    ids = np.asarray(prompt_ids, dtype=np.intp)
    return bb.tok_embed[ids]


def merge_dense(text_emb, visual_emb, cfg: PipelineConfig) -> MultimodalSequence:
    """Layout [prefix text | visual | suffix text], positions 0..len-1."""
    t_vis = nk.val(visual_emb).shape[0]
    pre = cfg.prefix_len
    segments = [TEXT] * pre + [VISUAL] * t_vis + [TEXT] * (cfg.prompt_len - pre)
    positions = np.arange(cfg.prompt_len + t_vis, dtype=np.intp)
    if cfg.prompt_len == pre:
        parts = [text_emb[:pre], visual_emb]
    else:
        parts = [text_emb[:pre], visual_emb, text_emb[pre:]]
    emb = nk.concat_rows([p for p in parts if nk.val(p).shape[0] > 0])
    return MultimodalSequence(emb, segments, positions)


def add_positions(seq: MultimodalSequence, bb: BackboneWeights) -> MultimodalSequence:
    pos = bb.lm_pos[seq.positions]
    return MultimodalSequence(nk.add(seq.embeddings, pos),
                              seq.segments, seq.positions)


def prefill(seq: MultimodalSequence, bb: BackboneWeights, cfg: PipelineConfig,
            cache: KVCache | None = None):
    """Causal pass over the merged sequence; returns logits at every position."""
    x = seq.embeddings
    for li, blk in enumerate(bb.lm_blocks):
        attn, k, v = attention_seq(nk.layernorm_rows(x, cfg.ln_eps), blk,
                                   cfg.lm_heads, causal=True,
                                   interaction_region="llm_prefill_attention")
        if cache is not None:
            cache.fill(li, nk.val(k), nk.val(v))
        x = nk.add(x, attn)
        x = nk.add(x, mlp(nk.layernorm_rows(x, cfg.ln_eps), blk))
    return nk.matmul(nk.layernorm_rows(x, cfg.ln_eps), bb.lm_head)


def decode_greedy(cache: KVCache, last_logits: np.ndarray, steps: int,
                  bb: BackboneWeights, cfg: PipelineConfig,
                  start_pos: int) -> list[int]:
    """Argmax decoding; ties break toward the lowest token id (argmax rule).

    start_pos is the position id of the first generated token; compact
    pipelines keep dense position numbering, so it is always L + T_p.
    """
    if steps == 0:
        return []
    out: list[int] = []
    heads = cfg.lm_heads
    scl = 1.0 / np.sqrt(cfg.lm_head_dim)
    token = int(np.argmax(nk.val(last_logits)[-1]))
    out.append(token)
    with nk.region("decode"):
        for step in range(1, steps + 1):
            x = bb.tok_embed[token:token + 1] + bb.lm_pos[start_pos + step - 1:
                                                          start_pos + step]
            for li, blk in enumerate(bb.lm_blocks):
                xa = nk.layernorm_rows(x, cfg.ln_eps)
                q = nk.matmul(xa, blk.attn_q)
                cache.append(li, nk.matmul(xa, blk.attn_k)[0],
                             nk.matmul(xa, blk.attn_v)[0])
                k, v = cache.layer_view(li, cache.current_len + 1)
                attn = nk.matmul(nk.dec_attend_one(q, k, v, heads, scl),
                                 blk.attn_out)
                x = nk.add(x, attn)
                x = nk.add(x, mlp(nk.layernorm_rows(x, cfg.ln_eps), blk))
            cache.advance()
            if step == steps:
                break
            logits = nk.matmul(nk.layernorm_rows(x, cfg.ln_eps), bb.lm_head)
            token = int(np.argmax(logits[0]))
            out.append(token)
    return out


def make_cache(cfg: PipelineConfig, prefill_len: int) -> KVCache:
    return KVCache(cfg.lm_layers, cfg.lm_dim,
                   prefill_len + cfg.max_new_tokens,
                   cfg.kv_bytes_per_elem, cfg.np_dtype)


def run_dense(x0: np.ndarray, prompt_ids, cfg: PipelineConfig,
              bb: BackboneWeights, steps: int | None = None):
    """Full dense pipeline; returns (token ids, RunStats)."""
    steps = cfg.max_new_tokens if steps is None else steps
    clock = StageClock()
    total = StageClock()
    stats = RunStats(model="dense")
    total.start()

    clock.start()
    h = encode_dense(x0, bb, cfg)
    stats.vision_enc_s = clock.stop()

    clock.start()
    vis = project_dense(h, bb, cfg)
    stats.proj_s = clock.stop()

    seq = add_positions(merge_dense(embed_text(prompt_ids, bb), vis, cfg), bb)
    cache = make_cache(cfg, len(seq))

    clock.start()
    logits = prefill(seq, bb, cfg, cache)
    stats.prefill_s = clock.stop()
    stats.prefill_tokens = len(seq)
    stats.kv_cache_bytes = cache.bytes()

    clock.start()
    ids = decode_greedy(cache, logits, steps, bb, cfg, start_pos=len(seq))
    stats.decode_s = clock.stop()

    stats.total_s = total.stop()
    return ids, stats
