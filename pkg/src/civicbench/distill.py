"""Text-aligned KL distillation of the compact pipeline.

Only the compact-specific parameters train (anchor bank, per-layer routes,
compact projection); the backbone is a frozen teacher. The loss is a
temperature-scaled KL between teacher and student next-token distributions
at aligned nonvisual positions: identity alignment before the visual span,
a constant shift after it.

Training runs the reference numpy kernels in a single BLAS thread so the
trajectory is reproducible bit-for-bit regardless of the benchmark backend.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import numkit as nk
from .civic import compact_student_logits
from .config import PipelineConfig
from .model_core import (add_positions, embed_text, encode_dense, merge_dense,
                         prefill, project_dense)
from .weights import (BackboneWeights, CompactParams, build_backbone,
                      build_compact, theta_checksum)


class TrainDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlignmentMap:
    """Row map from teacher text positions onto student text positions."""

    teacher_rows: np.ndarray
    student_rows: np.ndarray

    def __post_init__(self):
        if self.teacher_rows.shape != self.student_rows.shape:
            raise nk.ShapeError("alignment sides must pair one-to-one")
        if len(np.unique(self.student_rows)) != self.student_rows.size:
            raise nk.ShapeError("alignment must be injective")

    def __len__(self) -> int:
        return int(self.teacher_rows.size)


def build_alignment(cfg: PipelineConfig, kept_merged: int | None = None
                    ) -> AlignmentMap:
    """Pair every teacher text row with its student counterpart.

    Rows before the visual span map to themselves; rows after shift left by
    the span shrinkage. Visual rows appear on neither side.
    """
    t_p = cfg.merged_vis_len
    m_p = cfg.compact_merged_len if kept_merged is None else kept_merged
    if m_p > t_p:
        raise nk.ShapeError("student visual span exceeds the teacher span")
    pre = cfg.prefix_len
    l = cfg.prompt_len
    teacher = np.concatenate([np.arange(pre, dtype=np.intp),
                              np.arange(pre + t_p, l + t_p, dtype=np.intp)])
    shift = t_p - m_p
    student = np.where(teacher < pre, teacher, teacher - shift)
    return AlignmentMap(teacher, student.astype(np.intp))


def kl_loss(teacher_logits, student_logits, amap: AlignmentMap,
            temp: float, weight: float):
    """Mean aligned KL, scaled by weight * temp**2; differentiable in the
    student logits."""
    t = nk.val(teacher_logits)
    if t.shape[1] != nk.val(student_logits).shape[1]:
        raise nk.ShapeError(
            f"vocab mismatch: teacher {t.shape[1]}, "
            f"student {nk.val(student_logits).shape[1]}")
    t_rows = t[amap.teacher_rows]
    p_t = nk.get_kernel("softmax_rows", "numpy")(t_rows, 1.0 / temp)
    # KL(p_t || p_s) summed = H-term (constant) minus cross term
    neg_entropy = float((p_t * _safe_log(p_t)).sum())
    s_rows = nk.row_gather(student_logits, amap.student_rows)
    log_p_s = nk.log_softmax_rows(nk.scale(s_rows, 1.0 / temp))
    cross = nk.sum_all(nk.mul(p_t, log_p_s))
    scl = weight * temp * temp / len(amap)
    return nk.scale(nk.sub(np.full((1, 1), neg_entropy), cross), scl)


def _safe_log(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    live = p > 0
    out[live] = np.log(p[live])
    return out


@dataclass
class DistillSample:
    x0: np.ndarray
    prompt_ids: np.ndarray
    seed: int


def gen_synthetic(seed: int, n: int, cfg: PipelineConfig) -> list:
    """Seeded synthetic patch sheets: per-channel smooth gradients, waves,
    or block mosaics over the patch grid, clamped to [-3, 3]."""
    if n < 1:
        raise ValueError("need at least one sample")
    gh, gw = cfg.grid
    rows = np.arange(gh, dtype=np.float64)[:, None] / max(gh - 1, 1)
    cols = np.arange(gw, dtype=np.float64)[None, :] / max(gw - 1, 1)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        x = np.empty((cfg.full_vis_len, cfg.vis_dim), dtype=np.float64)
        for ch in range(cfg.vis_dim):
            kind = int(rng.integers(3))
            amp = rng.uniform(0.3, 1.5)
            if kind == 0:      # planar gradient
                field2d = (rng.normal() * rows + rng.normal() * cols
                           + 0.1 * rng.normal())
            elif kind == 1:    # smooth wave
                field2d = np.sin(rng.uniform(1, 6) * rows
                                 + rng.uniform(1, 6) * cols
                                 + rng.uniform(0, 2 * np.pi))
            else:              # block mosaic
                bh = int(rng.integers(1, max(gh // 2, 2)))
                bw = int(rng.integers(1, max(gw // 2, 2)))
                levels = rng.normal(size=(bh, bw))
                ri = np.minimum((np.arange(gh) * bh) // gh, bh - 1)
                ci = np.minimum((np.arange(gw) * bw) // gw, bw - 1)
                field2d = levels[np.ix_(ri, ci)]
            x[:, ch] = (amp * field2d).reshape(-1)
        x += 0.05 * rng.normal(size=x.shape)
        np.clip(x, -3.0, 3.0, out=x)
        ids = rng.integers(0, cfg.vocab, size=cfg.prompt_len)
        out.append(DistillSample(x, ids.astype(np.intp), seed))
    return out


@dataclass
class TrainState:
    params: dict                      # name -> ndarray, the trained set
    step: int = 0
    loss_history: list = field(default_factory=list)
    holdout_history: list = field(default_factory=list)  # (step, loss)
    moments: dict = field(default_factory=dict)

    def compact_params(self) -> CompactParams:
        routes = [self.params[k] for k in sorted(self.params)
                  if k.startswith("route.")]
        return CompactParams(self.params["anchors"], routes,
                             self.params["proj_w"], self.params["proj_b"])


def _param_dict(params: CompactParams) -> dict:
    d = {"anchors": params.anchors.copy(),
         "proj_w": params.proj_w.copy(), "proj_b": params.proj_b.copy()}
    for i, r in enumerate(params.routes):
        d[f"route.{i}"] = r.copy()
    return d


def teacher_logits(x0: np.ndarray, prompt_ids, cfg: PipelineConfig,
                   bb: BackboneWeights) -> np.ndarray:
    """Frozen dense forward, logits at every position."""
    h = encode_dense(x0, bb, cfg)
    vis = project_dense(h, bb, cfg)
    seq = add_positions(merge_dense(embed_text(prompt_ids, bb), vis, cfg), bb)
    return nk.val(prefill(seq, bb, cfg, cache=None))


def _adam_update(state: TrainState, grads: dict, lr: float,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
    t = state.step
    for name, g in grads.items():
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(g), np.zeros_like(g))
        m, v = state.moments[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.moments[name] = (m, v)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        state.params[name] = state.params[name] - lr * mhat / (np.sqrt(vhat)
                                                               + eps)


def _batch_loss(samples, teachers, params: CompactParams,
                cfg: PipelineConfig, bb: BackboneWeights, amap: AlignmentMap,
                tape: Optional[nk.Tape]):
    """Mean distillation loss over a full batch; taped when tape given."""
    if tape is not None:
        tracked = CompactParams(
            tape.leaf(params.anchors),
            [tape.leaf(r) for r in params.routes],
            tape.leaf(params.proj_w), tape.leaf(params.proj_b))
    else:
        tracked = params
    total = None
    for smp, t_logits in zip(samples, teachers):
        s_logits, _ = compact_student_logits(smp.x0, smp.prompt_ids, cfg, bb,
                                             tracked, floor_enabled=False)
        term = kl_loss(t_logits, s_logits, amap, cfg.distill_temp,
                       cfg.distill_weight)
        total = term if total is None else nk.add(total, term)
    mean = nk.scale(total, 1.0 / len(samples))
    return mean, tracked


def _tracked_grads(tape: nk.Tape, loss, tracked: CompactParams) -> dict:
    grads = tape.backward(loss)
    out = {"anchors": tape.grad(grads, tracked.anchors),
           "proj_w": tape.grad(grads, tracked.proj_w),
           "proj_b": tape.grad(grads, tracked.proj_b)}
    for i, r in enumerate(tracked.routes):
        out[f"route.{i}"] = tape.grad(grads, r)
    return out


def train(cfg: PipelineConfig, metrics_path=None,
          bb: Optional[BackboneWeights] = None,
          params: Optional[CompactParams] = None,
          train_set=None, holdout_set=None,
          steps: Optional[int] = None) -> TrainState:
    """Full-batch distillation; returns the final TrainState.

    Deterministic for a given config: reference kernels, one BLAS thread,
    seeded data, fixed batch order. The backbone checksum is asserted
    unchanged across the run.
    """
    with nk.use_backend("numpy"), threadpool_limits(limits=1):
        return _train_inner(cfg, metrics_path, bb, params, train_set,
                            holdout_set, steps)


def _train_inner(cfg, metrics_path, bb, params, train_set, holdout_set,
                 steps) -> TrainState:
    if bb is None:
        bb = build_backbone(cfg)
    if params is None:
        params = build_compact(cfg, bb)
    if train_set is None:
        train_set = gen_synthetic(cfg.seed, cfg.train_samples, cfg)
    if holdout_set is None:
        holdout_set = gen_synthetic(cfg.seed + 1, cfg.holdout_samples, cfg)
    steps = cfg.train_steps if steps is None else steps
    checksum = theta_checksum(bb)
    amap = build_alignment(cfg)

    teachers = [teacher_logits(s.x0, s.prompt_ids, cfg, bb)
                for s in train_set]
    holdout_teachers = [teacher_logits(s.x0, s.prompt_ids, cfg, bb)
                        for s in holdout_set]

    state = TrainState(params=_param_dict(params))

    def holdout_loss() -> float:
        cur = state.compact_params()
        loss, _ = _batch_loss(holdout_set, holdout_teachers, cur, cfg, bb,
                              amap, tape=None)
        return float(nk.val(loss)[0, 0])

    rows = []
    h0 = holdout_loss()
    state.holdout_history.append((0, h0))
    rows.append((0, "", f"{h0:.10e}"))

    for step in range(1, steps + 1):
        state.step = step
        tape = nk.Tape()
        loss, tracked = _batch_loss(train_set, teachers,
                                    state.compact_params(), cfg, bb, amap,
                                    tape)
        loss_val = float(nk.val(loss)[0, 0])
        if not np.isfinite(loss_val):
            norms = {k: float(np.linalg.norm(v))
                     for k, v in state.params.items()}
            raise TrainDivergedError(
                f"nonfinite loss at step {step}; parameter norms {norms}")
        grads = _tracked_grads(tape, loss, tracked)
        _adam_update(state, grads, cfg.lr)
        state.loss_history.append(loss_val)

        at_eval = (cfg.eval_every > 0 and step % cfg.eval_every == 0)
        if at_eval or step == steps:
            h = holdout_loss()
            state.holdout_history.append((step, h))
            rows.append((step, f"{loss_val:.10e}", f"{h:.10e}"))
        else:
            rows.append((step, f"{loss_val:.10e}", ""))

    if theta_checksum(bb) != checksum:
        raise TrainDivergedError("frozen backbone was modified during training")

    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "holdout_loss"])
            w.writerows(rows)
    return state
