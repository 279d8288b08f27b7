"""Pipeline configuration, validation, and the flat key=value config format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value, key, or file syntax. CLI exit code 2."""


def _near_square_grid(n: int) -> tuple[int, int]:
    """Largest factor pair (h, w) of n with h <= w and h maximal."""
    h = int(math.isqrt(n))
    while h > 1 and n % h != 0:
        h -= 1
    return h, n // h


@dataclass(frozen=True)
class PipelineConfig:
    # visual encoder
    full_vis_len: int = 64          # dense visual token count
    vis_dim: int = 16
    vis_layers: int = 2
    vis_heads: int = 2
    merge_factor: int = 4           # tokens concatenated per projector group
    # language model
    lm_dim: int = 32
    lm_layers: int = 2
    lm_heads: int = 2
    prompt_len: int = 8             # total text tokens (prefix + suffix)
    prefix_len: int = 1             # text tokens before the visual span
    vocab: int = 64
    max_new_tokens: int = 16        # greedy decode steps; also sizes the position table
    # compact pathway
    compact_vis_len: int = 16       # anchor count
    kv_slots: int = 8               # pooled key/value slots per layer
    agg_temp: float = 0.07
    min_keep_ratio: float = 0.2
    coverage: float = 1.0           # saliency mass the retention floor must cover
    # distillation
    distill_temp: float = 2.0
    distill_weight: float = 1.0
    lr: float = 1e-3
    train_steps: int = 200
    train_samples: int = 64
    holdout_samples: int = 4
    eval_every: int = 20
    # analytic cost model coefficients
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    cost_budget: Optional[float] = None
    # numerics
    precision: str = "f64"          # f32 permitted in benchmark mode only
    bytes_per_elem: Optional[int] = None  # default derived from precision
    ln_eps: float = 1e-5
    seed: int = 7
    grid_h: Optional[int] = None
    grid_w: Optional[int] = None

    # -- derived quantities ------------------------------------------------

    @property
    def merged_vis_len(self) -> int:
        """Visual tokens entering the dense prefill."""
        return self.full_vis_len // self.merge_factor

    @property
    def compact_merged_len(self) -> int:
        """Visual tokens entering the compact prefill when all anchors survive."""
        return self.compact_vis_len // self.merge_factor

    @property
    def vis_head_dim(self) -> int:
        return self.vis_dim // self.vis_heads

    @property
    def lm_head_dim(self) -> int:
        return self.lm_dim // self.lm_heads

    @property
    def dense_prefill_len(self) -> int:
        return self.prompt_len + self.merged_vis_len

    @property
    def compact_prefill_len(self) -> int:
        return self.prompt_len + self.compact_merged_len

    @property
    def np_dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def kv_bytes_per_elem(self) -> int:
        if self.bytes_per_elem is not None:
            return self.bytes_per_elem
        return 4 if self.precision == "f32" else 8

    @property
    def grid(self) -> tuple[int, int]:
        if self.grid_h is not None and self.grid_w is not None:
            return self.grid_h, self.grid_w
        return _near_square_grid(self.full_vis_len)

    # -- validation ----------------------------------------------------------

    def validate(self) -> "PipelineConfig":
        c = self
        checks = [
            (c.full_vis_len >= 1, "full_vis_len must be >= 1"),
            (c.merge_factor >= 1, "merge_factor must be >= 1"),
            (c.full_vis_len % c.merge_factor == 0,
             f"full_vis_len {c.full_vis_len} not divisible by merge_factor {c.merge_factor}"),
            (c.compact_vis_len % c.merge_factor == 0,
             f"compact_vis_len {c.compact_vis_len} not divisible by merge_factor {c.merge_factor}"),
            (c.compact_vis_len <= c.full_vis_len,
             "compact_vis_len must not exceed full_vis_len"),
            (c.compact_vis_len // c.merge_factor < c.full_vis_len // c.merge_factor,
             "compact prefill span must be strictly shorter than the dense span"),
            (c.kv_slots >= 1 and c.kv_slots <= c.compact_vis_len,
             "kv_slots must be in [1, compact_vis_len]"),
            (c.vis_dim % c.vis_heads == 0, "vis_dim must be divisible by vis_heads"),
            (c.lm_dim % c.lm_heads == 0, "lm_dim must be divisible by lm_heads"),
            (c.vis_dim >= 2, "vis_dim must be >= 2"),
            (c.lm_dim >= 2, "lm_dim must be >= 2"),
            (c.vis_layers >= 0, "vis_layers must be >= 0"),
            (c.lm_layers >= 1, "lm_layers must be >= 1"),
            (c.agg_temp > 0, "agg_temp must be > 0"),
            (c.distill_temp > 0, "distill_temp must be > 0"),
            (c.distill_weight >= 0, "distill_weight must be >= 0"),
            (0.0 <= c.min_keep_ratio <= 1.0, "min_keep_ratio must be in [0, 1]"),
            (0.0 < c.coverage <= 1.0, "coverage must be in (0, 1]"),
            (0 <= c.prefix_len <= c.prompt_len,
             "prefix_len must be in [0, prompt_len]"),
            (c.prompt_len >= 1, "prompt_len must be >= 1"),
            (c.vocab >= 2, "vocab must be >= 2"),
            (c.max_new_tokens >= 0, "max_new_tokens must be >= 0"),
            (c.precision in ("f32", "f64"), "precision must be f32 or f64"),
            (c.bytes_per_elem is None or c.bytes_per_elem >= 1,
             "bytes_per_elem must be >= 1"),
            (c.ln_eps >= 0, "ln_eps must be >= 0"),
            (c.alpha >= 0 and c.beta >= 0 and c.gamma >= 0,
             "cost coefficients must be nonnegative"),
            (c.lr >= 0, "lr must be >= 0"),
            (c.train_samples >= 1, "train_samples must be >= 1"),
            (c.holdout_samples >= 0, "holdout_samples must be >= 0"),
            (c.eval_every >= 1, "eval_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        gh, gw = c.grid
        if gh * gw != c.full_vis_len:
            raise ConfigError(
                f"grid {gh}x{gw} does not cover full_vis_len {c.full_vis_len}")
        if c.cost_budget is not None:
            # static budget constraint on the compact pipeline's analytic cost
            from . import costmodel
            got = costmodel.compact_cost(c, costmodel.CostCoefficients(
                c.alpha, c.beta, c.gamma), c.max_new_tokens).total
            if got > c.cost_budget:
                raise ConfigError(
                    f"compact cost {got} exceeds cost_budget {c.cost_budget}")
        return c

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}

# keys consumed by the benchmark harness rather than the pipeline itself
BENCH_KEYS = {"pipelines", "runs", "warmup"}


def _coerce(key: str, raw: str):
    text = raw.strip()
    if key in BENCH_KEYS:
        return text
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key: {key!r}")
    low = text.lower()
    if low in ("none", "null"):
        return None
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse the flat config grammar: `key = value` lines and # comments."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, raw = body.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def parse_overrides(pairs: list[str]) -> dict:
    """Parse command-line KEY=VALUE overrides."""
    out: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must be KEY=VALUE")
        key, _, raw = pair.partition("=")
        out[key.strip()] = _coerce(key.strip(), raw)
    return out


def load_config(path: Optional[str] = None,
                overrides: Optional[dict] = None) -> tuple[PipelineConfig, dict]:
    """Build a validated PipelineConfig from a file plus overrides.

    Returns (config, bench_kv) where bench_kv holds the harness-level keys
    (pipelines, runs, warmup) found in the same file or overrides.
    """
    merged: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            merged.update(parse_config_text(fh.read(), source=str(path)))
    if overrides:
        merged.update(overrides)
    bench_kv = {k: merged.pop(k) for k in list(merged) if k in BENCH_KEYS}
    try:
        cfg = PipelineConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate(), bench_kv
