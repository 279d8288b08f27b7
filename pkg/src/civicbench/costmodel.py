"""Closed-form analytic cost model and interface-size ratio calculators.

Costs are unitless. The breakdown mirrors the terms that differ between
pipelines: quadratic visual attention, quadratic prefill attention, linear
KV-cache storage, linear-in-context decode, and routing overhead. MLP and
projection work is deliberately not modeled here; measured MAC counters
cover everything and are labeled separately.

All functions are pure and duck-typed on the config fields they read, so a
deliberately degenerate config (e.g. compact sized equal to dense) can be
priced without passing pipeline validation.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CostCoefficients:
    """Implementation-dependent scale constants, all nonnegative.

    alpha prices visual attention, beta prices LLM attention (prefill and
    decode), gamma prices KV-cache storage.
    """

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("cost coefficients must be nonnegative")

    @staticmethod
    def from_config(cfg) -> "CostCoefficients":
        return CostCoefficients(cfg.alpha, cfg.beta, cfg.gamma)


@dataclass(frozen=True)
class CostBreakdown:
    visual_attention: float
    llm_prefill: float
    kv_cache: float
    decode: float
    route: float = 0.0

    @property
    def total(self) -> float:
        return (self.visual_attention + self.llm_prefill + self.kv_cache
                + self.decode + self.route)

    def as_dict(self) -> dict:
        return {
            "visual_attention": self.visual_attention,
            "llm_prefill": self.llm_prefill,
            "kv_cache": self.kv_cache,
            "decode": self.decode,
            "route": self.route,
            "total": self.total,
        }


def decode_cost(coeffs: CostCoefficients, lm_layers: int, lm_dim: int,
                prefill_len: int, steps: int) -> float:
    """Linear-in-context decode model: each step attends over the running
    sequence, averaging prefill_len + steps/2 positions."""
    if steps == 0:
        return 0.0
    return steps * coeffs.beta * lm_layers * (prefill_len + steps / 2) * lm_dim


def _breakdown(cfg, coeffs: CostCoefficients, visual_interactions: float,
               prefill_len: int, decode_steps: int) -> CostBreakdown:
    return CostBreakdown(
        visual_attention=coeffs.alpha * cfg.vis_layers
        * visual_interactions * cfg.vis_dim,
        llm_prefill=coeffs.beta * cfg.lm_layers * prefill_len ** 2
        * cfg.lm_dim,
        kv_cache=coeffs.gamma * cfg.lm_layers * prefill_len * cfg.lm_dim,
        decode=decode_cost(coeffs, cfg.lm_layers, cfg.lm_dim, prefill_len,
                           decode_steps),
    )


def dense_cost(cfg, coeffs: CostCoefficients,
               decode_steps: int = 0) -> CostBreakdown:
    """Dense pipeline: full quadratic visual attention, full prefill."""
    return _breakdown(cfg, coeffs, cfg.full_vis_len ** 2,
                      cfg.prompt_len + cfg.merged_vis_len, decode_steps)


def compact_cost(cfg, coeffs: CostCoefficients,
                 decode_steps: int = 0) -> CostBreakdown:
    """Compact pipeline: anchors-times-slots visual attention, short
    prefill. Assumes the retention floor keeps every anchor."""
    return _breakdown(cfg, coeffs, cfg.compact_vis_len * cfg.kv_slots,
                      cfg.prompt_len + cfg.compact_merged_len, decode_steps)


def posthoc_cost(dense: CostBreakdown, log) -> CostBreakdown:
    """Post-hoc pruning pays the dense cost plus its accounted routing
    time (log carries a total() in seconds; unit mixing is deliberate and
    documented: route is reported in its own column)."""
    return CostBreakdown(
        visual_attention=dense.visual_attention,
        llm_prefill=dense.llm_prefill,
        kv_cache=dense.kv_cache,
        decode=dense.decode,
        route=dense.route + log.total(),
    )


def attention_ratio(cfg) -> float:
    """Compact-to-dense visual attention interaction ratio per layer."""
    return (cfg.compact_vis_len * cfg.kv_slots) / cfg.full_vis_len ** 2


def prefill_ratio(cfg) -> float:
    """Quadratic prefill attention ratio."""
    return ((cfg.prompt_len + cfg.compact_merged_len)
            / (cfg.prompt_len + cfg.merged_vis_len)) ** 2


def cache_ratio(cfg) -> float:
    """KV-cache byte ratio; linear in kept sequence length."""
    return ((cfg.prompt_len + cfg.compact_merged_len)
            / (cfg.prompt_len + cfg.merged_vis_len))


def within_budget(cfg, coeffs: CostCoefficients, budget: float,
                  decode_steps: int = 0) -> bool:
    """Static deployment-budget check on the compact pipeline."""
    return compact_cost(cfg, coeffs, decode_steps).total <= budget
