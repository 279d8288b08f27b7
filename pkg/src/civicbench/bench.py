"""Benchmark harness: stage-wise wall-clock timing, interaction counters,
closed-form ratio verification, parameter sweeps, and report emission.

Timing methodology: W discarded warmup runs (these also absorb any JIT
compilation), R measured runs on a monotonic clock, medians and interquartile
ranges reported. Counters stay off while timing; one extra untimed run
collects the per-region multiply-accumulate counts. All non-timing report
fields are bit-reproducible for a fixed seed, precision, and backend.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .baselines import PostHocConfig, run_posthoc
from .civic import run_compact
from .config import ConfigError, PipelineConfig
from .costmodel import (CostCoefficients, attention_ratio, cache_ratio,
                        compact_cost, dense_cost, prefill_ratio)
from .distill import gen_synthetic
from .model_core import run_dense
from .weights import (build_backbone, build_compact, cast_backbone,
                      cast_compact)

REPORT_SCHEMA = "civicbench-report-v1"
REPORT_HEADER = ("model,total_ms,vision_enc_ms,proj_ms,prefill_ms,decode_ms,"
                 "llm_total_ms,overhead_ms,prefill_tokens,kv_cache_bytes")
MS_FIELDS = ("total_ms", "vision_enc_ms", "proj_ms", "prefill_ms",
             "decode_ms", "llm_total_ms", "overhead_ms")
PIPELINES = ("dense", "civic", "posthoc_dense_restore", "posthoc_propagate")
SWEEP_AXES = ("compact_vis_len", "min_keep_ratio", "kv_slots")


def stats_to_ms(st) -> dict:
    return {
        "total_ms": st.total_s * 1e3,
        "vision_enc_ms": st.vision_enc_s * 1e3,
        "proj_ms": st.proj_s * 1e3,
        "prefill_ms": st.prefill_s * 1e3,
        "decode_ms": st.decode_s * 1e3,
        "llm_total_ms": st.llm_total_s * 1e3,
        "overhead_ms": st.overhead_s * 1e3,
    }


@dataclass
class LatencyReport:
    """Aggregate timing record for one pipeline."""

    model: str
    runs: list = field(default_factory=list)       # per-run ms dicts
    median: dict = field(default_factory=dict)
    iqr: dict = field(default_factory=dict)
    prefill_tokens: int = 0
    kv_cache_bytes: int = 0
    mac_counts: dict = field(default_factory=dict)
    output_ids: list = field(default_factory=list)

    def aggregate(self) -> None:
        for f in MS_FIELDS:
            vals = np.array([r[f] for r in self.runs])
            self.median[f] = float(np.median(vals))
            self.iqr[f] = float(np.percentile(vals, 75)
                                - np.percentile(vals, 25))

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "runs": self.runs,
            "median": self.median,
            "iqr": self.iqr,
            "prefill_tokens": self.prefill_tokens,
            "kv_cache_bytes": self.kv_cache_bytes,
            "mac_counts": self.mac_counts,
            "output_ids": self.output_ids,
        }


def bench_inputs(cfg: PipelineConfig):
    """One seeded synthetic sample in the configured precision."""
    smp = gen_synthetic(cfg.seed, 1, cfg)[0]
    return smp.x0.astype(cfg.np_dtype), smp.prompt_ids


def bench_weights(cfg: PipelineConfig):
    bb = cast_backbone(build_backbone(cfg), cfg.np_dtype)
    params = cast_compact(build_compact(cfg, bb), cfg.np_dtype)
    return bb, params


def run_pipeline_once(name: str, x0, prompt_ids, cfg: PipelineConfig,
                      bb, params, steps=None):
    """Dispatch one pipeline execution; returns (ids, RunStats)."""
    if name == "dense":
        return run_dense(x0, prompt_ids, cfg, bb, steps=steps)
    if name == "civic":
        return run_compact(x0, prompt_ids, cfg, bb, params, steps=steps)
    if name in ("posthoc_dense_restore", "posthoc_propagate"):
        ph = PostHocConfig(mode=name.removeprefix("posthoc_"))
        ids, st, _log = run_posthoc(x0, prompt_ids, cfg, bb, ph, steps=steps)
        return ids, st
    raise ConfigError(f"unknown pipeline {name!r}; choose from {PIPELINES}")


def _profile(name: str, cfg: PipelineConfig, x0, prompt_ids, bb, params,
             warmup: int, steps=None) -> LatencyReport:
    """Warm a pipeline and fill in its untimed fields (MACs, tokens, ids)."""
    rep = LatencyReport(model=name)
    for _ in range(warmup):
        run_pipeline_once(name, x0, prompt_ids, cfg, bb, params, steps)
    counter = nk.MacCounter()
    with nk.counting(counter):
        ids, st = run_pipeline_once(name, x0, prompt_ids, cfg, bb, params,
                                    steps)
    rep.prefill_tokens = st.prefill_tokens
    rep.kv_cache_bytes = st.kv_cache_bytes
    rep.mac_counts = {k: int(v) for k, v in sorted(counter.counts.items())}
    rep.output_ids = [int(t) for t in ids]
    return rep


def _timed_run(name: str, cfg: PipelineConfig, x0, prompt_ids, bb, params,
               rep: LatencyReport, steps=None) -> None:
    _, st = run_pipeline_once(name, x0, prompt_ids, cfg, bb, params, steps)
    rep.runs.append(stats_to_ms(st))


def measure(name: str, cfg: PipelineConfig, x0, prompt_ids, bb, params,
            runs: int, warmup: int, steps=None) -> LatencyReport:
    """W warmups, one counted (untimed) run, then R timed runs."""
    rep = _profile(name, cfg, x0, prompt_ids, bb, params, warmup, steps)
    for _ in range(runs):
        _timed_run(name, cfg, x0, prompt_ids, bb, params, rep, steps)
    rep.aggregate()
    return rep


def run_suite(cfg: PipelineConfig, pipelines=PIPELINES, runs: int = 20,
              warmup: int = 3, steps=None, out_dir=None) -> dict:
    """Benchmark every requested pipeline on one shared seeded input.

    Returns the report dict; when out_dir is given, also writes report.json
    and report.csv there.
    """
    if runs < 1:
        raise ConfigError("need at least one measured run")
    if warmup < 0:
        raise ConfigError("warmup count must be nonnegative")
    for name in pipelines:
        if name not in PIPELINES:
            raise ConfigError(
                f"unknown pipeline {name!r}; choose from {PIPELINES}")
    x0, prompt_ids = bench_inputs(cfg)
    bb, params = bench_weights(cfg)
    report = {
        "schema": REPORT_SCHEMA,
        "backend": nk.active_backend(),
        "precision": cfg.precision,
        "runs": runs,
        "warmup": warmup,
        "decode_steps": cfg.max_new_tokens if steps is None else steps,
        "config": dataclasses.asdict(cfg),
        "pipelines": {},
    }
    # Warm every pipeline first, then interleave the timed runs round-robin
    # so a transient load spike on the host lands on all pipelines alike
    # instead of skewing whichever one owned that slice of wall time.
    reps = {name: _profile(name, cfg, x0, prompt_ids, bb, params, warmup,
                           steps)
            for name in pipelines}
    for _ in range(runs):
        for name in pipelines:
            _timed_run(name, cfg, x0, prompt_ids, bb, params, reps[name],
                       steps)
    for name in pipelines:
        reps[name].aggregate()
        report["pipelines"][name] = reps[name].as_dict()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_csv(report, os.path.join(out_dir, "report.csv"))
    return report


def csv_rows(report: dict) -> list[str]:
    rows = [REPORT_HEADER]
    for name, rep in report["pipelines"].items():
        med = rep["median"]
        cells = [name] + [f"{med[f]:.3f}" for f in MS_FIELDS]
        cells += [str(rep["prefill_tokens"]), str(rep["kv_cache_bytes"])]
        rows.append(",".join(cells))
    return rows


def write_csv(report: dict, path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(csv_rows(report)) + "\n")


def verify_ratios(cfg: PipelineConfig, _measured_cfg=None):
    """Cross-validate two closed-form laws against instrumented runs.

    Law 1: compact/dense visual-attention interaction MACs == M_e*S / T_e^2.
    Law 2: compact/dense KV-cache bytes == (L+M_p) / (L+T_p).
    Both checked exactly by integer cross-multiplication. Returns
    (all_passed, report lines). _measured_cfg is a test hook that runs the
    pipelines under a different config than the laws expect.
    """
    run_cfg = cfg if _measured_cfg is None else _measured_cfg
    x0, prompt_ids = bench_inputs(run_cfg)
    bb, params = bench_weights(run_cfg)

    dense_counter = nk.MacCounter()
    with nk.counting(dense_counter):
        _, dense_stats = run_dense(x0, prompt_ids, run_cfg, bb, steps=0)
    civic_counter = nk.MacCounter()
    with nk.counting(civic_counter):
        _, civic_stats = run_compact(x0, prompt_ids, run_cfg, bb, params,
                                     steps=0)

    lines = []
    ok = True

    macs_d = dense_counter.get("visual_attention")
    macs_c = civic_counter.get("compact_visual_attention")
    want_num = cfg.compact_vis_len * cfg.kv_slots
    want_den = cfg.full_vis_len ** 2
    exact = macs_c * want_den == want_num * macs_d
    measured = macs_c / macs_d if macs_d else float("nan")
    tag = "PASS" if exact else "FAIL"
    ok &= exact
    lines.append(
        f"{tag} attention interaction ratio: measured {macs_c}/{macs_d} = "
        f"{measured:.6g}, expected {want_num}/{want_den} = "
        f"{attention_ratio(cfg):.6g}")

    bytes_d = dense_stats.kv_cache_bytes
    bytes_c = civic_stats.kv_cache_bytes
    len_d = cfg.prompt_len + cfg.merged_vis_len
    len_c = cfg.prompt_len + cfg.compact_merged_len
    exact = bytes_c * len_d == len_c * bytes_d
    measured = bytes_c / bytes_d if bytes_d else float("nan")
    tag = "PASS" if exact else "FAIL"
    ok &= exact
    lines.append(
        f"{tag} kv-cache byte ratio: measured {bytes_c}/{bytes_d} = "
        f"{measured:.6g}, expected {len_c}/{len_d} = {cache_ratio(cfg):.6g}")

    return ok, lines


def _coerce_axis_value(axis: str, value):
    if axis == "min_keep_ratio":
        return float(value)
    return int(value)


def sweep(cfg: PipelineConfig, axis: str, values, runs: int = 5,
          warmup: int = 1, steps=None, out_path=None) -> dict:
    """Re-run the compact pipeline across one config axis.

    Invalid values are skipped and recorded, not fatal. Returns
    {"axis", "rows", "skipped"}; rows carry the same fields as report.csv
    plus the axis value.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from "
                          f"{SWEEP_AXES}")
    rows, skipped = [], []
    bb = None
    for raw in values:
        try:
            value = _coerce_axis_value(axis, raw)
            sub = cfg.replace(**{axis: value}).validate()
        except (ConfigError, ValueError) as exc:
            skipped.append({"value": raw, "reason": str(exc)})
            continue
        x0, prompt_ids = bench_inputs(sub)
        if bb is None:
            bb = cast_backbone(build_backbone(sub), sub.np_dtype)
        params = cast_compact(build_compact(sub, bb), sub.np_dtype)
        rep = measure("civic", sub, x0, prompt_ids, bb, params, runs, warmup,
                      steps)
        row = {"axis": axis, "value": value, **rep.median,
               "prefill_tokens": rep.prefill_tokens,
               "kv_cache_bytes": rep.kv_cache_bytes}
        rows.append(row)
    result = {"axis": axis, "rows": rows, "skipped": skipped}
    if out_path is not None:
        header = "axis,value," + REPORT_HEADER.split(",", 1)[1]
        out = [header]
        for r in rows:
            cells = [axis, str(r["value"])]
            cells += [f"{r[f]:.3f}" for f in MS_FIELDS]
            cells += [str(r["prefill_tokens"]), str(r["kv_cache_bytes"])]
            out.append(",".join(cells))
        with open(out_path, "w", newline="") as fh:
            fh.write("\n".join(out) + "\n")
    return result


def compare_backends(cfg: PipelineConfig, pipelines=("dense", "civic"),
                     runs: int = 5, warmup: int = 2, steps=None,
                     out_path=None) -> list[dict]:
    """Time the requested pipelines under each available kernel backend."""
    backends = ["numpy"] + (["numba"] if nk.HAVE_NUMBA else [])
    rows = []
    for backend in backends:
        with nk.use_backend(backend):
            if backend == "numba":
                nk.warmup_jit(cfg.np_dtype)
            report = run_suite(cfg, pipelines=pipelines, runs=runs,
                               warmup=warmup, steps=steps)
        for name in pipelines:
            med = report["pipelines"][name]["median"]
            rows.append({"backend": backend, "model": name, **med})
    if out_path is not None:
        header = "backend,model," + ",".join(MS_FIELDS)
        out = [header]
        for r in rows:
            cells = [r["backend"], r["model"]]
            cells += [f"{r[f]:.3f}" for f in MS_FIELDS]
            out.append(",".join(cells))
        with open(out_path, "w", newline="") as fh:
            fh.write("\n".join(out) + "\n")
    return rows


def predict_costs(cfg: PipelineConfig, decode_steps=None) -> dict:
    """Analytic cost breakdowns for the dense and compact pipelines."""
    steps = cfg.max_new_tokens if decode_steps is None else decode_steps
    coeffs = CostCoefficients.from_config(cfg)
    return {
        "coefficients": {"alpha": cfg.alpha, "beta": cfg.beta,
                         "gamma": cfg.gamma},
        "decode_steps": steps,
        "dense": dense_cost(cfg, coeffs, steps).as_dict(),
        "compact": compact_cost(cfg, coeffs, steps).as_dict(),
        "ratios": {
            "attention": attention_ratio(cfg),
            "prefill": prefill_ratio(cfg),
            "kv_cache": cache_ratio(cfg),
        },
    }
