"""Command-line interface.

Layout:
  civicbench bench run | verify | sweep | backends
  civicbench distill train
  civicbench cost predict

Every subcommand accepts --config PATH plus trailing KEY=VALUE overrides;
explicit flags win over overrides, which win over the file. Exit codes:
0 success, 1 verification/runtime failure, 2 config error.
"""

from __future__ import annotations

import json
import sys

import click

from . import bench as bench_mod
from . import distill as distill_mod
from .bench import PIPELINES, SWEEP_AXES
from .config import (ConfigError, load_config, parse_config_text,
                     parse_overrides)

_config_opt = click.option("--config", "config_path", type=str, default=None,
                           help="Flat key=value config file.")
_kv_arg = click.argument("overrides", nargs=-1)
_seed_opt = click.option("--seed", type=int, default=None,
                         help="Override the config seed.")
_precision_opt = click.option("--precision",
                              type=click.Choice(["f32", "f64"]),
                              default=None, help="Arithmetic precision.")


def _config_error(exc) -> None:
    click.echo(f"config error: {exc}", err=True)
    sys.exit(2)


def _build_cfg(config_path, overrides, seed=None, precision=None,
               default_precision=None):
    """Compose file < KEY=VALUE < explicit flags into a validated config."""
    over = parse_overrides(list(overrides))
    file_keys: set = set()
    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as fh:
            file_keys = set(parse_config_text(fh.read(), source=config_path))
    if precision is not None:
        over["precision"] = precision
    elif (default_precision is not None and "precision" not in over
          and "precision" not in file_keys):
        over["precision"] = default_precision
    cfg, bench_kv = load_config(config_path, over)
    if seed is not None:
        cfg = cfg.replace(seed=seed).validate()
    return cfg, bench_kv


def _pipeline_list(flag_value, bench_kv):
    raw = flag_value if flag_value is not None else bench_kv.get("pipelines")
    if raw is None:
        return PIPELINES
    names = tuple(p.strip() for p in str(raw).split(",") if p.strip())
    if not names:
        raise ConfigError("empty pipeline list")
    return names


@click.group()
def main():
    """Desk-scale vision-language inference benchmark."""


@main.group()
def bench():
    """Timing, verification, and sweep harness."""


@bench.command("run")
@_config_opt
@click.option("--out", "out_dir", type=str, default=None,
              help="Directory for report.json and report.csv.")
@click.option("--runs", type=int, default=None, help="Measured runs.")
@click.option("--warmup", type=int, default=None, help="Discarded warmups.")
@click.option("--steps", type=int, default=None, help="Decode steps.")
@click.option("--pipelines", type=str, default=None,
              help="Comma list from: " + ",".join(PIPELINES))
@_seed_opt
@_precision_opt
@_kv_arg
def bench_run(config_path, out_dir, runs, warmup, steps, pipelines, seed,
              precision, overrides):
    """Benchmark the pipelines and emit per-stage latency reports."""
    try:
        # timing defaults to f32 unless the file, overrides, or flag say else
        cfg, bench_kv = _build_cfg(config_path, overrides, seed, precision,
                                   default_precision="f32")
        names = _pipeline_list(pipelines, bench_kv)
        runs = runs if runs is not None else int(bench_kv.get("runs", 20))
        warmup = (warmup if warmup is not None
                  else int(bench_kv.get("warmup", 3)))
        report = bench_mod.run_suite(cfg, pipelines=names, runs=runs,
                                     warmup=warmup, steps=steps,
                                     out_dir=out_dir)
    except (ConfigError, OSError) as exc:
        _config_error(exc)
    for line in bench_mod.csv_rows(report):
        click.echo(line)
    if out_dir is not None:
        click.echo(f"wrote {out_dir}/report.json and {out_dir}/report.csv")


@bench.command("verify")
@_config_opt
@_seed_opt
@_precision_opt
@_kv_arg
def bench_verify(config_path, seed, precision, overrides):
    """Check measured interaction and cache ratios against the closed forms."""
    try:
        cfg, _ = _build_cfg(config_path, overrides, seed, precision)
        ok, lines = bench_mod.verify_ratios(cfg)
    except (ConfigError, OSError) as exc:
        _config_error(exc)
    for line in lines:
        click.echo(line)
    sys.exit(0 if ok else 1)


@bench.command("sweep")
@_config_opt
@click.option("--axis", type=click.Choice(list(SWEEP_AXES)), required=True)
@click.option("--values", type=str, required=True,
              help="Comma-separated axis values.")
@click.option("--out", "out_path", type=str, default=None,
              help="CSV output path.")
@click.option("--runs", type=int, default=5)
@click.option("--warmup", type=int, default=1)
@click.option("--steps", type=int, default=None)
@_seed_opt
@_precision_opt
@_kv_arg
def bench_sweep(config_path, axis, values, out_path, runs, warmup, steps,
                seed, precision, overrides):
    """Re-run the compact pipeline across one config axis."""
    try:
        cfg, _ = _build_cfg(config_path, overrides, seed, precision,
                            default_precision="f32")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError("no sweep values given")
        result = bench_mod.sweep(cfg, axis, vals, runs=runs, warmup=warmup,
                                 steps=steps, out_path=out_path)
    except (ConfigError, OSError) as exc:
        _config_error(exc)
    for row in result["rows"]:
        click.echo(f"{axis}={row['value']}: total {row['total_ms']:.3f} ms, "
                   f"prefill_tokens {row['prefill_tokens']}, "
                   f"kv_cache_bytes {row['kv_cache_bytes']}")
    for skip in result["skipped"]:
        click.echo(f"skipped {axis}={skip['value']}: {skip['reason']}",
                   err=True)
    if out_path is not None:
        click.echo(f"wrote {out_path}")


@bench.command("backends")
@_config_opt
@click.option("--out", "out_path", type=str, default=None,
              help="CSV output path.")
@click.option("--runs", type=int, default=5)
@click.option("--warmup", type=int, default=2)
@click.option("--steps", type=int, default=None)
@click.option("--pipelines", type=str, default=None)
@_seed_opt
@_precision_opt
@_kv_arg
def bench_backends(config_path, out_path, runs, warmup, steps, pipelines,
                   seed, precision, overrides):
    """Compare the numpy and numba kernel backends on the same workload."""
    try:
        cfg, bench_kv = _build_cfg(config_path, overrides, seed, precision,
                                   default_precision="f32")
        names = _pipeline_list(pipelines, bench_kv)
        if pipelines is None and "pipelines" not in bench_kv:
            names = ("dense", "civic")
        rows = bench_mod.compare_backends(cfg, pipelines=names, runs=runs,
                                          warmup=warmup, steps=steps,
                                          out_path=out_path)
    except (ConfigError, OSError) as exc:
        _config_error(exc)
    for r in rows:
        click.echo(f"{r['backend']:>5} {r['model']:<22} "
                   f"total {r['total_ms']:.3f} ms")
    if out_path is not None:
        click.echo(f"wrote {out_path}")


@main.group()
def distill():
    """Compact-parameter training against the frozen dense teacher."""


@distill.command("train")
@_config_opt
@click.option("--out", "out_path", type=str, default="metrics.csv",
              help="Metrics CSV path.")
@click.option("--steps", type=int, default=None, help="Training steps.")
@_seed_opt
@_precision_opt
@_kv_arg
def distill_train(config_path, out_path, steps, seed, precision, overrides):
    """Run KL distillation and write the per-step metrics CSV."""
    try:
        cfg, _ = _build_cfg(config_path, overrides, seed, precision)
    except (ConfigError, OSError) as exc:
        _config_error(exc)
    try:
        state = distill_mod.train(cfg, metrics_path=out_path, steps=steps)
    except distill_mod.TrainDivergedError as exc:
        click.echo(f"training diverged: {exc}", err=True)
        sys.exit(1)
    first = state.holdout_history[0][1]
    last = state.holdout_history[-1][1]
    click.echo(f"steps {state.step}: holdout KL {first:.6e} -> {last:.6e}")
    click.echo(f"wrote {out_path}")


@main.group()
def cost():
    """Closed-form analytic cost model."""


@cost.command("predict")
@_config_opt
@click.option("--steps", type=int, default=None, help="Decode steps.")
@_seed_opt
@_kv_arg
def cost_predict(config_path, steps, seed, overrides):
    """Print analytic dense vs compact cost breakdowns as JSON."""
    try:
        cfg, _ = _build_cfg(config_path, overrides, seed)
        out = bench_mod.predict_costs(cfg, decode_steps=steps)
    except (ConfigError, OSError) as exc:
        _config_error(exc)
    click.echo(json.dumps(out, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
