"""civicbench: a desk-scale vision-language inference engine and benchmark.

Two inference pipelines over one frozen backbone: the dense reference path
and a compact path that shortens the visual stream before the encoder and
keeps it short through prefill and decode. Instrumented post-hoc pruning
baselines, an analytic cost model, KL distillation for the compact
parameters, and a timing harness round out the package.
"""

from .config import ConfigError, PipelineConfig, load_config

__version__ = "0.1.0"

__all__ = ["ConfigError", "PipelineConfig", "load_config", "__version__"]
