"""Desk-scale graph-dataset pipeline: container format, distributed sample
store, multitask MPNN training, scaling benchmarks, asynchronous HPO with
energy telemetry, and ensemble uncertainty quantification."""

__version__ = "0.1.0"

from .records import GraphRecord  # noqa: F401
