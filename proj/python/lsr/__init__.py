"""Latent-space restoration anomaly detection.

Thin Python layer over the native core. Configurations are plain dicts;
missing fields take their defaults and unknown keys raise SchemaError.
"""

from __future__ import annotations

import json
import os
from typing import Any

from . import _lsr
from ._lsr import (
    DependencyError,
    DimensionError,
    DivergenceError,
    FormatError,
    OutOfRangeError,
    InvalidValueError,
    IoError,
    LsrError,
    NonFiniteError,
    SchemaError,
    ShapeError,
    StaleArtifactError,
    ZeroVarianceError,
    auroc,
    average_precision,
    best_dice,
    consolidate,
    dice,
    generate_volume,
    mean_filter,
    min_filter,
    percentile,
    restoration_mask,
    sample_score,
    smooth,
)

STAGES = ("vqvae", "prior", "vae")


def default_config() -> dict[str, Any]:
    return json.loads(_lsr.default_config())


def normalize_config(config: dict[str, Any] | None = None) -> dict[str, Any]:
    """Return the validated config with every field filled in."""
    return json.loads(_lsr.normalize_config(json.dumps(config or {})))


def config_hash(config: dict[str, Any] | None = None) -> str:
    return _lsr.config_hash(json.dumps(config or {}))


class Run:
    """One run directory driven by one configuration."""

    def __init__(self, run_dir: str | os.PathLike[str], config: dict[str, Any] | None = None,
                 threads: int = 1, verbose: bool = False) -> None:
        self.run_dir = os.fspath(run_dir)
        self.config = normalize_config(config)
        self.threads = threads
        self.verbose = verbose
        self.log = ""

    def _call(self, fn, *args) -> dict[str, Any]:
        out, log = fn(json.dumps(self.config), *args, self.run_dir, self.threads, self.verbose)
        self.log += log
        return json.loads(out)

    def generate(self) -> dict[str, Any]:
        return self._call(_lsr.cmd_generate)

    def train(self, stage: str) -> dict[str, Any]:
        return self._call(_lsr.cmd_train, stage)

    def calibrate(self) -> dict[str, Any]:
        return self._call(_lsr.cmd_calibrate)

    def score(self) -> dict[str, Any]:
        return self._call(_lsr.cmd_score)

    def evaluate(self) -> dict[str, Any]:
        return self._call(_lsr.cmd_evaluate)

    def run(self) -> dict[str, Any]:
        """Every step in order; returns the evaluation report."""
        return self._call(_lsr.run_pipeline)


__all__ = [name for name in dir() if not name.startswith("_")]
