"""Counting-based generalization bound, train-test gaps and region stability."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from . import evalmetrics as em
from . import grafting as gr
from . import nncore
from .errors import ConfigError, DataError
from .nncore import ModelSpec, ParameterVector

BOUND_MODES = ("graft", "retrain")


@dataclass(frozen=True)
class BoundInputs:
    s: int  # region size
    q: int  # quantization levels per parameter
    theta_n: int  # number of distinct regions the procedure can output
    delta: float
    n: int  # training samples

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.s < 1 or self.n < 1 or self.theta_n < 1:
            raise ConfigError("s, n and theta_n must be positive")
        if self.q < 2:
            raise ConfigError("need at least two quantization levels")


@dataclass(frozen=True)
class BoundReport:
    variance_bound: float
    total_slack: float
    mode: str

    def to_dict(self) -> dict:
        return {"variance_bound": self.variance_bound, "total_slack": self.total_slack, "mode": self.mode}


def generalization_bound(b: BoundInputs, eps1: float = 0.0, eps2: float = 0.0, mode: str = "graft") -> BoundReport:
    """Variance term ``2 sqrt((s ln q + ln theta_n + ln(c/delta)) / n)`` in nats.

    ``mode="graft"`` (no re-training) uses c = 2 and slack ``4 eps1 + eps2``;
    ``mode="retrain"`` uses c = 1 and slack ``4 eps1``.
    """
    if mode not in BOUND_MODES:
        raise ConfigError(f"unknown bound mode {mode!r}")
    if eps1 < 0 or eps2 < 0:
        raise ConfigError("slack terms must be non-negative")
    c = 2.0 if mode == "graft" else 1.0
    # math.log of the integer q stays exact for huge q (2**32 and beyond)
    complexity = b.s * math.log(b.q) + math.log(b.theta_n) + math.log(c / b.delta)
    slack = 4.0 * eps1 + (eps2 if mode == "graft" else 0.0)
    return BoundReport(2.0 * math.sqrt(complexity / b.n), slack, mode)


def train_test_gap(params: ParameterVector, spec: ModelSpec, train_ds, test_ds) -> float:
    """Signed train accuracy minus test accuracy."""
    return em.accuracy(params, spec, train_ds) - em.accuracy(params, spec, test_ds)


@dataclass(frozen=True)
class StabilityReport:
    mean_pairwise_jaccard: float
    distinct_count: int


def jaccard(a: gr.GraftRegion, b: gr.GraftRegion) -> float:
    """|a ∩ b| / |a ∪ b|, with two empty regions counted as identical."""
    inter = a.intersection_size(b)
    union = len(a) + len(b) - inter
    return 1.0 if union == 0 else inter / union


def region_stability(regions) -> StabilityReport:
    regs = list(regions)
    if len(regs) < 2:
        raise ConfigError("region stability needs at least two regions")
    if len({r.total_params for r in regs}) != 1:
        raise ConfigError("regions refer to vectors of different lengths")
    vals = sorted(jaccard(a, b) for a, b in itertools.combinations(regs, 2))
    distinct = {r.indices.tobytes() for r in regs}
    return StabilityReport(float(math.fsum(vals) / len(vals)), len(distinct))


def random_jaccard_expectation(sparsity: float) -> float:
    """Large-n Jaccard of two independent uniform regions of the same sparsity: s / (2 - s)."""
    if not 0.0 < sparsity <= 1.0:
        raise ConfigError("sparsity must lie in (0, 1]")
    return sparsity / (2.0 - sparsity)


# -- quantization slack ------------------------------------------------------


def quantize(params: ParameterVector, q: int) -> ParameterVector:
    """Snap each segment onto q evenly spaced levels spanning its observed range."""
    if q < 2:
        raise ConfigError("need at least two quantization levels")
    out = params.values.copy()
    for seg in params.segments:
        v = out[seg.offset : seg.offset + seg.length]
        lo, hi = float(v.min()), float(v.max())
        if hi == lo:
            continue
        step = (hi - lo) / (q - 1)
        v[:] = lo + np.round((v - lo) / step) * step
    return params.with_values(out)


def per_example_loss(params: ParameterVector, spec: ModelSpec, dataset) -> np.ndarray:
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    logp = log_softmax(nncore.forward(params, spec, dataset.inputs), axis=1)
    return -logp[np.arange(len(dataset)), np.asarray(dataset.labels)]


def quantization_eps(params: ParameterVector, spec: ModelSpec, dataset, q: int) -> float:
    """Empirical eps1: largest per-example loss change caused by quantizing to q levels."""
    base = per_example_loss(params, spec, dataset)
    quant = per_example_loss(quantize(params, q), spec, dataset)
    return float(np.max(np.abs(quant - base)))
