"""Grafting regions, graft composition and sigmoid-reparameterized mask learning."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import expit

from . import nncore
from .errors import ConfigError, NumericalError, ShapeError
from .nncore import ModelSpec, OptimizerConfig, ParameterVector

PROVENANCES = ("learned", "movement_topk", "random", "bias_only", "fisher", "union", "difference")


def budget_count(fraction: float, n: int) -> int:
    """ceil(fraction * n), robust to binary round-off (0.07 * 100 is 7.000000000000001)."""
    return min(n, math.ceil(round(fraction * n, 9)))


@dataclass(frozen=True, eq=False)
class GraftRegion:
    indices: np.ndarray
    total_params: int
    provenance: str = "learned"

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise ShapeError("region indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= self.total_params:
                raise ShapeError("region index outside [0, total_params)")
        if self.provenance not in PROVENANCES:
            raise ConfigError(f"unknown provenance {self.provenance!r}")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_mask(cls, mask: np.ndarray, provenance: str = "learned") -> GraftRegion:
        mask = np.asarray(mask, dtype=bool)
        return cls(np.flatnonzero(mask), mask.size, provenance)

    @classmethod
    def empty(cls, total_params: int, provenance: str = "learned") -> GraftRegion:
        return cls(np.zeros(0, dtype=np.int64), total_params, provenance)

    @classmethod
    def full(cls, spec: ModelSpec, provenance: str = "learned") -> GraftRegion:
        return cls.from_mask(nncore.graftable_mask(spec), provenance)

    def __len__(self) -> int:
        return int(self.indices.size)

    @property
    def sparsity(self) -> float:
        return len(self) / self.total_params

    def mask(self) -> np.ndarray:
        m = np.zeros(self.total_params, dtype=bool)
        m[self.indices] = True
        return m

    def same_as(self, other: GraftRegion) -> bool:
        return self.total_params == other.total_params and np.array_equal(self.indices, other.indices)

    def union(self, other: GraftRegion) -> GraftRegion:
        _check_total(self, other)
        return GraftRegion(np.union1d(self.indices, other.indices), self.total_params, "union")

    def difference(self, other: GraftRegion) -> GraftRegion:
        _check_total(self, other)
        return GraftRegion(np.setdiff1d(self.indices, other.indices), self.total_params, "difference")

    def intersection_size(self, other: GraftRegion) -> int:
        _check_total(self, other)
        return int(np.intersect1d(self.indices, other.indices, assume_unique=True).size)

    def relabel(self, total_params: int) -> GraftRegion:
        """Same indices inside a vector of a different length (e.g. extra task heads)."""
        return GraftRegion(self.indices, total_params, self.provenance)


def _check_total(a: GraftRegion, b: GraftRegion) -> None:
    if a.total_params != b.total_params:
        raise ShapeError("regions refer to vectors of different lengths")


def _check_region(region: GraftRegion, params: ParameterVector) -> None:
    if region.total_params != len(params):
        raise ShapeError(f"region is over {region.total_params} parameters, vector has {len(params)}")


def _graftable(spec: ModelSpec | None, n: int) -> np.ndarray:
    if spec is None:
        return np.ones(n, dtype=bool)
    g = nncore.graftable_mask(spec)
    if g.size != n:
        raise ShapeError("spec does not match the parameter vector length")
    return g


def _top_indices(scores: np.ndarray, candidates: np.ndarray, count: int) -> np.ndarray:
    """``count`` candidate indices with the highest score, ties to the lower index."""
    cand = np.flatnonzero(candidates)
    order = np.argsort(-scores[cand], kind="stable")
    return np.sort(cand[order[:count]])


# -- composition -------------------------------------------------------------


def graft_compose(pre: ParameterVector, ft: ParameterVector, region: GraftRegion) -> ParameterVector:
    nncore.check_compatible(pre, ft)
    _check_region(region, pre)
    out = pre.values.copy()
    out[region.indices] = ft.values[region.indices]
    return pre.with_values(out)


@dataclass(eq=False)
class MaskLogits:
    eps: np.ndarray
    base: GraftRegion
    init_value: float = -10.0
    graftable: np.ndarray | None = None

    def __post_init__(self):
        self.eps = np.asarray(self.eps, dtype=np.float64)
        if self.eps.shape != (self.base.total_params,):
            raise ShapeError("mask logits and base region lengths differ")
        if not np.all(np.isfinite(self.eps)):
            raise NumericalError("mask logits must be finite")
        if self.graftable is None:
            self.graftable = np.ones(self.eps.size, dtype=bool)

    @classmethod
    def initial(cls, base: GraftRegion, init_value: float = -10.0, spec: ModelSpec | None = None) -> MaskLogits:
        g = _graftable(spec, base.total_params)
        return cls(np.full(base.total_params, float(init_value)), base, init_value, g)

    def gamma(self) -> np.ndarray:
        """Effective mask: base entries flip to 1 - sigma(eps), others take sigma(eps)."""
        s = expit(self.eps)
        b = self.base.mask()
        return np.where(b, 1.0 - s, s)

    def score(self) -> np.ndarray:
        """Pre-sigmoid effective mask, gamma = sigmoid(score).

        Same order as ``gamma`` but does not saturate, so coordinates that
        flipped hard remain distinguishable.
        """
        return np.where(self.base.mask(), -self.eps, self.eps)


def soft_graft_compose(pre: ParameterVector, ft: ParameterVector, logits: MaskLogits) -> ParameterVector:
    nncore.check_compatible(pre, ft)
    if logits.eps.size != len(pre):
        raise ShapeError("mask logits length differs from the parameter vectors")
    g = logits.gamma()
    return pre.with_values(g * ft.values + (1.0 - g) * pre.values)


def wise_interpolate(pre: ParameterVector, model: ParameterVector, alpha: float) -> ParameterVector:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    nncore.check_compatible(pre, model)
    if alpha == 1.0:
        return model.copy()
    if alpha == 0.0:
        return pre.copy()
    return pre.with_values(alpha * model.values + (1.0 - alpha) * pre.values)


def lth_prune(ft: ParameterVector, region: GraftRegion) -> ParameterVector:
    """Keep the region, zero everything else (frozen segments included)."""
    _check_region(region, ft)
    out = np.zeros_like(ft.values)
    out[region.indices] = ft.values[region.indices]
    return ft.with_values(out)


# -- regions -----------------------------------------------------------------


def movement_region(
    pre: ParameterVector, ft: ParameterVector, fraction: float, spec: ModelSpec | None = None
) -> GraftRegion:
    """Top ``ceil(fraction * n_graftable)`` coordinates by |ft - pre|."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    nncore.check_compatible(pre, ft)
    g = _graftable(spec, len(pre))
    count = budget_count(fraction, int(g.sum()))
    move = np.abs(ft.values - pre.values)
    return GraftRegion(_top_indices(move, g, count), len(pre), "movement_topk")


def random_region(spec: ModelSpec, fraction: float, seed: int) -> GraftRegion:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    g = nncore.graftable_mask(spec)
    cand = np.flatnonzero(g)
    count = budget_count(fraction, cand.size)
    rng = np.random.default_rng([seed, 23])
    pick = rng.choice(cand, size=count, replace=False)
    return GraftRegion(np.sort(pick), g.size, "random")


def bias_region(pre: ParameterVector, spec: ModelSpec) -> GraftRegion:
    g = nncore.graftable_mask(spec)
    m = np.zeros(len(pre), dtype=bool)
    for s in pre.segments:
        if s.kind == "bias":
            m[s.offset : s.offset + s.length] = True
    return GraftRegion.from_mask(m & g, "bias_only")


def fisher_scores(pre: ParameterVector, spec: ModelSpec, dataset, seed: int = 0) -> np.ndarray:
    """Diagonal empirical Fisher with labels sampled from the model's own predictions."""
    probs = nncore.softmax(nncore.forward(pre, spec, dataset.inputs))
    rng = np.random.default_rng([seed, 29])
    u = rng.random(probs.shape[0])[:, None]
    cdf = np.cumsum(probs, axis=1)
    labels = np.minimum((u > cdf).sum(axis=1), spec.num_classes - 1)
    return nncore.per_sample_squared_grad(pre, spec, dataset.inputs, labels)


def baseline_region(
    kind: str,
    pre: ParameterVector,
    spec: ModelSpec,
    dataset=None,
    fraction: float | None = None,
    seed: int = 0,
) -> GraftRegion:
    if kind == "bias_only":
        return bias_region(pre, spec)
    if kind == "random":
        if fraction is None:
            raise ConfigError("random region needs a fraction")
        return random_region(spec, fraction, seed)
    if kind == "fisher":
        if dataset is None:
            raise ConfigError("fisher region needs a dataset")
        if fraction is None or not 0.0 < fraction <= 1.0:
            raise ConfigError("fisher region needs a fraction in (0, 1]")
        g = nncore.graftable_mask(spec)
        scores = fisher_scores(pre, spec, dataset, seed)
        return GraftRegion(_top_indices(scores, g, budget_count(fraction, int(g.sum()))), len(pre), "fisher")
    raise ConfigError(f"unknown baseline region kind {kind!r}")


# -- mask learning -----------------------------------------------------------


@dataclass(frozen=True)
class MaskOptConfig:
    steps: int = 100
    learning_rate: float = 1e4
    batch_size: int = 1024
    label_source: str = "ground_truth"
    init_value: float = -10.0
    threshold: float = 0.5
    sparsity_budget: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("mask learning_rate must be positive")
        if self.label_source not in ("ground_truth", "ft_model"):
            raise ConfigError(f"unknown label_source {self.label_source!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.sparsity_budget is not None and not 0.0 < self.sparsity_budget <= 1.0:
            raise ConfigError("sparsity_budget must lie in (0, 1]")


def eps_gradient(
    pre: ParameterVector, ft: ParameterVector, logits: MaskLogits, theta_grad: np.ndarray
) -> np.ndarray:
    """Chain rule from dL/d(grafted params) to dL/d(eps)."""
    s = expit(logits.eps)
    sign = np.where(logits.base.mask(), -1.0, 1.0)
    return theta_grad * (ft.values - pre.values) * s * (1.0 - s) * sign


def mask_descent(
    pre: ParameterVector,
    ft: ParameterVector,
    logits: MaskLogits,
    loss_fn: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]],
    cfg: MaskOptConfig,
    n_examples: int,
) -> tuple[MaskLogits, list[float]]:
    """Plain gradient descent on eps.

    ``loss_fn(soft_values, batch_index)`` returns the loss and its gradient
    with respect to the soft-grafted parameter values.
    """
    stream = nncore.BatchStream(n_examples, cfg.batch_size, cfg.seed, stream=3)
    eps = logits.eps.copy()
    base = logits.base.mask()
    sign = np.where(base, -1.0, 1.0)
    diff = ft.values - pre.values
    history = []
    for step in range(cfg.steps):
        s = expit(eps)
        gamma = np.where(base, 1.0 - s, s)
        loss, g = loss_fn(pre.values + gamma * diff, stream.next())
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite mask loss at step {step}")
        history.append(loss)
        eps -= cfg.learning_rate * (g * diff * s * (1.0 - s) * sign)
    return replace(logits, eps=eps), history


def mask_labels(ft: ParameterVector, spec: ModelSpec, dataset, label_source: str) -> np.ndarray:
    if label_source == "ft_model":
        return np.argmax(nncore.forward(ft, spec, dataset.inputs), axis=1)
    return np.asarray(dataset.labels)


def optimize_mask(
    pre: ParameterVector,
    ft: ParameterVector,
    base: GraftRegion,
    dataset,
    spec: ModelSpec,
    cfg: MaskOptConfig = MaskOptConfig(),
) -> tuple[MaskLogits, GraftRegion]:
    """Learn minimal edits to ``base`` so the graft keeps task loss low."""
    nncore.check_compatible(pre, ft)
    _check_region(base, pre)
    x = np.asarray(dataset.inputs, dtype=np.float64)
    if x.shape[0] == 0:
        raise ConfigError("mask optimization needs a non-empty dataset")
    y = mask_labels(ft, spec, dataset, cfg.label_source)
    nncore._check_spec(pre, spec)

    def loss_fn(values, b):
        return nncore._loss_and_grad(values, spec, x[b], y[b], None, 0.0)

    logits = MaskLogits.initial(base, cfg.init_value, spec)
    logits, _ = mask_descent(pre, ft, logits, loss_fn, cfg, x.shape[0])
    return logits, learned_region(logits, cfg)


def learned_region(logits: MaskLogits, cfg: MaskOptConfig) -> GraftRegion:
    """Binarized mask, or the top-budget projection when the config carries a budget.

    With a budget the region always has exactly the budgeted size: thresholding
    alone is often empty after a short run at small mask learning rates,
    while the logit ranking is already informative.
    """
    if cfg.sparsity_budget is None:
        return binarize_mask(logits, cfg.threshold)
    return project_sparsity(logits, cfg.sparsity_budget)


def binarize_mask(logits: MaskLogits, threshold: float = 0.5) -> GraftRegion:
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold must lie in (0, 1)")
    return GraftRegion.from_mask((logits.gamma() > threshold) & logits.graftable, "learned")


def project_sparsity(logits: MaskLogits, budget: float) -> GraftRegion:
    """Top ``ceil(budget * n_graftable)`` coordinates by effective mask value."""
    if not 0.0 < budget <= 1.0:
        raise ConfigError(f"budget must lie in (0, 1], got {budget}")
    g = logits.graftable
    count = budget_count(budget, int(g.sum()))
    return GraftRegion(_top_indices(logits.score(), g, count), g.size, "learned")


def retrain_region(
    pre: ParameterVector, spec: ModelSpec, region: GraftRegion, dataset, cfg: OptimizerConfig
) -> ParameterVector:
    """Train from ``pre`` touching only the region's coordinates."""
    _check_region(region, pre)
    if len(region) == 0:
        raise ConfigError("cannot re-train an empty region")
    return nncore.train(pre, spec, dataset, cfg, trainable=region.mask()).final
