"""Accuracy, agreement, calibration, relative gain and the sweep/track evaluators."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import grafting as gr
from . import nncore
from .errors import ConfigError, DataError, DegenerateDenominatorError, IntegrityError
from .nncore import ModelSpec, ParameterVector

DEFAULT_BINS = 10


def predict(params: ParameterVector, spec: ModelSpec, inputs) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class
    return np.argmax(nncore.forward(params, spec, inputs), axis=1)


def _nonempty(dataset) -> None:
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")


def accuracy(params: ParameterVector, spec: ModelSpec, dataset) -> float:
    _nonempty(dataset)
    return float(np.mean(predict(params, spec, dataset.inputs) == np.asarray(dataset.labels)))


def agreement(a: ParameterVector, b: ParameterVector, spec: ModelSpec, dataset) -> float:
    """Fraction of inputs on which the two models predict the same class."""
    _nonempty(dataset)
    return float(np.mean(predict(a, spec, dataset.inputs) == predict(b, spec, dataset.inputs)))


# -- calibration -------------------------------------------------------------


@dataclass(frozen=True)
class BinStat:
    count: int
    mean_confidence: float
    accuracy: float


def calibration_bins(confidences, correct, num_bins: int = DEFAULT_BINS) -> list[BinStat]:
    """Equal-width confidence bins [(m-1)/M, m/M); confidence 1.0 lands in the top bin."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    ok = np.asarray(correct, dtype=bool).ravel()
    if conf.size == 0:
        raise DataError("calibration needs at least one prediction")
    if conf.shape != ok.shape:
        raise ConfigError("confidences and correctness flags differ in length")
    if num_bins < 1:
        raise ConfigError("need at least one bin")
    if np.any((conf < 0) | (conf > 1)) or not np.all(np.isfinite(conf)):
        raise DataError("confidences must lie in [0, 1]")
    which = np.minimum(np.floor(conf * num_bins).astype(np.int64), num_bins - 1)
    bins = []
    for m in range(num_bins):
        sel = which == m
        n = int(sel.sum())
        if n == 0:
            bins.append(BinStat(0, 0.0, 0.0))
        else:
            bins.append(BinStat(n, float(conf[sel].mean()), float(ok[sel].mean())))
    return bins


def ece_from_bins(bins: list[BinStat]) -> float:
    n = sum(b.count for b in bins)
    if n == 0:
        raise DataError("no predictions in the bins")
    return float(sum(b.count / n * abs(b.mean_confidence - b.accuracy) for b in bins if b.count))


def ece(confidences, correct, num_bins: int = DEFAULT_BINS) -> float:
    return ece_from_bins(calibration_bins(confidences, correct, num_bins))


@dataclass
class EvalReport:
    accuracy: float
    ece: float
    num_bins: int
    bin_stats: list[BinStat]
    agreement_with: tuple[str, float] | None = None

    def to_dict(self) -> dict:
        d = {
            "accuracy": self.accuracy,
            "ece": self.ece,
            "num_bins": self.num_bins,
            "bin_stats": [[b.count, b.mean_confidence, b.accuracy] for b in self.bin_stats],
        }
        if self.agreement_with is not None:
            d["agreement_with"] = {"model": self.agreement_with[0], "fraction": self.agreement_with[1]}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        bins = [BinStat(int(c), float(mc), float(a)) for c, mc, a in d["bin_stats"]]
        agree = d.get("agreement_with")
        return cls(
            float(d["accuracy"]),
            float(d["ece"]),
            int(d["num_bins"]),
            bins,
            None if agree is None else (str(agree["model"]), float(agree["fraction"])),
        )


def evaluate(
    params: ParameterVector,
    spec: ModelSpec,
    dataset,
    num_bins: int = DEFAULT_BINS,
    reference: tuple[str, ParameterVector] | None = None,
) -> EvalReport:
    """Accuracy plus max-softmax calibration, optionally agreement with a named reference model."""
    _nonempty(dataset)
    probs = nncore.softmax(nncore.forward(params, spec, dataset.inputs))
    pred = np.argmax(probs, axis=1)
    ok = pred == np.asarray(dataset.labels)
    bins = calibration_bins(probs.max(axis=1), ok, num_bins)
    agree = None
    if reference is not None:
        agree = (reference[0], agreement(params, reference[1], spec, dataset))
    return EvalReport(float(ok.mean()), ece_from_bins(bins), num_bins, bins, agree)


def rel_gain(p_region: float, p_zero: float, p_one: float) -> float:
    """Share of the full model's gain over the zero model that the region recovers."""
    if p_one == p_zero:
        raise DegenerateDenominatorError(f"full and zero performance coincide ({p_one})")
    return (p_region - p_zero) / (p_one - p_zero)


# -- curves ------------------------------------------------------------------


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation, reduced in sorted order."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise DataError("cannot aggregate zero values")
    mean = float(np.sum(v) / v.size)
    std = float(np.sqrt(np.sum((v - mean) ** 2) / (v.size - 1))) if v.size > 1 else 0.0
    return mean, std


@dataclass(frozen=True)
class SweepPoint:
    x: float
    y_mean: float
    y_std: float
    n_seeds: int


@dataclass(frozen=True)
class SweepCurve:
    points: tuple[SweepPoint, ...]

    def __post_init__(self):
        xs = [p.x for p in self.points]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ConfigError("sweep x values must be strictly increasing")

    @classmethod
    def from_samples(cls, xs, samples) -> SweepCurve:
        """``samples[i]`` holds the per-seed values measured at ``xs[i]``."""
        pts = []
        for x, vals in zip(xs, samples):
            m, s = mean_std(vals)
            pts.append(SweepPoint(float(x), m, s, len(vals)))
        return cls(tuple(pts))

    def ys(self) -> np.ndarray:
        return np.array([p.y_mean for p in self.points])

    def rows(self) -> tuple[list[str], list[list]]:
        return ["x", "y_mean", "y_std", "n_seeds"], [[p.x, p.y_mean, p.y_std, p.n_seeds] for p in self.points]


SWEEP_METHODS = ("learned", "movement_topk", "random")


def _check_fractions(fractions) -> list[float]:
    fr = [float(f) for f in fractions]
    if not fr or any(not 0.0 < f <= 1.0 for f in fr):
        raise ConfigError("sweep fractions must lie in (0, 1]")
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise ConfigError("sweep fractions must be sorted and distinct")
    return fr


def sweep_regions(
    pre: ParameterVector,
    ft: ParameterVector,
    spec: ModelSpec,
    method: str,
    fractions,
    seed: int,
    train_ds=None,
    maskcfg: gr.MaskOptConfig | None = None,
    logits: gr.MaskLogits | None = None,
) -> list[gr.GraftRegion]:
    """One region per fraction; learned regions share a single mask run."""
    fr = _check_fractions(fractions)
    if method == "learned":
        if logits is None:
            if train_ds is None:
                raise ConfigError("learned sweep needs a training dataset")
            cfg = replace(maskcfg or gr.MaskOptConfig(), seed=seed)
            logits, _ = gr.optimize_mask(pre, ft, gr.GraftRegion.empty(len(pre)), train_ds, spec, cfg)
        return [gr.project_sparsity(logits, f) for f in fr]
    if method == "movement_topk":
        return [gr.movement_region(pre, ft, f, spec) for f in fr]
    if method == "random":
        return [gr.random_region(spec, f, seed) for f in fr]
    raise ConfigError(f"unknown sweep method {method!r}")


def sparsity_sweep(
    pre: ParameterVector,
    ft: ParameterVector,
    spec: ModelSpec,
    dataset,
    method: str,
    fractions,
    seeds,
    train_ds=None,
    maskcfg: gr.MaskOptConfig | None = None,
) -> SweepCurve:
    """Graft accuracy on ``dataset`` at each fraction, aggregated over region seeds."""
    fr = _check_fractions(fractions)
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    per_seed = []
    for s in seeds:
        regions = sweep_regions(pre, ft, spec, method, fr, s, train_ds, maskcfg)
        per_seed.append([accuracy(gr.graft_compose(pre, ft, r), spec, dataset) for r in regions])
    cols = np.array(per_seed).T
    return SweepCurve.from_samples(fr, cols)


@dataclass(frozen=True)
class InterpolationCurve:
    alphas: tuple[float, ...]
    id_accuracy: tuple[float, ...]
    ood_accuracy: tuple[float, ...]

    def rows(self) -> tuple[list[str], list[list]]:
        return ["alpha", "id_accuracy", "ood_accuracy"], [list(r) for r in zip(self.alphas, self.id_accuracy, self.ood_accuracy)]


def interpolation_curve(
    pre: ParameterVector, model: ParameterVector, alphas, id_ds, ood_ds, spec: ModelSpec
) -> InterpolationCurve:
    al = [float(a) for a in alphas]
    if any(not 0.0 <= a <= 1.0 for a in al) or any(b < a for a, b in zip(al, al[1:])):
        raise ConfigError("alphas must be sorted within [0, 1]")
    ids, oods = [], []
    for a in al:
        m = gr.wise_interpolate(pre, model, a)
        ids.append(accuracy(m, spec, id_ds))
        oods.append(accuracy(m, spec, ood_ds))
    return InterpolationCurve(tuple(al), tuple(ids), tuple(oods))


@dataclass
class TrackResult:
    steps: list[int]
    series: list[np.ndarray] = field(default_factory=list)  # one accuracy series per region


def checkpoint_track(
    trajectory: nncore.TrainTrajectory, regions, pre: ParameterVector, spec: ModelSpec, dataset
) -> TrackResult:
    """Accuracy of graft(pre, checkpoint, region) along the trajectory."""
    steps = [s for s, _ in trajectory.checkpoints]
    series = []
    for r in regions:
        series.append(np.array([accuracy(gr.graft_compose(pre, p, r), spec, dataset) for _, p in trajectory.checkpoints]))
    return TrackResult(steps, series)


def moving_average(series, window: int = 5) -> np.ndarray:
    """Centered moving average; the window shrinks at the ends."""
    v = np.asarray(series, dtype=np.float64)
    half = window // 2
    return np.array([v[max(0, i - half) : i + half + 1].mean() for i in range(v.size)])


@dataclass(frozen=True)
class RegionCell:
    layer: int
    kind: str
    count: int
    fraction: float
    cell_size: int


def region_distribution(region: gr.GraftRegion, spec: ModelSpec) -> list[RegionCell]:
    """Counts of region indices per (layer, kind) cell, in layout order."""
    segs = nncore.segment_table(spec)
    total = nncore.num_params(spec)
    if region.total_params != total:
        raise IntegrityError(f"region covers {region.total_params} parameters, spec has {total}")
    idx = region.indices
    if idx.size and (idx[0] < 0 or idx[-1] >= total):
        raise IntegrityError("region index outside every segment")
    cells: dict[tuple[int, str], list[int]] = {}
    for s in segs:
        n = int(np.count_nonzero((idx >= s.offset) & (idx < s.offset + s.length)))
        c = cells.setdefault((s.layer, s.kind), [0, 0])
        c[0] += n
        c[1] += s.length
    n_all = len(region)
    return [
        RegionCell(layer, kind, c, (c / n_all) if n_all else 0.0, size) for (layer, kind), (c, size) in cells.items()
    ]
