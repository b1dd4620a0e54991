"""Sequential task training: region-isolated (graft) versus naive full fine-tuning."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import evalmetrics as em
from . import grafting as gr
from . import nncore
from .errors import ConfigError
from .nncore import ModelSpec, OptimizerConfig, ParameterVector

MODES = ("graft", "naive")
EVAL_UNIONS = ("task", "latest")


class RegionExhaustedWarning(UserWarning):
    """A task's region is already fully claimed by earlier tasks."""


@dataclass(frozen=True)
class SequenceTask:
    task: object  # synthtasks.TaskSpec
    train: object
    test: object
    name: str = ""


@dataclass
class ContinualState:
    current_body: np.ndarray
    task_regions: list[gr.GraftRegion]
    pre: ParameterVector
    mode: str


@dataclass
class ContinualResult:
    mode: str
    eval_union: str
    accuracy_matrix: np.ndarray  # a[n][t]: accuracy on task t after training task n; NaN above the diagonal
    region_sizes: list[int] = field(default_factory=list)
    effective_sizes: list[int] = field(default_factory=list)
    solo_graft_accuracy: list[float] = field(default_factory=list)
    head_params: int = 0
    budget_total: int | None = None  # sum of per-task budget counts
    exhausted: list[int] = field(default_factory=list)
    graft_vectors: list[list[np.ndarray]] = field(default_factory=list, repr=False)
    regions: list[gr.GraftRegion] = field(default_factory=list, repr=False)  # body-only, graft mode
    final_body: np.ndarray | None = field(default=None, repr=False)

    @property
    def forgetting(self) -> np.ndarray:
        a = self.accuracy_matrix
        n = a.shape[0]
        return np.array([np.nanmax(a[t:, t]) - a[n - 1, t] for t in range(n)])

    @property
    def localization_cost(self) -> int:
        """Stored region indices: one per parameter in some task's region."""
        return int(sum(self.region_sizes))


def _head_view(pre: ParameterVector, spec: ModelSpec, task) -> tuple[ParameterVector, ModelSpec]:
    return nncore.attach_head(pre, spec, task.num_classes, task.output_seed)


def _with_body(view: ParameterVector, body: np.ndarray) -> ParameterVector:
    values = view.values.copy()
    values[: body.size] = body
    return view.with_values(values)


def run_continual(
    pre: ParameterVector,
    spec: ModelSpec,
    sequence,
    mode: str,
    maskcfg: gr.MaskOptConfig,
    optcfg,
    eval_union: str = "task",
    keep_vectors: bool = False,
) -> ContinualResult:
    """Train the tasks in order and evaluate every seen task after each one.

    Graft mode: each task's region comes from an independent fine-tuning run
    started at ``pre``; the continual model then only trains that region minus
    the regions of earlier tasks.  Task t is evaluated on the graft of ``pre``
    with the current model over the union of regions of tasks up to t
    (``eval_union="task"``) or up to the latest task (``"latest"``).
    Naive mode fine-tunes the whole body task after task and evaluates directly.
    Every task keeps its own frozen head.  ``optcfg`` is one OptimizerConfig
    for all tasks or a sequence with one per task.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown continual mode {mode!r}")
    if eval_union not in EVAL_UNIONS:
        raise ConfigError(f"unknown eval_union {eval_union!r}")
    seq = list(sequence)
    if not seq:
        raise ConfigError("continual learning needs at least one task")
    cfgs = [optcfg] * len(seq) if isinstance(optcfg, OptimizerConfig) else list(optcfg)
    if len(cfgs) != len(seq):
        raise ConfigError("need one optimizer config per task")
    body_len = nncore._body_length(spec)
    views = [_head_view(pre, spec, s.task) for s in seq]
    n_tasks = len(seq)
    acc = np.full((n_tasks, n_tasks), np.nan)
    body = pre.values[:body_len].copy()
    claimed = gr.GraftRegion.empty(body_len)
    regions: list[gr.GraftRegion] = []
    result = ContinualResult(mode, eval_union, acc)
    result.head_params = sum(len(v) - body_len for v, _ in views)
    if mode == "graft" and maskcfg.sparsity_budget is not None:
        result.budget_total = sum(
            gr.budget_count(maskcfg.sparsity_budget, int(nncore.graftable_mask(sp).sum())) for _, sp in views
        )
    for n, item in enumerate(seq):
        pre_n, spec_n = views[n]
        current = _with_body(pre_n, body)
        if mode == "graft":
            solo = nncore.train(pre_n, spec_n, item.train, cfgs[n]).final
            _, region = gr.optimize_mask(pre_n, solo, gr.GraftRegion.empty(len(pre_n)), item.train, spec_n, maskcfg)
            result.solo_graft_accuracy.append(em.accuracy(gr.graft_compose(pre_n, solo, region), spec_n, item.test))
            body_region = gr.GraftRegion(region.indices[region.indices < body_len], body_len)
            effective = body_region.difference(claimed)
            regions.append(body_region)
            result.region_sizes.append(len(body_region))
            result.effective_sizes.append(len(effective))
            if len(effective) == 0:
                warnings.warn(f"task {n}: region fully covered by earlier tasks", RegionExhaustedWarning, stacklevel=2)
                result.exhausted.append(n)
            else:
                mask = np.zeros(len(pre_n), dtype=bool)
                mask[effective.indices] = True
                current = nncore.train(current, spec_n, item.train, cfgs[n], trainable=mask).final
            claimed = claimed.union(body_region)
        else:
            current = nncore.train(current, spec_n, item.train, cfgs[n]).final
        body = current.values[:body_len].copy()
        row_vectors = []
        for t in range(n + 1):
            pre_t, spec_t = views[t]
            model_t = _with_body(pre_t, body)
            if mode == "graft":
                upto = t if eval_union == "task" else n
                u = regions[0]
                for r in regions[1 : upto + 1]:
                    u = u.union(r)
                model_t = gr.graft_compose(pre_t, model_t, u.relabel(len(pre_t)))
            acc[n, t] = em.accuracy(model_t, spec_t, seq[t].test)
            if keep_vectors:
                row_vectors.append(model_t.values.copy())
        if keep_vectors:
            result.graft_vectors.append(row_vectors)
    result.regions = regions
    result.final_body = body
    return result
