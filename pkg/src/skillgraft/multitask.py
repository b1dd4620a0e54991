"""Joint training of several tasks on a shared body, per-task regions, overlap and union grafts.

The stacked parameter vector holds the shared body first and then one head
block per task.  ``task_view`` slices out body + head t, which is an ordinary
single-task vector; body indices are identical in both layouts, so regions
found on a view carry over to the stacked vector unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import evalmetrics as em
from . import grafting as gr
from . import nncore
from .errors import ConfigError, DegenerateDenominatorError, ShapeError
from .nncore import ModelSpec, OptimizerConfig, ParameterVector, Segment

TASK_STREAM = 5


@dataclass(frozen=True)
class MTTask:
    task: object  # synthtasks.TaskSpec
    train: object  # synthtasks.Dataset
    test: object
    name: str = ""


@dataclass(frozen=True)
class TaskCollection:
    tasks: tuple[MTTask, ...]
    spec: ModelSpec  # body spec; num_classes is replaced per task

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("a task collection needs at least one task")
        for t in self.tasks:
            if t.task.world.obs_dim != self.spec.input_dim:
                raise ConfigError("every task must share the model's input dimension")

    def __len__(self) -> int:
        return len(self.tasks)

    def task_spec(self, t: int) -> ModelSpec:
        return self.spec.with_classes(self.tasks[t].task.num_classes)


# -- stacked layout ----------------------------------------------------------


def _body_len(spec: ModelSpec) -> int:
    return nncore._body_length(spec)


def _head_layouts(collection: TaskCollection) -> list[tuple[Segment, ...]]:
    """Single-task head segments for each task, shifted to their stacked offsets."""
    body = _body_len(collection.spec)
    offset = body
    out = []
    for t in range(len(collection)):
        heads = [s for s in nncore.segment_table(collection.task_spec(t)) if s.offset >= body]
        shifted = []
        for s in heads:
            name = s.name.replace("head.", f"head.{t}.", 1)
            shifted.append(Segment(name, offset, s.length, s.kind, s.layer))
            offset += s.length
        out.append(tuple(shifted))
    return out


def stack_models(pre: ParameterVector, collection: TaskCollection) -> ParameterVector:
    """Stacked vector: ``pre``'s body followed by a fresh head per task (seeded by the task)."""
    spec = collection.spec
    body = _body_len(spec)
    body_segs = tuple(s for s in nncore.segment_table(spec) if s.offset < body)
    if tuple(pre.segments[: len(body_segs)]) != body_segs:
        raise ShapeError("pre-trained vector does not match the collection's body")
    width = spec.hidden_widths[-1]
    pre_classes = next(s.length for s in pre.segments if s.name == "head.weight") // width
    pre_spec = spec.with_classes(pre_classes)
    values = [pre.values[:body]]
    segs = list(body_segs)
    for t, heads in enumerate(_head_layouts(collection)):
        task = collection.tasks[t].task
        view, _ = nncore.attach_head(pre, pre_spec, task.num_classes, task.output_seed)
        values.append(view.values[body:])
        segs.extend(heads)
    return ParameterVector(np.concatenate(values), tuple(segs))


def _head_range(collection: TaskCollection, t: int) -> tuple[int, int]:
    heads = _head_layouts(collection)[t]
    return heads[0].offset, heads[-1].offset + heads[-1].length


def task_view(stacked: ParameterVector, collection: TaskCollection, t: int) -> tuple[ParameterVector, ModelSpec]:
    """Body + head ``t`` as a single-task vector and its spec."""
    spec = collection.task_spec(t)
    body = _body_len(spec)
    lo, hi = _head_range(collection, t)
    if len(stacked) != _head_range(collection, len(collection) - 1)[1]:
        raise ShapeError("stacked vector does not match the collection layout")
    values = np.concatenate([stacked.values[:body], stacked.values[lo:hi]])
    return ParameterVector(values, nncore.segment_table(spec)), spec


def _stacked_index(collection: TaskCollection, t: int) -> np.ndarray:
    """Stacked position of every coordinate of task ``t``'s view."""
    body = _body_len(collection.spec)
    lo, hi = _head_range(collection, t)
    return np.concatenate([np.arange(body), np.arange(lo, hi)])


def stacked_region(region: gr.GraftRegion, stacked_len: int) -> gr.GraftRegion:
    """A body-only region from a task view, expressed in the stacked vector."""
    return region.relabel(stacked_len)


def view_region(region: gr.GraftRegion, collection: TaskCollection, t: int) -> gr.GraftRegion:
    """Restrict a stacked region to task ``t``'s view (body indices keep their positions)."""
    idx = _stacked_index(collection, t)
    inv = np.full(region.total_params, -1, dtype=np.int64)
    inv[idx] = np.arange(idx.size)
    mapped = inv[region.indices]
    mapped = np.sort(mapped[mapped >= 0])
    return gr.GraftRegion(mapped, idx.size, region.provenance)


# -- training ----------------------------------------------------------------


def default_mt_steps(collection: TaskCollection, k: int, cap_shots: int = 512) -> int:
    """Sum of the single-task budgets: the task count times the mean single-task budget."""
    return sum(nncore.default_steps(t.task.num_classes, k, cap_shots) for t in collection.tasks)


@dataclass
class MTTrace:
    params: ParameterVector
    task_counts: np.ndarray
    task_sequence: np.ndarray


def train_mt(pre_stacked: ParameterVector, collection: TaskCollection, cfg: OptimizerConfig) -> MTTrace:
    """Each step: pick a task uniformly, take a batch from it, update body + that task's head."""
    n_tasks = len(collection)
    total = len(pre_stacked)
    views = [(_stacked_index(collection, t), collection.task_spec(t)) for t in range(n_tasks)]
    streams = []
    data = []
    for t, mt in enumerate(collection.tasks):
        spec_t = views[t][1]
        x = nncore._check_inputs(mt.train.inputs, spec_t)
        y = nncore._check_labels(mt.train.labels, spec_t, x.shape[0])
        streams.append(nncore.BatchStream(x.shape[0], cfg.batch_size, cfg.seed, stream=t))
        data.append((x, y))
    fixed = []
    for t in range(n_tasks):
        live = np.zeros(total, dtype=bool)
        idx, spec_t = views[t]
        live[idx] = ~nncore.frozen_mask(spec_t)
        fixed.append(np.flatnonzero(~live))
    task_rng = np.random.default_rng([cfg.seed, TASK_STREAM])
    seq = task_rng.integers(0, n_tasks, size=cfg.steps) if n_tasks > 1 else np.zeros(cfg.steps, dtype=np.int64)
    anchor = pre_stacked.values.copy() if cfg.l1_anchor_strength > 0 else None
    state = nncore.init_state(cfg, total)
    values = pre_stacked.values
    grad = np.zeros(total)
    for step in range(cfg.steps):
        t = int(seq[step])
        idx, spec_t = views[t]
        x, y = data[t]
        b = streams[t].next()
        view_anchor = None if anchor is None else anchor[idx]
        _, g = nncore._loss_and_grad(values[idx], spec_t, x[b], y[b], view_anchor, cfg.l1_anchor_strength)
        grad[:] = 0.0
        grad[idx] = g
        values, state = nncore._update(values, grad, cfg, state, fixed[t])
    counts = np.bincount(seq, minlength=n_tasks)
    final = pre_stacked.with_values(values) if cfg.steps > 0 else pre_stacked
    return MTTrace(final, counts, seq)


# -- regions and analysis ----------------------------------------------------


def per_task_regions(
    pre_stacked: ParameterVector,
    mt: ParameterVector,
    collection: TaskCollection,
    maskcfg: gr.MaskOptConfig,
) -> list[gr.GraftRegion]:
    """One mask run per task with an empty base, on that task's view of the MT model."""
    out = []
    for t, task in enumerate(collection.tasks):
        pre_t, spec_t = task_view(pre_stacked, collection, t)
        mt_t, _ = task_view(mt, collection, t)
        _, region = gr.optimize_mask(pre_t, mt_t, gr.GraftRegion.empty(len(pre_t)), task.train, spec_t, maskcfg)
        out.append(stacked_region(region, len(mt)))
    return out


@dataclass(frozen=True)
class OverlapMatrix:
    values: np.ndarray
    task_ids: tuple[str, ...]
    intersections: np.ndarray


def overlap_matrix(regions, task_ids=None) -> OverlapMatrix:
    """o[i][j] = |g_i & g_j| / |g_j|."""
    regions = list(regions)
    n = len(regions)
    if n and any(r.total_params != regions[0].total_params for r in regions):
        raise ShapeError("regions refer to vectors of different lengths")
    inter = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i, n):
            inter[i, j] = inter[j, i] = regions[i].intersection_size(regions[j])
    o = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            size_j = len(regions[j])
            if size_j:
                o[i, j] = inter[i, j] / size_j
            elif i == j:
                o[i, j] = 1.0
    ids = tuple(task_ids) if task_ids is not None else tuple(str(i) for i in range(n))
    return OverlapMatrix(o, ids, inter)


def union_region(regions, group) -> gr.GraftRegion:
    group = list(group)
    if not group:
        raise ConfigError("union needs a non-empty group")
    regions = list(regions)
    u = regions[group[0]]
    for g in group[1:]:
        u = u.union(regions[g])
    return gr.GraftRegion(u.indices, u.total_params, "union")


def purify_union(
    pre_stacked: ParameterVector,
    mt: ParameterVector,
    union: gr.GraftRegion,
    collection: TaskCollection,
    group,
    steps: int = 10,
    maskcfg: gr.MaskOptConfig | None = None,
) -> gr.GraftRegion:
    """A few mask steps from base = union against the mean loss of the group's tasks."""
    group = list(group)
    if not group:
        raise ConfigError("purification needs a non-empty group")
    cfg = replace(maskcfg or gr.MaskOptConfig(), steps=steps, sparsity_budget=None)
    nncore.check_compatible(pre_stacked, mt)
    if union.total_params != len(mt):
        raise ShapeError("union region does not match the stacked vector")
    members = []
    for t in group:
        idx = _stacked_index(collection, t)
        spec_t = collection.task_spec(t)
        x = np.asarray(collection.tasks[t].train.inputs, dtype=np.float64)
        mt_t, _ = task_view(mt, collection, t)
        y = gr.mask_labels(mt_t, spec_t, collection.tasks[t].train, cfg.label_source)
        members.append((idx, spec_t, x, y))
    n_batch = min(m[2].shape[0] for m in members)

    def loss_fn(values, b):
        total = 0.0
        grad = np.zeros_like(values)
        for idx, spec_t, x, y in members:
            rows = b % x.shape[0]
            loss, g = nncore._loss_and_grad(values[idx], spec_t, x[rows], y[rows], None, 0.0)
            total += loss
            grad[idx] += g
        return total / len(members), grad / len(members)

    graftable = np.zeros(len(mt), dtype=bool)
    for idx, spec_t, _, _ in members:
        graftable[idx] |= ~nncore.frozen_mask(spec_t)
    logits = gr.MaskLogits(np.full(len(mt), float(cfg.init_value)), union, cfg.init_value, graftable)
    logits, _ = gr.mask_descent(pre_stacked, mt, logits, loss_fn, cfg, n_batch)
    region = gr.binarize_mask(logits, cfg.threshold)
    return gr.GraftRegion(region.indices, region.total_params, "union")


@dataclass(frozen=True)
class TransferMatrix:
    values: np.ndarray  # NaN where the denominator is degenerate
    degenerate: np.ndarray  # per task column: pre and MT accuracies coincide


def task_accuracy(stacked: ParameterVector, collection: TaskCollection, t: int, split: str = "test") -> float:
    view, spec_t = task_view(stacked, collection, t)
    ds = getattr(collection.tasks[t], split)
    return em.accuracy(view, spec_t, ds)


def transfer_matrix(
    pre_stacked: ParameterVector, mt: ParameterVector, regions, collection: TaskCollection
) -> TransferMatrix:
    """Entry (i, j): relative gain on task j of grafting region i from the MT model."""
    regions = list(regions)
    n = len(collection)
    p0 = [task_accuracy(pre_stacked, collection, j) for j in range(n)]
    p1 = [task_accuracy(mt, collection, j) for j in range(n)]
    degenerate = np.array([p0[j] == p1[j] for j in range(n)])
    out = np.full((len(regions), n), np.nan)
    for i, r in enumerate(regions):
        g = gr.graft_compose(pre_stacked, mt, r)
        for j in range(n):
            try:
                out[i, j] = em.rel_gain(task_accuracy(g, collection, j), p0[j], p1[j])
            except DegenerateDenominatorError:
                pass
    return TransferMatrix(out, degenerate)


def full_region(stacked: ParameterVector, collection: TaskCollection) -> gr.GraftRegion:
    """Every coordinate some task may train."""
    m = np.zeros(len(stacked), dtype=bool)
    for t in range(len(collection)):
        idx = _stacked_index(collection, t)
        m[idx] |= ~nncore.frozen_mask(collection.task_spec(t))
    return gr.GraftRegion.from_mask(m, "union")
