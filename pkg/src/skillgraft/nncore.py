"""Small fully-connected classifier over a flat float64 parameter vector.

Everything downstream (grafting, mask learning, calibration) manipulates the
flat vector directly, so the network exposes its parameters as one contiguous
array described by a segment table rather than as per-layer objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError

LN_EPS = 1e-5
HEAD_STREAM = 7
KINDS = ("weight", "bias", "layernorm_scale", "layernorm_shift", "head")


class Segment(NamedTuple):
    name: str
    offset: int
    length: int
    kind: str
    layer: int


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    num_classes: int
    activation: str = "tanh"
    layernorm_enabled: bool = False
    head_mode: str = "frozen_random"
    freeze_first_layer: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.hidden_widths:
            raise ConfigError("hidden_widths must be non-empty")
        if self.input_dim < 1 or self.num_classes < 1 or min(self.hidden_widths) < 1:
            raise ConfigError(f"all dimensions must be >= 1: {self}")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.head_mode not in ("frozen_random", "trainable"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")

    def with_classes(self, num_classes: int) -> ModelSpec:
        return replace(self, num_classes=num_classes)

    @property
    def num_layers(self) -> int:
        return len(self.hidden_widths)


class _Layout(NamedTuple):
    segments: tuple[Segment, ...]
    shapes: dict
    frozen: np.ndarray  # bool per coordinate
    total: int
    frozen_idx: np.ndarray


@lru_cache(maxsize=256)
def _layout(spec: ModelSpec) -> _Layout:
    segs: list[Segment] = []
    shapes: dict[str, tuple[int, ...]] = {}
    frozen_names: set[str] = set()
    offset = 0

    def add(name, shape, kind, layer, frozen=False):
        nonlocal offset
        n = int(np.prod(shape))
        segs.append(Segment(name, offset, n, kind, layer))
        shapes[name] = shape
        if frozen:
            frozen_names.add(name)
        offset += n

    fan_in = spec.input_dim
    for l, width in enumerate(spec.hidden_widths):
        fz = spec.freeze_first_layer and l == 0
        add(f"layers.{l}.weight", (width, fan_in), "weight", l, fz)
        add(f"layers.{l}.bias", (width,), "bias", l, fz)
        if spec.layernorm_enabled:
            add(f"layers.{l}.ln_scale", (width,), "layernorm_scale", l, fz)
            add(f"layers.{l}.ln_shift", (width,), "layernorm_shift", l, fz)
        fan_in = width
    head_frozen = spec.head_mode == "frozen_random"
    add("head.weight", (spec.num_classes, fan_in), "head", spec.num_layers, head_frozen)
    if not head_frozen:
        add("head.bias", (spec.num_classes,), "head", spec.num_layers)
    frozen = np.zeros(offset, dtype=bool)
    for s in segs:
        if s.name in frozen_names:
            frozen[s.offset : s.offset + s.length] = True
    frozen.setflags(write=False)
    frozen_idx = np.flatnonzero(frozen)
    frozen_idx.setflags(write=False)
    return _Layout(tuple(segs), shapes, frozen, offset, frozen_idx)


def segment_table(spec: ModelSpec) -> tuple[Segment, ...]:
    return _layout(spec).segments


def num_params(spec: ModelSpec) -> int:
    return _layout(spec).total


def frozen_mask(spec: ModelSpec) -> np.ndarray:
    """Boolean mask of coordinates that no optimizer or graft may touch."""
    return _layout(spec).frozen


def graftable_mask(spec: ModelSpec) -> np.ndarray:
    return ~_layout(spec).frozen


@dataclass(eq=False)
class ParameterVector:
    values: np.ndarray
    segments: tuple[Segment, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.segments = tuple(Segment(*s) for s in self.segments)
        if self.values.ndim != 1:
            raise ShapeError("parameter values must be a flat array")
        pos = 0
        for s in self.segments:
            if s.offset != pos or s.length < 0:
                raise ShapeError(f"segment {s.name} is not contiguous at offset {pos}")
            pos += s.length
        if pos != self.values.size:
            raise ShapeError(f"segments cover {pos} entries but vector has {self.values.size}")

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> ParameterVector:
        return ParameterVector(self.values.copy(), self.segments)

    def with_values(self, values: np.ndarray) -> ParameterVector:
        return ParameterVector(values, self.segments)

    def segment(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def view(self, name: str) -> np.ndarray:
        s = self.segment(name)
        return self.values[s.offset : s.offset + s.length]

    def compatible(self, other: ParameterVector) -> bool:
        return self.segments == other.segments


def check_compatible(*vectors: ParameterVector) -> None:
    first = vectors[0]
    for v in vectors[1:]:
        if not first.compatible(v):
            raise ShapeError("parameter vectors have different segment tables")


def _check_spec(params: ParameterVector, spec: ModelSpec) -> _Layout:
    lay = _layout(spec)
    if params.segments != lay.segments:
        raise ShapeError("parameter vector does not match the model spec")
    return lay


# -- initialization ----------------------------------------------------------


def frozen_head(num_classes: int, width: int, seed: int) -> np.ndarray:
    """Unit-norm class directions drawn from the head seed stream."""
    rng = np.random.default_rng([seed, HEAD_STREAM])
    h = rng.standard_normal((num_classes, width))
    return h / np.linalg.norm(h, axis=1, keepdims=True)


def init_model(spec: ModelSpec, seed: int) -> ParameterVector:
    lay = _layout(spec)
    rng = np.random.default_rng([seed, 0])
    values = np.zeros(lay.total)
    pv = ParameterVector(values, lay.segments)
    for s in lay.segments:
        shape = lay.shapes[s.name]
        if s.kind == "weight" or (s.name == "head.weight" and spec.head_mode == "trainable"):
            bound = math.sqrt(3.0 / shape[1])
            pv.view(s.name)[:] = rng.uniform(-bound, bound, size=s.length)
        elif s.kind == "layernorm_scale":
            pv.view(s.name)[:] = 1.0
    if spec.head_mode == "frozen_random":
        pv.view("head.weight")[:] = frozen_head(spec.num_classes, spec.hidden_widths[-1], seed).ravel()
    return pv


def attach_head(
    params: ParameterVector, spec: ModelSpec, num_classes: int, seed: int
) -> tuple[ParameterVector, ModelSpec]:
    """Keep the body of ``params`` and put a fresh head for a new task on top."""
    _check_spec(params, spec)
    new_spec = spec.with_classes(num_classes)
    fresh = init_model(new_spec, seed)
    body = _body_length(spec)
    fresh.values[:body] = params.values[:body]
    return fresh, new_spec


def _body_length(spec: ModelSpec) -> int:
    return next(s.offset for s in _layout(spec).segments if s.kind == "head")


# -- forward / backward ------------------------------------------------------


def _unpack(values: np.ndarray, spec: ModelSpec):
    lay = _layout(spec)
    out = {}
    for s in lay.segments:
        out[s.name] = values[s.offset : s.offset + s.length].reshape(lay.shapes[s.name])
    return out


def _check_inputs(inputs, spec: ModelSpec) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"inputs must have shape (batch, {spec.input_dim}), got {x.shape}")
    return x


def _forward(values: np.ndarray, spec: ModelSpec, x: np.ndarray):
    p = _unpack(values, spec)
    a = x
    cache = []
    for l in range(spec.num_layers):
        u = a @ p[f"layers.{l}.weight"].T + p[f"layers.{l}.bias"]
        if spec.layernorm_enabled:
            width = u.shape[1]
            xc = u - u.sum(axis=1, keepdims=True) / width
            inv = 1.0 / np.sqrt((xc * xc).sum(axis=1, keepdims=True) / width + LN_EPS)
            n = xc * inv
            v = n * p[f"layers.{l}.ln_scale"] + p[f"layers.{l}.ln_shift"]
        else:
            n = inv = None
            v = u
        h = np.tanh(v) if spec.activation == "tanh" else np.maximum(v, 0.0)
        cache.append((a, n, inv, v, h))
        a = h
    logits = a @ p["head.weight"].T
    if spec.head_mode == "trainable":
        logits = logits + p["head.bias"]
    return logits, cache, p


def _backward(dlogits, cache, p, spec: ModelSpec, squared: bool = False) -> np.ndarray:
    """Gradient of sum_b dlogits[b]·logits[b].

    With ``squared`` the per-sample gradients are squared before summing
    over the batch (used for the diagonal Fisher).
    """
    lay = _layout(spec)
    flat = np.empty(lay.total)
    views = _unpack(flat, spec)

    def acc(name, rows, cols=None):
        out = views[name]
        if cols is None:
            np.sum(rows * rows if squared else rows, axis=0, out=out)
        elif squared:
            np.matmul((rows * rows).T, cols * cols, out=out)
        else:
            np.matmul(rows.T, cols, out=out)

    a_last = cache[-1][4]
    acc("head.weight", dlogits, a_last)
    if spec.head_mode == "trainable":
        acc("head.bias", dlogits)
    da = dlogits @ p["head.weight"]
    for l in range(spec.num_layers - 1, -1, -1):
        a_prev, n, inv, v, h = cache[l]
        if spec.activation == "tanh":
            dv = da * (1.0 - h * h)
        else:
            dv = da * (v > 0)
        if spec.layernorm_enabled:
            acc(f"layers.{l}.ln_scale", dv * n)
            acc(f"layers.{l}.ln_shift", dv)
            dn = dv * p[f"layers.{l}.ln_scale"]
            width = dn.shape[1]
            du = inv * (dn - dn.sum(axis=1, keepdims=True) / width - n * ((dn * n).sum(axis=1, keepdims=True) / width))
        else:
            du = dv
        acc(f"layers.{l}.weight", du, a_prev)
        acc(f"layers.{l}.bias", du)
        if l > 0:
            da = du @ p[f"layers.{l}.weight"]
    flat[lay.frozen_idx] = 0.0
    return flat


def forward(params: ParameterVector, spec: ModelSpec, inputs) -> np.ndarray:
    _check_spec(params, spec)
    x = _check_inputs(inputs, spec)
    return _forward(params.values, spec, x)[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, spec: ModelSpec, batch: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (batch,):
        raise ShapeError(f"labels must have shape ({batch},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
        raise DataError(f"labels must lie in [0, {spec.num_classes})")
    return y.astype(np.int64)


def loss_and_grad(
    params: ParameterVector,
    spec: ModelSpec,
    inputs,
    labels,
    anchor: ParameterVector | None = None,
    l1_strength: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy plus ``l1_strength * |params - anchor|_1``."""
    lay = _check_spec(params, spec)
    x = _check_inputs(inputs, spec)
    y = _check_labels(labels, spec, x.shape[0])
    if l1_strength > 0 and anchor is None:
        raise ConfigError("l1_strength > 0 requires an anchor")
    return _loss_and_grad(params.values, spec, x, y, None if l1_strength == 0 else anchor.values, l1_strength, lay)


def _loss_and_grad(values, spec, x, y, anchor_values, l1_strength, lay=None):
    lay = lay or _layout(spec)
    logits, cache, p = _forward(values, spec, x)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    b = x.shape[0]
    rows = np.arange(b)
    loss = float(np.mean(lse - z[rows, y]))
    probs = np.exp(z - lse[:, None])
    probs[rows, y] -= 1.0
    grad = _backward(probs / b, cache, p, spec)
    if anchor_values is not None and l1_strength > 0:
        diff = values - anchor_values
        live = ~lay.frozen
        loss += l1_strength * float(np.abs(diff[live]).sum())
        grad += l1_strength * np.sign(diff) * live
    return loss, grad


def per_sample_squared_grad(params: ParameterVector, spec: ModelSpec, inputs, labels) -> np.ndarray:
    """Mean over samples of the squared per-sample gradient of -log p(y|x)."""
    _check_spec(params, spec)
    x = _check_inputs(inputs, spec)
    y = _check_labels(labels, spec, x.shape[0])
    logits, cache, p = _forward(params.values, spec, x)
    probs = softmax(logits)
    probs[np.arange(x.shape[0]), y] -= 1.0
    return _backward(probs, cache, p, spec, squared=True) / x.shape[0]


def finite_diff_check(
    params: ParameterVector,
    spec: ModelSpec,
    batch,
    sample_indices: Sequence[int],
    h: float = 1e-5,
    anchor: ParameterVector | None = None,
    l1_strength: float = 0.0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``batch`` is an ``(inputs, labels)`` pair. Frozen coordinates are compared
    against zero, which is what the analytic gradient reports for them.
    """
    if not h > 0:
        raise ConfigError("finite-difference step must be positive")
    inputs, labels = batch
    idx = np.asarray(sorted(set(int(i) for i in sample_indices)), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(params)):
        raise ConfigError("sample index outside the parameter range")
    _, grad = loss_and_grad(params, spec, inputs, labels, anchor, l1_strength)
    frozen = frozen_mask(spec)
    worst = 0.0
    for i in idx:
        if frozen[i]:
            numeric = 0.0
        else:
            plus = params.copy()
            minus = params.copy()
            plus.values[i] += h
            minus.values[i] -= h
            lp, _ = loss_and_grad(plus, spec, inputs, labels, anchor, l1_strength)
            lm, _ = loss_and_grad(minus, spec, inputs, labels, anchor, l1_strength)
            numeric = (lp - lm) / (2 * h)
        a = grad[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst


# -- optimization ------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "sgd"
    learning_rate: float = 1e-2
    batch_size: int = 8
    steps: int = 0
    weight_decay: float = 1e-4
    l1_anchor_strength: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.algorithm!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.weight_decay < 0 or self.l1_anchor_strength < 0:
            raise ConfigError("weight_decay and l1_anchor_strength must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")


@dataclass
class OptimizerState:
    algorithm: str
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def init_state(cfg: OptimizerConfig, n: int) -> OptimizerState:
    if cfg.algorithm == "adamw":
        return OptimizerState("adamw", 0, np.zeros(n), np.zeros(n))
    return OptimizerState("sgd", 0)


def _update(theta, grad, cfg: OptimizerConfig, state: OptimizerState, fixed: np.ndarray):
    """Return (new values, new state); coordinates listed in ``fixed`` keep value and moments."""
    lr = cfg.learning_rate
    if cfg.algorithm == "sgd":
        update = theta * cfg.weight_decay
        update += grad
        update *= lr
        new_state = OptimizerState("sgd", state.step + 1)
    else:
        t = state.step + 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        m = b1 * state.m
        m += (1 - b1) * grad
        v = b2 * state.v
        v += (1 - b2) * (grad * grad)
        m[fixed] = state.m[fixed]
        v[fixed] = state.v[fixed]
        denom = np.sqrt(v / (1 - b2**t))
        denom += cfg.adam_eps
        update = m / (1 - b1**t)
        update /= denom
        update += cfg.weight_decay * theta
        update *= lr
        new_state = OptimizerState("adamw", t, m, v)
    update[fixed] = 0.0
    return theta - update, new_state


def optimizer_step(
    state: OptimizerState,
    params: ParameterVector,
    grad: np.ndarray,
    cfg: OptimizerConfig,
    trainable: np.ndarray | None = None,
) -> tuple[ParameterVector, OptimizerState]:
    """One SGD or AdamW update; coordinates outside ``trainable`` are left alone."""
    if state.algorithm != cfg.algorithm:
        raise ConfigError("optimizer state does not match cfg.algorithm")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ShapeError("gradient shape does not match parameters")
    fixed = np.zeros(0, dtype=np.int64) if trainable is None else np.flatnonzero(~np.asarray(trainable, dtype=bool))
    new, new_state = _update(params.values, grad, cfg, state, fixed)
    return params.with_values(new), new_state


def default_steps(num_classes: int, k: int, cap_shots: int = 512) -> int:
    """16 * n * k steps, with k capped at ``cap_shots``."""
    return 16 * num_classes * min(k, cap_shots)


class BatchStream:
    """Seeded reshuffling minibatch index stream with wraparound."""

    def __init__(self, n: int, batch_size: int, seed: int, stream: int = 0):
        if n < 1:
            raise DataError("cannot draw batches from an empty dataset")
        self.n = n
        self.batch_size = batch_size
        self._rng = np.random.default_rng([seed, stream])
        self._perm = self._rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.batch_size >= self.n and self._pos == 0:
            # full batch every step, order irrelevant to the gradient
            return np.arange(self.n)
        out = []
        need = self.batch_size
        while need:
            if self._pos == self.n:
                self._perm = self._rng.permutation(self.n)
                self._pos = 0
            take = min(need, self.n - self._pos)
            out.append(self._perm[self._pos : self._pos + take])
            self._pos += take
            need -= take
        return np.concatenate(out)


@dataclass
class TrainTrajectory:
    checkpoints: list[tuple[int, ParameterVector]]
    final: ParameterVector
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))


def train(
    params0: ParameterVector,
    spec: ModelSpec,
    dataset,
    cfg: OptimizerConfig,
    checkpoint_every: int | None = None,
    trainable: np.ndarray | None = None,
) -> TrainTrajectory:
    """Minibatch training; ``trainable`` further restricts which coordinates move."""
    lay = _check_spec(params0, spec)
    x = _check_inputs(dataset.inputs, spec)
    y = _check_labels(dataset.labels, spec, x.shape[0])
    if x.shape[0] == 0:
        raise DataError("cannot train on an empty dataset")
    live = ~lay.frozen if trainable is None else (~lay.frozen & np.asarray(trainable, dtype=bool))
    anchor = params0.values.copy() if cfg.l1_anchor_strength > 0 else None
    stream = BatchStream(x.shape[0], cfg.batch_size, cfg.seed)
    state = init_state(cfg, lay.total)
    fixed = np.flatnonzero(~live)
    values = params0.values
    checkpoints = [(0, params0)]
    losses = np.empty(cfg.steps)
    for step in range(1, cfg.steps + 1):
        b = stream.next()
        loss, grad = _loss_and_grad(values, spec, x[b], y[b], anchor, cfg.l1_anchor_strength, lay)
        losses[step - 1] = loss
        values, state = _update(values, grad, cfg, state, fixed)
        if checkpoint_every and step % checkpoint_every == 0 and step != cfg.steps:
            checkpoints.append((step, params0.with_values(values)))
    final = params0.with_values(values) if cfg.steps > 0 else params0
    if cfg.steps > 0:
        checkpoints.append((cfg.steps, final))
    return TrainTrajectory(checkpoints, final, losses)
