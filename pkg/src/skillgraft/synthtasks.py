"""Latent-teacher task world.

Observations are ``x = A z + sigma * noise`` for a standard-normal latent ``z``;
labels are ``argmax(W z + b)``. Labels live in latent space, so changing the
mixing ``A`` shifts the input distribution without changing task semantics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, DataError

SPLITS = {"train": 0, "validation": 1, "test": 2}
REJECTION_BUDGET = 10**6
_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class World:
    latent_dim: int
    obs_dim: int
    mixing: np.ndarray  # (obs_dim, latent_dim), unit columns
    obs_noise: float
    seed: int


@dataclass(frozen=True, eq=False)
class TaskSpec:
    world: World
    teacher: np.ndarray  # (K, latent_dim), unit rows
    teacher_bias: np.ndarray
    num_classes: int
    family_id: int
    seed: int
    head_seed: int | None = None  # linked tasks share the base task's output head

    @property
    def output_seed(self) -> int:
        return self.seed if self.head_seed is None else self.head_seed

    def labels_for(self, latents: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class
        return np.argmax(latents @ self.teacher.T + self.teacher_bias, axis=1)


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    k: int
    split: str
    latents: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index) -> Dataset:
        lat = None if self.latents is None else self.latents[index]
        return Dataset(self.inputs[index], self.labels[index], self.k, self.split, lat)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _unit_cols(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def make_world(m: int, d: int, obs_noise: float, seed: int) -> World:
    if not (d >= m >= 1):
        raise ConfigError(f"need obs_dim >= latent_dim >= 1, got d={d}, m={m}")
    if not obs_noise > 0:
        raise ConfigError("obs_noise must be positive")
    rng = np.random.default_rng([seed, 11])
    q, _ = np.linalg.qr(rng.standard_normal((d, m)))
    return World(m, d, _unit_cols(q), float(obs_noise), seed)


def make_task(
    world: World,
    num_classes: int,
    family_id: int = 0,
    similarity_to: TaskSpec | None = None,
    rho: float = 0.0,
    seed: int = 0,
) -> TaskSpec:
    """Fresh unit-row teacher, or one correlated with ``similarity_to`` at level ``rho``.

    A linked teacher has its rows reordered so class c means the nearest thing to the
    base's class c, and it inherits the base's output head.
    """
    if num_classes < 2:
        raise ConfigError("tasks need at least two classes")
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must lie in [0, 1], got {rho}")
    rng = np.random.default_rng([seed, 13])
    fresh = _unit_rows(rng.standard_normal((num_classes, world.latent_dim)))
    bias = np.zeros(num_classes)
    if similarity_to is not None:
        if similarity_to.num_classes != num_classes:
            raise ConfigError("similar tasks must share the number of classes")
        if rho == 1.0:
            teacher = similarity_to.teacher.copy()
        else:
            teacher = _unit_rows(rho * similarity_to.teacher + np.sqrt(1 - rho**2) * fresh)
            # near-parallel base rows can swap roles under mixing
            _, order = linear_sum_assignment(-(similarity_to.teacher @ teacher.T))
            teacher = teacher[order]
        bias = similarity_to.teacher_bias.copy()
        return TaskSpec(world, teacher, bias, num_classes, family_id, seed, similarity_to.output_seed)
    return TaskSpec(world, fresh, bias, num_classes, family_id, seed)


def ood_world(world: World, shift: float, seed: int) -> World:
    if shift < 0:
        raise ConfigError("shift must be non-negative")
    if shift == 0:
        return World(world.latent_dim, world.obs_dim, world.mixing.copy(), world.obs_noise, world.seed)
    rng = np.random.default_rng([seed, 17])
    delta = _unit_cols(rng.standard_normal(world.mixing.shape))
    return World(
        world.latent_dim, world.obs_dim, _unit_cols(world.mixing + shift * delta), world.obs_noise, world.seed
    )


def make_ood_task(task: TaskSpec, shift: float, seed: int) -> TaskSpec:
    """Same teacher, perturbed mixing ``normalize(A + shift * delta)``."""
    return TaskSpec(
        ood_world(task.world, shift, seed),
        task.teacher,
        task.teacher_bias,
        task.num_classes,
        task.family_id,
        task.seed,
        task.head_seed,
    )


def make_pretrain_task(world: World, seed: int = 0) -> TaskSpec:
    """8 classes = sign pattern of the first three latent coordinates.

    Class index bit j is set when z_j < 0, so the all-positive octant is class 0.
    """
    if world.latent_dim < 3:
        raise ConfigError("pre-training task needs latent_dim >= 3")
    teacher = np.zeros((8, world.latent_dim))
    for c in range(8):
        for j in range(3):
            teacher[c, j] = -1.0 if (c >> j) & 1 else 1.0
    teacher /= np.sqrt(3.0)
    return TaskSpec(world, teacher, np.zeros(8), 8, -1, seed)


def draw(task: TaskSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unconstrained draws: (inputs, labels, latents)."""
    w = task.world
    z = rng.standard_normal((n, w.latent_dim))
    x = z @ w.mixing.T + w.obs_noise * rng.standard_normal((n, w.obs_dim))
    return x, task.labels_for(z), z


def sample_kshot(task: TaskSpec, k: int, split: str = "train", seed: int = 0) -> Dataset:
    """Exactly ``k`` examples per class by rejection sampling, in draw order."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, 101, SPLITS[split]])
    K = task.num_classes
    counts = np.zeros(K, dtype=np.int64)
    keep_x, keep_y, keep_z = [], [], []
    drawn = 0
    while counts.min() < k:
        if drawn >= REJECTION_BUDGET:
            missing = int(np.argmin(counts))
            raise DataError(f"class {missing} unreachable after {REJECTION_BUDGET} draws")
        x, y, z = draw(task, _CHUNK, rng)
        drawn += _CHUNK
        keep = np.zeros(_CHUNK, dtype=bool)
        for c in range(K):
            hit = np.flatnonzero(y == c)[: max(k - counts[c], 0)]
            counts[c] += hit.size
            keep[hit] = True
        keep_x.append(x[keep])
        keep_y.append(y[keep])
        keep_z.append(z[keep])
    return Dataset(np.concatenate(keep_x), np.concatenate(keep_y), k, split, np.concatenate(keep_z))


def task_similarity(a: TaskSpec, b: TaskSpec) -> float:
    """Mean |cos| between matched teacher rows (exact matching for K <= 8)."""
    if a.num_classes != b.num_classes or a.teacher.shape[1] != b.teacher.shape[1]:
        raise ConfigError("tasks must share the number of classes and latent dimension")
    cos = np.abs(a.teacher @ b.teacher.T)
    K = a.num_classes
    if K <= 8:
        r, c = linear_sum_assignment(-cos)
        return float(np.clip(np.sort(cos[r, c]).mean(), 0.0, 1.0))
    total = 0.0
    used_r, used_c = set(), set()
    for flat in np.argsort(-cos, axis=None, kind="stable"):
        i, j = divmod(int(flat), K)
        if i in used_r or j in used_c:
            continue
        used_r.add(i)
        used_c.add(j)
        total += cos[i, j]
    return float(np.clip(total / K, 0.0, 1.0))
