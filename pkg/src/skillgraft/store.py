"""Bit-exact persistence: checkpoints, regions, datasets, task definitions and reports.

Binary layouts (all little-endian):

* checkpoint: ``b"GRFT"``, u32 version, u64 count, count x f64; the segment
  table lives in a JSON sidecar ``<path>.manifest.json``.
* region: ``b"GMSK"``, u32 version, u64 total_params, u64 count, count x u64
  sorted indices.

Every writer goes through a temp file in the target directory followed by an
atomic rename, so readers never observe a half-written file.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import grafting as gr
from . import synthtasks as st
from .errors import DataError, IntegrityError, MagicError, NonFiniteError, StoreError, TruncationError, VersionError
from .nncore import ParameterVector, Segment

CHECKPOINT_MAGIC = b"GRFT"
REGION_MAGIC = b"GMSK"
FORMAT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")
_REGION_HEADER = struct.Struct("<4sIQQ")
MANIFEST_SUFFIX = ".manifest.json"


# -- plumbing ----------------------------------------------------------------


def _prepare_dir(path: Path, make_dirs: bool) -> None:
    parent = path.parent
    if parent.is_dir():
        return
    if not make_dirs:
        raise StoreError(f"output directory {parent} does not exist")
    try:
        parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StoreError(f"cannot create {parent}: {exc}") from exc


def atomic_write(path, data: bytes, make_dirs: bool = True) -> None:
    path = Path(path)
    _prepare_dir(path, make_dirs)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise StoreError(f"cannot write {path}: {exc}") from exc


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise StoreError(f"cannot read {path}: {exc}") from exc


def canonical_json(obj) -> bytes:
    """Sorted keys, fixed indentation, shortest round-trip floats; NaN becomes null."""
    return (json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False, ensure_ascii=False) + "\n").encode()


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return None
        if math.isinf(f):
            raise NonFiniteError("reports cannot hold infinite values")
        return f
    if obj is None or isinstance(obj, str):
        return obj
    raise StoreError(f"cannot serialize {type(obj).__name__}")


def _load_json(path):
    try:
        return json.loads(_read(path).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path} is not valid structured text: {exc}") from exc


# -- checkpoints -------------------------------------------------------------


def manifest_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + MANIFEST_SUFFIX)


def save_checkpoint(params: ParameterVector, path, make_dirs: bool = True) -> None:
    v = params.values
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("refusing to save a checkpoint with non-finite values")
    blob = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, v.size) + v.astype("<f8").tobytes()
    manifest = {
        "format": "GRFT",
        "version": FORMAT_VERSION,
        "count": int(v.size),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "segments": [[s.name, s.offset, s.length, s.kind, s.layer] for s in params.segments],
    }
    # blob first: a manifest never points at a missing or stale blob hash
    atomic_write(path, blob, make_dirs)
    atomic_write(manifest_path(path), canonical_json(manifest), make_dirs)


def _check_header(data: bytes, header: struct.Struct, magic: bytes, what: str) -> tuple:
    if len(data) < 4 or data[:4] != magic:
        if len(data) < 4 and magic.startswith(data):
            raise TruncationError(f"{what} file shorter than its magic")
        raise MagicError(f"not a {what} file (magic {data[:4]!r})")
    if len(data) < header.size:
        raise TruncationError(f"{what} header truncated")
    fields = header.unpack_from(data)
    if fields[1] != FORMAT_VERSION:
        raise VersionError(f"unsupported {what} version {fields[1]}")
    return fields


def _payload(data: bytes, offset: int, count: int, what: str) -> bytes:
    need = offset + 8 * count
    if len(data) < need:
        raise TruncationError(f"{what} truncated: {len(data)} of {need} bytes")
    if len(data) > need:
        raise IntegrityError(f"{what} has {len(data) - need} trailing bytes")
    return data[offset:need]


def load_checkpoint(path) -> ParameterVector:
    data = _read(path)
    _, _, count = _check_header(data, _CKPT_HEADER, CHECKPOINT_MAGIC, "checkpoint")
    values = np.frombuffer(_payload(data, _CKPT_HEADER.size, count, "checkpoint"), dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("checkpoint holds non-finite values")
    mpath = manifest_path(path)
    if not mpath.exists():
        raise IntegrityError(f"checkpoint manifest {mpath} is missing")
    manifest = _load_json(mpath)
    try:
        if manifest["count"] != count:
            raise IntegrityError("manifest count disagrees with the checkpoint")
        if manifest["sha256"] != hashlib.sha256(data).hexdigest():
            raise IntegrityError("checkpoint contents do not match the manifest hash")
        segments = tuple(Segment(str(n), int(o), int(ln), str(k), int(la)) for n, o, ln, k, la in manifest["segments"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"malformed checkpoint manifest: {exc}") from exc
    try:
        return ParameterVector(values, segments)
    except ValueError as exc:
        raise IntegrityError(f"manifest segments do not tile the vector: {exc}") from exc


# -- regions -----------------------------------------------------------------


def save_region(region: gr.GraftRegion, path, make_dirs: bool = True) -> None:
    idx = region.indices
    blob = _REGION_HEADER.pack(REGION_MAGIC, FORMAT_VERSION, region.total_params, idx.size) + idx.astype("<u8").tobytes()
    atomic_write(path, blob, make_dirs)


def load_region(path, provenance: str = "learned") -> gr.GraftRegion:
    data = _read(path)
    _, _, total, count = _check_header(data, _REGION_HEADER, REGION_MAGIC, "region")
    idx = np.frombuffer(_payload(data, _REGION_HEADER.size, count, "region"), dtype="<u8")
    if total > np.iinfo(np.int64).max:
        raise IntegrityError("total_params out of range")
    if idx.size and np.any(idx[1:] <= idx[:-1]):
        raise IntegrityError("region indices are not sorted and unique")
    if idx.size and int(idx[-1]) >= total:
        raise IntegrityError("region index beyond total_params")
    return gr.GraftRegion(idx.astype(np.int64), int(total), provenance)


# -- datasets ----------------------------------------------------------------


def _check_labels(dataset: st.Dataset, task: st.TaskSpec | None) -> None:
    if task is None or dataset.latents is None:
        return
    if not np.array_equal(task.labels_for(dataset.latents), dataset.labels):
        raise DataError("dataset labels disagree with the teacher on the stored latents")


def save_dataset(dataset: st.Dataset, path, task: st.TaskSpec | None = None, make_dirs: bool = True) -> None:
    for name in ("inputs", "latents"):
        arr = getattr(dataset, name)
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"dataset {name} hold non-finite values")
    _check_labels(dataset, task)
    arrays = {
        "inputs": np.asarray(dataset.inputs, dtype="<f8"),
        "labels": np.asarray(dataset.labels, dtype="<i8"),
        "meta": np.frombuffer(canonical_json({"k": dataset.k, "split": dataset.split}), dtype=np.uint8),
    }
    if dataset.latents is not None:
        arrays["latents"] = np.asarray(dataset.latents, dtype="<f8")
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write(path, buf.getvalue(), make_dirs)


def load_dataset(path, task: st.TaskSpec | None = None) -> st.Dataset:
    try:
        with np.load(io.BytesIO(_read(path)), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (ValueError, OSError, EOFError) as exc:
        raise IntegrityError(f"{path} is not a dataset archive: {exc}") from exc
    try:
        meta = json.loads(arrays["meta"].tobytes().decode())
        x, y = arrays["inputs"].astype(np.float64), arrays["labels"].astype(np.int64)
    except (KeyError, ValueError) as exc:
        raise IntegrityError(f"malformed dataset archive: {exc}") from exc
    lat = arrays["latents"].astype(np.float64) if "latents" in arrays else None
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0] or (lat is not None and lat.shape[0] != y.shape[0]):
        raise IntegrityError("dataset arrays have inconsistent shapes")
    if not np.all(np.isfinite(x)) or (lat is not None and not np.all(np.isfinite(lat))):
        raise NonFiniteError("dataset holds non-finite values")
    ds = st.Dataset(x, y, int(meta["k"]), str(meta["split"]), lat)
    _check_labels(ds, task)
    return ds


# -- worlds and tasks --------------------------------------------------------


def world_to_dict(world: st.World) -> dict:
    return {
        "latent_dim": world.latent_dim,
        "obs_dim": world.obs_dim,
        "mixing": world.mixing,
        "obs_noise": world.obs_noise,
        "seed": world.seed,
    }


def world_from_dict(d: dict) -> st.World:
    mixing = np.array(d["mixing"], dtype=np.float64)
    return st.World(int(d["latent_dim"]), int(d["obs_dim"]), mixing, float(d["obs_noise"]), int(d["seed"]))


def task_to_dict(task: st.TaskSpec) -> dict:
    return {
        "world": world_to_dict(task.world),
        "teacher": task.teacher,
        "teacher_bias": task.teacher_bias,
        "num_classes": task.num_classes,
        "family_id": task.family_id,
        "seed": task.seed,
        "head_seed": task.head_seed,
    }


def task_from_dict(d: dict) -> st.TaskSpec:
    teacher = np.array(d["teacher"], dtype=np.float64).reshape(int(d["num_classes"]), -1)
    return st.TaskSpec(
        world_from_dict(d["world"]),
        teacher,
        np.array(d["teacher_bias"], dtype=np.float64),
        int(d["num_classes"]),
        int(d["family_id"]),
        int(d["seed"]),
        None if d.get("head_seed") is None else int(d["head_seed"]),
    )


def save_task(task: st.TaskSpec, path, make_dirs: bool = True) -> None:
    atomic_write(path, canonical_json(task_to_dict(task)), make_dirs)


def load_task(path) -> st.TaskSpec:
    try:
        return task_from_dict(_load_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"malformed task file: {exc}") from exc


# -- reports and curves ------------------------------------------------------


def write_report(report: dict, path, curves: dict | None = None, make_dirs: bool = True) -> None:
    """Canonical report plus one ``<stem>.<name>.csv`` per curve ``(header, rows)``."""
    path = Path(path)
    atomic_write(path, canonical_json(report), make_dirs)
    for name, (header, rows) in sorted((curves or {}).items()):
        write_csv(path.with_name(f"{path.stem}.{name}.csv"), header, rows, make_dirs)


def read_report(path) -> dict:
    return _load_json(path)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([str(h) for h in header])
    for r in rows:
        if len(r) != len(header):
            raise StoreError("csv row length differs from the header")
        w.writerow([_cell(v) for v in r])
    return buf.getvalue().encode()


def write_csv(path, header, rows, make_dirs: bool = True) -> None:
    atomic_write(path, csv_bytes(header, rows), make_dirs)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    reader = csv.reader(io.StringIO(_read(path).decode()))
    rows = list(reader)
    if not rows:
        raise IntegrityError("csv file has no header")
    return rows[0], rows[1:]
