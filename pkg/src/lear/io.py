"""On-disk formats: IDX digits, raw float32 volumes with JSON sidecars, checkpoints."""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CHECKPOINT_FORMAT = 1

PathLike = Union[str, Path]


class DataError(ValueError):
    """Malformed or missing input data."""


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: PathLike) -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes (images or labels)."""
    path = Path(path)
    with _open(path) as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise DataError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">I", header)
        if magic == IDX_IMAGES_MAGIC:
            n, rows, cols = struct.unpack(">III", fh.read(12))
            shape = (n, rows, cols)
        elif magic == IDX_LABELS_MAGIC:
            (n,) = struct.unpack(">I", fh.read(4))
            shape = (n,)
        else:
            raise DataError(f"{path}: bad IDX magic 0x{magic:08x}")
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != int(np.prod(shape)):
        raise DataError(f"{path}: expected {int(np.prod(shape))} bytes of payload, got {data.size}")
    return data.reshape(shape)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise DataError(f"{directory}: missing IDX file {stem}")


def ingest_mnist(directory: PathLike, split: str = "train"):
    """Load a publisher split as ``(X, y)``: ``X`` is (N, 28, 28, 1) in [0, 1], ``y`` integer labels."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"data directory not found: {directory}")
    prefix = {"train": "train", "test": "t10k"}[split]
    images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"))
    if images.ndim != 3 or labels.ndim != 1:
        raise DataError(f"{directory}: image/label IDX files swapped or malformed")
    if len(images) != len(labels):
        raise DataError(f"{directory}: {len(images)} images but {len(labels)} labels")
    X = images.astype(np.float32)
    lo, hi = X.min(), X.max()
    X = (X - lo) / (hi - lo) if hi > lo else np.zeros_like(X)
    return X[..., None], labels.astype(np.int64)


def write_idx_images(path: PathLike, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


# -- raw float32 + JSON sidecar ---------------------------------------------


def save_raw(path: PathLike, array: np.ndarray, **meta) -> Path:
    """Write ``array`` as little-endian float32 to ``path`` (.raw) plus ``path.json``."""
    path = Path(path)
    if path.suffix != ".raw":
        path = path.with_suffix(".raw")
    array = np.ascontiguousarray(array, dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(array.tobytes())
    sidecar = {"shape": list(array.shape), "dtype": "float32", **_jsonable(meta)}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_raw(path: PathLike):
    """Inverse of :func:`save_raw`; returns ``(array, sidecar dict)``."""
    path = Path(path)
    if path.suffix != ".raw":
        path = path.with_suffix(".raw")
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
    except FileNotFoundError:
        raise DataError(f"missing sidecar for {path}") from None
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise DataError(f"{path}: sidecar shape {shape} does not match payload of {data.size} floats")
    return data.reshape(shape).astype(np.float32), meta


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if hasattr(obj, "probs"):
        return obj.probs.tolist()
    return obj


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(stem: PathLike, module: torch.nn.Module, *, architecture_id: str, input_shape,
                    class_count: int, seed: int, metrics: Optional[dict] = None, extra: Optional[dict] = None) -> Path:
    """Write ``stem.blob`` (torch state dict) and ``stem.manifest.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(module.state_dict(), buf)
    blob = buf.getvalue()
    stem.with_suffix(".blob").write_bytes(blob)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "architecture_id": architecture_id,
        "input_shape": list(input_shape),
        "class_count": int(class_count),
        "seed": int(seed),
        "metrics": _jsonable(metrics or {}),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        manifest.update(_jsonable(extra))
    manifest_path = stem.parent / (stem.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_checkpoint(stem: PathLike):
    """Return ``(state_dict, manifest)`` for a checkpoint written by :func:`save_checkpoint`."""
    stem = Path(stem)
    manifest_path = stem.parent / (stem.name + ".manifest.json")
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise DataError(f"{manifest_path}: unsupported checkpoint format {manifest.get('format_version')}")
    blob = stem.with_suffix(".blob").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise DataError(f"{stem}.blob: checksum mismatch")
    state = torch.load(io.BytesIO(blob), weights_only=True)
    return state, manifest


def checkpoint_exists(stem: PathLike) -> bool:
    stem = Path(stem)
    return (stem.parent / (stem.name + ".manifest.json")).exists() and stem.with_suffix(".blob").exists()


def fingerprint(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]
