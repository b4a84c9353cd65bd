"""Synthetic volumetric phantoms with analytically known class differences.

Every subject shares a smooth "anatomy" template. Class membership adds
intensity changes inside two ellipsoidal sites whose magnitude grows
monotonically with the class index; one site darkens and the other
brightens. Per-subject jitter of the site centers plus a smooth intensity
field and white noise make samples distinct, and the noise-free difference
of two class renderings is the exact ground-truth map.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .io import load_raw, save_raw


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Lesion:
    center: Tuple[float, float, float]  # fractional coordinates in [0, 1]
    radii: Tuple[float, float, float]   # voxels
    deltas: Tuple[float, ...]           # intensity change per class index


def _default_lesions(num_classes: int) -> tuple:
    steps = np.linspace(0.0, 1.0, num_classes)
    return (
        Lesion((0.35, 0.40, 0.50), (3.0, 3.5, 3.0), tuple(float(-0.35 * s) for s in steps)),
        Lesion((0.65, 0.60, 0.50), (3.0, 3.5, 3.0), tuple(float(0.35 * s) for s in steps)),
    )


@dataclass(frozen=True)
class PhantomSpec:
    shape: Tuple[int, int, int, int] = (32, 38, 32, 1)
    num_classes: int = 3
    lesions: Optional[tuple] = None
    jitter: float = 3.0          # max per-subject shift of each site, voxels
    deformation: float = 1.0     # peak smooth displacement of the anatomy, voxels
    field_std: float = 0.03      # amplitude of the smooth per-subject intensity field
    noise_std: float = 0.02
    samples_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lesions is None:
            object.__setattr__(self, "lesions", _default_lesions(self.num_classes))
        object.__setattr__(self, "lesions", tuple(
            lz if isinstance(lz, Lesion) else Lesion(**lz) for lz in self.lesions))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        self.validate()

    def validate(self):
        if len(self.shape) != 4 or self.shape[-1] != 1 or min(self.shape) < 1:
            raise PhantomSpecError(f"shape must be W x H x D x 1, got {self.shape}")
        if self.num_classes < 2:
            raise PhantomSpecError("need at least two classes")
        if min(self.noise_std, self.field_std, self.jitter, self.deformation) < 0:
            raise PhantomSpecError("noise, field, jitter and deformation magnitudes must be >= 0")
        spatial = np.array(self.shape[:3], dtype=float)
        for lz in self.lesions:
            if len(lz.deltas) != self.num_classes:
                raise PhantomSpecError(f"lesion needs {self.num_classes} deltas, got {len(lz.deltas)}")
            d = np.diff(lz.deltas)
            if not (np.all(d > 0) or np.all(d < 0)):
                raise PhantomSpecError(f"lesion deltas must be strictly monotone in class index: {lz.deltas}")
            c = np.asarray(lz.center) * (spatial - 1)
            r = np.asarray(lz.radii) + self.jitter
            if np.any(c - r < 0) or np.any(c + r > spatial - 1):
                raise PhantomSpecError(f"lesion at {lz.center} with radii {lz.radii} (+jitter) leaves the volume")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesions"] = [asdict(lz) for lz in self.lesions]
        return d


def _grid(shape):
    return np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")


def template(shape) -> np.ndarray:
    """Smooth noise-free anatomy: a bright ellipsoidal body with a dark core."""
    w, h, d = shape
    gx, gy, gz = _grid((w, h, d))
    c = (np.array([w, h, d]) - 1) / 2
    body = ((gx - c[0]) / (0.45 * w)) ** 2 + ((gy - c[1]) / (0.45 * h)) ** 2 + ((gz - c[2]) / (0.45 * d)) ** 2
    core = ((gx - c[0]) / (0.12 * w)) ** 2 + ((gy - c[1]) / (0.18 * h)) ** 2 + ((gz - c[2]) / (0.12 * d)) ** 2
    vol = 0.6 * (body <= 1.0) - 0.3 * (core <= 1.0)
    return gaussian_filter(vol.astype(np.float64), 1.0)


def _soft_ellipsoid(shape, center_vox, radii) -> np.ndarray:
    gx, gy, gz = _grid(shape)
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip((gx, gy, gz), center_vox, radii))
    return np.clip(1.5 - r2 ** 0.5, 0.0, 1.0) * (r2 <= 2.25)


@dataclass
class Subject:
    subject_id: str
    offsets: np.ndarray        # (n_lesions, 3) voxel shifts
    field_seed: int
    noise_seed: int


def deform(volume: np.ndarray, amplitude: float, seed: int) -> np.ndarray:
    """Warp ``volume`` by a smooth random displacement whose peak is ``amplitude`` voxels."""
    if amplitude == 0:
        return volume
    rng = np.random.default_rng(seed)
    grid = np.stack(_grid(volume.shape))
    disp = np.stack([gaussian_filter(rng.standard_normal(volume.shape), 5.0) for _ in range(3)])
    disp *= amplitude / (np.abs(disp).max() + 1e-12)
    return map_coordinates(volume, grid + disp, order=1, mode="nearest")


def lesion_field(spec: PhantomSpec, subject: Subject, class_index: int) -> np.ndarray:
    shape = spec.shape[:3]
    spatial = np.array(shape, dtype=float) - 1
    out = np.zeros(shape)
    for lz, off in zip(spec.lesions, subject.offsets):
        center = np.asarray(lz.center) * spatial + off
        out += lz.deltas[class_index] * _soft_ellipsoid(shape, center, lz.radii)
    return out


def render(spec: PhantomSpec, subject: Subject, class_index: int, base: Optional[np.ndarray] = None) -> np.ndarray:
    """One channel-last volume of ``subject`` rendered as class ``class_index``."""
    shape = spec.shape[:3]
    base = template(shape) if base is None else base
    vol = deform(base, spec.deformation, subject.field_seed + 1) + lesion_field(spec, subject, class_index)
    if spec.field_std:
        white = np.random.default_rng(subject.field_seed).standard_normal(shape)
        smooth = gaussian_filter(white, 4.0)
        vol += spec.field_std * smooth / (smooth.std() + 1e-12)
    if spec.noise_std:
        vol += spec.noise_std * np.random.default_rng(subject.noise_seed).standard_normal(shape)
    return vol[..., None].astype(np.float32)


def make_subjects(spec: PhantomSpec, n: int, seed: int, prefix: str = "s") -> List[Subject]:
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(n):
        offsets = rng.uniform(-spec.jitter, spec.jitter, size=(len(spec.lesions), 3))
        subjects.append(Subject(f"{prefix}{i:04d}", offsets, int(rng.integers(2 ** 31)), int(rng.integers(2 ** 31))))
    return subjects


@dataclass
class PhantomDataset:
    X: np.ndarray
    y: np.ndarray
    subjects: List[Subject]
    spec: PhantomSpec
    extra: dict = field(default_factory=dict)

    def ground_truth(self, i: int, a: int, b: int) -> np.ndarray:
        """Exact noise-free map lesion(a) - lesion(b) for sample ``i``'s subject (channel-last)."""
        s = self.subjects[i]
        return (lesion_field(self.spec, s, a) - lesion_field(self.spec, s, b))[..., None].astype(np.float32)


def generate_phantom(spec: PhantomSpec) -> PhantomDataset:
    """``samples_per_class`` independent subjects per class, shuffled by seed."""
    n = spec.samples_per_class * spec.num_classes
    subjects = make_subjects(spec, n, spec.seed)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    order = np.random.default_rng([spec.seed, 1]).permutation(n)
    labels, subjects = labels[order], [subjects[i] for i in order]
    base = template(spec.shape[:3])
    X = np.stack([render(spec, s, int(k), base) for s, k in zip(subjects, labels)])
    return PhantomDataset(X, labels.astype(np.int64), subjects, spec)


def longitudinal(spec: PhantomSpec, n_subjects: int, seed: int) -> PhantomDataset:
    """Subjects rendered in every class with shared deformation and noise.

    ``X`` has shape ``(n_subjects, num_classes, *spec.shape)``; differences
    between two renderings of one subject equal the exact lesion difference.
    """
    subjects = make_subjects(spec, n_subjects, seed, prefix="long")
    base = template(spec.shape[:3])
    X = np.stack([np.stack([render(spec, s, k, base) for k in range(spec.num_classes)]) for s in subjects])
    return PhantomDataset(X, np.arange(spec.num_classes), subjects, spec)


def save_dataset(directory, data: PhantomDataset) -> Path:
    """Write every volume as raw float32 + JSON sidecar plus an index file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (x, k, s) in enumerate(zip(data.X, data.y, data.subjects)):
        name = f"{s.subject_id}.raw"
        save_raw(directory / name, x, **{"class": int(k), "sample_id": s.subject_id, "seed": data.spec.seed})
        entries.append({"file": name, "class": int(k), "sample_id": s.subject_id})
    (directory / "index.json").write_text(json.dumps({
        "format": "phantom", "spec": data.spec.to_dict(), "samples": entries}, indent=2))
    return directory


def load_dataset(directory):
    """Load volumes listed in ``index.json`` (or every ``*.raw``) as ``(X, y, ids)``."""
    directory = Path(directory)
    index = directory / "index.json"
    if index.exists():
        files = [directory / e["file"] for e in json.loads(index.read_text())["samples"]]
    else:
        files = sorted(directory.glob("*.raw"))
    xs, ys, ids = [], [], []
    for f in files:
        x, meta = load_raw(f)
        xs.append(x)
        ys.append(int(meta["class"]))
        ids.append(meta.get("sample_id", f.stem))
    return np.stack(xs), np.asarray(ys, dtype=np.int64), ids
