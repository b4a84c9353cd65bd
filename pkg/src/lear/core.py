"""Shared domain types: target conditions, hyperparameters and input checks."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

PLANAR2D = "planar2d"
VOLUMETRIC3D = "volumetric3d"
DOMAINS = (PLANAR2D, VOLUMETRIC3D)

_SUM_TOL = 1e-6


class ShapeError(ValueError):
    """Raised when an array does not have the layout an operation expects."""


class ConfigError(ValueError):
    """Raised for invalid or unknown hyperparameter configuration."""


@dataclass(frozen=True, eq=False)
class TargetCondition:
    """Probability vector over the class space.

    Holds one-hot targets, classifier posteriors and interpolated conditions
    alike. The stored array is read-only.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64, copy=True).reshape(-1)
        if p.size == 0:
            raise ValueError("target condition must be non-empty")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError(f"target condition entries must be finite and >= 0, got {p}")
        if abs(p.sum() - 1.0) > _SUM_TOL:
            raise ValueError(f"target condition must sum to 1, got sum {p.sum():.8f}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return self.probs.size

    def __array__(self, dtype=None, copy=None):
        return self.probs if dtype is None else self.probs.astype(dtype)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TargetCondition):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __repr__(self) -> str:
        return f"TargetCondition({np.round(self.probs, 4).tolist()})"

    @property
    def num_classes(self) -> int:
        return self.probs.size

    @property
    def is_one_hot(self) -> bool:
        return int(np.sum(self.probs == 1.0)) == 1 and int(np.count_nonzero(self.probs)) == 1

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


def as_condition(t: Union[TargetCondition, Sequence[float], np.ndarray]) -> TargetCondition:
    return t if isinstance(t, TargetCondition) else TargetCondition(np.asarray(t))


def one_hot(class_index: int, num_classes: int) -> TargetCondition:
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if not 0 <= class_index < num_classes:
        raise ValueError(f"class_index {class_index} out of range for {num_classes} classes")
    v = np.zeros(num_classes)
    v[class_index] = 1.0
    return TargetCondition(v)


def interpolate_condition(a, b, alpha: float) -> TargetCondition:
    """Linear blend ``(1 - alpha) * a + alpha * b`` of two conditions.

    The endpoints are returned unchanged so ``alpha=0`` gives ``a`` and
    ``alpha=1`` gives ``b`` bit for bit.
    """
    a, b = as_condition(a), as_condition(b)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if len(a) != len(b):
        raise ValueError(f"conditions differ in length: {len(a)} vs {len(b)}")
    if alpha == 0.0:
        return a
    if alpha == 1.0:
        return b
    mixed = (1.0 - alpha) * a.probs + alpha * b.probs
    return TargetCondition(mixed / mixed.sum())


def sample_uniform_target(num_classes: int, rng: np.random.Generator) -> TargetCondition:
    """Draw a one-hot target uniformly over all classes (the true label included)."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes to sample a target, got {num_classes}")
    return one_hot(int(rng.integers(num_classes)), num_classes)


def sample_uniform_targets(num_classes: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Batched :func:`sample_uniform_target`, returned as an ``(n, num_classes)`` array."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes to sample a target, got {num_classes}")
    idx = rng.integers(num_classes, size=n)
    return np.eye(num_classes)[idx]


def parse_target(spec: str, num_classes: int) -> TargetCondition:
    """Parse a CLI target: ``"8"``, ``"0.3,0.7,0"`` or ``"a:b:alpha"``."""
    spec = spec.strip()
    try:
        if ":" in spec:
            a, b, alpha = spec.split(":")
            return interpolate_condition(
                one_hot(int(a), num_classes), one_hot(int(b), num_classes), float(alpha)
            )
        if "," in spec:
            probs = np.array([float(v) for v in spec.split(",")])
            if probs.size != num_classes:
                raise ValueError(f"expected {num_classes} probabilities, got {probs.size}")
            return TargetCondition(probs)
        return one_hot(int(spec), num_classes)
    except ValueError as exc:
        raise ValueError(f"malformed target spec {spec!r}: {exc}") from None


# -- hyperparameters ---------------------------------------------------------


@dataclass(frozen=True)
class HyperParams:
    """Loss weights and optimizer settings for every training phase.

    ``epochs``/``batch_size``/``decay`` drive backbone pre-training; the
    ``cmg_*`` and ``xga_*`` fields drive Phase 1 and Phase 2. ``max_steps_*``
    caps a phase at a number of optimizer steps (0 means no cap) for reduced
    desk-scale budgets. ``bn_recalibrate`` re-estimates the backbone's
    batch-norm statistics over the training set once training ends.
    """

    lambda1: float = 1.0
    lambda2: float = 0.0
    lambda3: float = 10.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    lambda6: float = 1.0
    lambda7: float = 0.0
    lambda8: float = 0.1
    r: int = 4
    lr_cls: float = 5e-4
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    lr_xga: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    label_smoothing: float = 0.1
    epochs: int = 50
    batch_size: int = 128
    decay: float = 0.98
    cmg_epochs: int = 100
    cmg_batch_size: int = 128
    cmg_decay: float = 0.98
    xga_epochs: int = 150
    xga_batch_size: int = 12
    xga_decay: float = 0.98
    max_steps_backbone: int = 0
    max_steps_cmg: int = 0
    max_steps_xga: int = 0
    warm_start: bool = True
    guidance_classes: Optional[tuple] = None
    generator_norm: str = "affine"
    bn_recalibrate: bool = True
    seed: int = 0

    def __post_init__(self):
        for i in range(1, 9):
            if getattr(self, f"lambda{i}") < 0:
                raise ConfigError(f"lambda{i} must be >= 0")
        if self.r < 1:
            raise ConfigError("r must be a positive integer")
        for name in ("lr_cls", "lr_g", "lr_d", "lr_xga"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        for name in ("epochs", "batch_size", "cmg_epochs", "cmg_batch_size", "xga_epochs", "xga_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("decay", "cmg_decay", "xga_decay"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if self.generator_norm not in ("batch", "affine"):
            raise ConfigError(f"generator_norm must be 'batch' or 'affine', got {self.generator_norm!r}")
        if self.guidance_classes is not None:
            object.__setattr__(self, "guidance_classes", tuple(int(c) for c in self.guidance_classes))
            if len(self.guidance_classes) != 2:
                raise ConfigError("guidance_classes must name exactly two classes")

    @classmethod
    def profile(cls, name: str, **overrides) -> "HyperParams":
        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        return cls(**{**PROFILES[name], **overrides})

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["guidance_classes"] is not None:
            d["guidance_classes"] = list(d["guidance_classes"])
        return d

    @classmethod
    def from_dict(cls, d: dict, profile: Optional[str] = None) -> "HyperParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown hyperparameter keys: {unknown}")
        base = PROFILES[profile] if profile else {}
        return cls(**{**base, **d})

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path: Union[str, Path], profile: Optional[str] = None) -> "HyperParams":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(d, profile=profile)


PROFILES = {
    PLANAR2D: dict(
        lambda1=1.0, lambda2=0.0, lambda3=10.0, lambda4=1.0, lambda5=1.0, lambda6=1.0,
        lambda7=0.0, lambda8=0.1, r=4, label_smoothing=0.1,
        lr_cls=5e-4, epochs=50, batch_size=128, decay=0.98,
        lr_g=1e-3, lr_d=1e-3, cmg_epochs=100, cmg_batch_size=128, cmg_decay=0.98,
        lr_xga=1e-4, xga_epochs=150, xga_batch_size=12, xga_decay=0.98,
    ),
    VOLUMETRIC3D: dict(
        lambda1=10.0, lambda2=10.0, lambda3=10.0, lambda4=5.0, lambda5=1.0, lambda6=1.0,
        lambda7=5e-6, lambda8=0.1, r=4, label_smoothing=0.0,
        lr_cls=1e-4, epochs=150, batch_size=12, decay=0.98,
        lr_g=1e-2, lr_d=1e-2, cmg_epochs=100, cmg_batch_size=3, cmg_decay=1.0,
        lr_xga=1e-4, xga_epochs=150, xga_batch_size=12, xga_decay=0.98,
    ),
}

# Reduced-budget planar setting: the map penalty acts as a per-pixel mean
# instead of a sum, adversarial and cycle weights are lower and the
# classification weight higher, so a few hundred generator steps suffice.
PLANAR2D_DESK = "planar2d-desk"
PROFILES[PLANAR2D_DESK] = dict(PROFILES[PLANAR2D], lambda1=1 / 784, lambda3=1.0, lambda5=0.2, lambda6=10.0,
                               cmg_batch_size=32)

# Reduced-budget volumetric setting sized for 32x38x32 phantom volumes
# (38912 voxels): strong map sparsity, cycle weight scaled by voxel count.
VOLUMETRIC3D_DESK = "volumetric3d-desk"
PROFILES[VOLUMETRIC3D_DESK] = dict(PROFILES[VOLUMETRIC3D], lambda1=64 / 38912, lambda2=0.0, lambda3=1.0,
                                   lambda5=0.2 * 784 / 38912, lambda6=10.0, lr_cls=3e-4, epochs=20,
                                   lr_g=1e-3, lr_d=1e-3, cmg_batch_size=8, max_steps_cmg=450)


# -- input validation ---------------------------------------------------------


def domain_of(image_shape: Sequence[int]) -> str:
    """Domain tag for a single channel-last image shape."""
    if len(image_shape) == 3:
        return PLANAR2D
    if len(image_shape) == 4:
        return VOLUMETRIC3D
    raise ShapeError(f"image must be HxWxC or WxHxDxC, got shape {tuple(image_shape)}")


def check_images(X, domain: Optional[str] = None, dtype=np.float32) -> np.ndarray:
    """Validate a batch of channel-last images and return it as a float array.

    A single image (rank 3 planar or rank 4 volumetric) is promoted to a
    batch of one when ``domain`` disambiguates the rank.
    """
    X = np.asarray(X, dtype=dtype)
    spatial = {PLANAR2D: 2, VOLUMETRIC3D: 3}
    if domain is not None:
        if domain not in spatial:
            raise ValueError(f"unknown domain {domain!r}")
        if X.ndim == spatial[domain] + 1:
            X = X[None]
        if X.ndim != spatial[domain] + 2:
            raise ShapeError(f"{domain} batch must have rank {spatial[domain] + 2}, got shape {X.shape}")
    elif X.ndim not in (4, 5):
        raise ShapeError(f"expected a batch of channel-last images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


def check_labels(y, num_classes: Optional[int] = None) -> np.ndarray:
    """Accept integer labels or one-hot rows; return integer labels."""
    y = np.asarray(y)
    if y.ndim == 2:
        if not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
            raise ValueError("2-D labels must be one-hot rows")
        y = y.argmax(axis=1)
    if y.ndim != 1:
        raise ShapeError(f"labels must be 1-D class indices, got shape {y.shape}")
    y = y.astype(np.int64)
    if num_classes is not None and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    return y


def check_conditions(t, n: int, num_classes: int) -> np.ndarray:
    """Broadcast one condition or a stack of conditions to an ``(n, num_classes)`` array."""
    if isinstance(t, TargetCondition):
        t = t.probs
    elif isinstance(t, (list, tuple)) and t and isinstance(t[0], TargetCondition):
        t = np.stack([c.probs for c in t])
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = one_hot(int(t), num_classes).probs
    if t.ndim == 1:
        t = np.broadcast_to(t, (n, t.size))
    if t.shape != (n, num_classes):
        raise ValueError(f"target conditions must have shape ({n}, {num_classes}), got {t.shape}")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > _SUM_TOL):
        raise ValueError("each target condition must be nonnegative and sum to 1")
    return np.ascontiguousarray(t)


def iter_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterable[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


__all__ = [
    "PLANAR2D", "VOLUMETRIC3D", "DOMAINS", "ShapeError", "ConfigError", "TargetCondition",
    "as_condition", "one_hot", "interpolate_condition", "sample_uniform_target",
    "sample_uniform_targets", "parse_target", "HyperParams", "PROFILES", "domain_of",
    "check_images", "check_labels", "check_conditions", "iter_batches",
]
