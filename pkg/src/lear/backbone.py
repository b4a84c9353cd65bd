"""Diagnostic classifiers whose encoders feed the counterfactual generator.

Two reference architectures are provided: a planar CNN for 28x28 digits and
a volumetric VGG-style stack for 3-D scans. Both expose the per-block feature
maps the generator taps for its skip connections.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .core import PLANAR2D, VOLUMETRIC3D, HyperParams, ShapeError, TargetCondition, check_images, check_labels
from .layers import ConvBlock, SamePool, param_checksum, resize, to_channels_first

logger = logging.getLogger(__name__)


class UnsupportedOperationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    tap: Optional[str] = None


@dataclass(frozen=True)
class PoolSpec:
    kernel: int
    stride: int


@dataclass(frozen=True)
class BackboneSpec:
    """Layer list, head type and skip taps of a diagnostic model."""

    architecture_id: str
    domain: str
    input_shape: tuple
    num_classes: int
    layers: tuple
    head: str  # "flatten_fc2" or "gap_fc"
    bottleneck: str
    hidden: int = 128
    dropout: tuple = (0.5, 0.25)
    taps: tuple = field(default=())

    @property
    def dims(self) -> int:
        return 2 if self.domain == PLANAR2D else 3

    @property
    def conv_layers(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, ConvSpec)]


def planar_spec(num_classes: int = 10, input_shape=(28, 28, 1), widths=(32, 64, 128, 256)) -> BackboneSpec:
    layers = []
    for i, w in enumerate(widths, start=1):
        layers.append(ConvSpec(w, 3, 1))
        layers.append(ConvSpec(w, 4, 2, tap=f"enc{i}"))
    taps = tuple(f"enc{i}" for i in range(1, len(widths) + 1))
    return BackboneSpec(
        architecture_id="planar-cnn" if tuple(widths) == (32, 64, 128, 256) else f"planar-cnn-{'-'.join(map(str, widths))}",
        domain=PLANAR2D, input_shape=tuple(input_shape), num_classes=num_classes,
        layers=tuple(layers), head="flatten_fc2", bottleneck=taps[-1], taps=taps,
    )


def volumetric_spec(num_classes: int = 3, input_shape=(96, 114, 96, 1), width: float = 1.0) -> BackboneSpec:
    def w(c):
        return max(int(round(c * width)), 1)

    layers = (
        ConvSpec(w(64), 7, 2, tap="enc1"),
        PoolSpec(3, 2),
        ConvSpec(w(64), 3), ConvSpec(w(64), 3, tap="enc2"),
        PoolSpec(2, 2),
        ConvSpec(w(128), 3), ConvSpec(w(128), 3, tap="enc3"),
        PoolSpec(2, 2),
        ConvSpec(w(256), 3), ConvSpec(w(256), 3, tap="enc4"),
        PoolSpec(2, 2),
        ConvSpec(w(512), 3), ConvSpec(w(512), 3, tap="bottleneck"),
    )
    arch = "volumetric-vgg" if width == 1.0 else f"volumetric-vgg-w{width:g}"
    return BackboneSpec(
        architecture_id=arch, domain=VOLUMETRIC3D, input_shape=tuple(input_shape),
        num_classes=num_classes, layers=layers, head="gap_fc", bottleneck="bottleneck",
        taps=("enc1", "enc2", "enc3", "enc4", "bottleneck"),
    )


def tiny_spec(num_classes: int = 2, input_shape=(4, 4, 1)) -> BackboneSpec:
    """Two conv blocks; used for gradient checks."""
    layers = (ConvSpec(3, 3, 1, tap="enc1"), ConvSpec(4, 3, 2, tap="enc2"))
    return BackboneSpec(
        architecture_id="tiny", domain=PLANAR2D if len(input_shape) == 3 else VOLUMETRIC3D,
        input_shape=tuple(input_shape), num_classes=num_classes, layers=layers,
        head="gap_fc", bottleneck="enc2", taps=("enc1", "enc2"),
    )


class DiagnosticModel(nn.Module):
    """Encoder plus classification head operating on channel-first tensors."""

    def __init__(self, spec: BackboneSpec, bn: bool = True):
        super().__init__()
        self.spec = spec
        dims = spec.dims
        in_ch = spec.input_shape[-1]
        self.blocks = nn.ModuleList()
        self._plan = []  # ("conv", block_index, tap) / ("pool", module)
        self.pools = nn.ModuleList()
        for layer in spec.layers:
            if isinstance(layer, ConvSpec):
                self.blocks.append(ConvBlock(dims, in_ch, layer.out_channels, layer.kernel, layer.stride, bn=bn))
                self._plan.append(("conv", len(self.blocks) - 1, layer.tap))
                in_ch = layer.out_channels
            else:
                self.pools.append(SamePool(dims, layer.kernel, layer.stride))
                self._plan.append(("pool", len(self.pools) - 1, None))
        self.feature_channels = in_ch
        self.block_channels = [b.out_channels for b in self.blocks]
        self.final_spatial = self._trace_spatial(spec.input_shape[:-1])
        if spec.head == "flatten_fc2":
            flat = in_ch * int(np.prod(self.final_spatial))
            self.head = nn.Sequential(
                nn.Flatten(),
                nn.Dropout(spec.dropout[0]),
                nn.Linear(flat, spec.hidden),
                nn.ReLU(),
                nn.Dropout(spec.dropout[1]),
                nn.Linear(spec.hidden, spec.num_classes),
            )
        elif spec.head == "gap_fc":
            self.head = nn.Sequential(
                nn.Flatten(start_dim=2),
                _Mean(dim=2),
                nn.Linear(in_ch, spec.num_classes),
            )
        else:
            raise ValueError(f"unknown head {spec.head!r}")

    def _trace_spatial(self, size):
        import math

        size = list(size)
        for layer in self.spec.layers:
            size = [math.ceil(s / layer.stride) for s in size]
        return tuple(size)

    def tap_shapes(self) -> "OrderedDict[str, tuple]":
        """Spatial shape and channels of every tapped layer."""
        import math

        size = list(self.spec.input_shape[:-1])
        out = OrderedDict()
        for layer in self.spec.layers:
            size = [math.ceil(s / layer.stride) for s in size]
            if isinstance(layer, ConvSpec) and layer.tap:
                out[layer.tap] = (tuple(size), layer.out_channels)
        return out

    def encode(self, x: torch.Tensor, attention: Optional[nn.ModuleList] = None, record=None):
        """Run the encoder; returns (tapped feature maps, final feature map).

        ``attention`` holds one module per conv block applied to that block's
        output. ``record`` (a list) collects every attention module's mask.
        """
        taps = OrderedDict()
        h = x
        for kind, idx, tap in self._plan:
            if kind == "pool":
                h = self.pools[idx](h)
                continue
            h = self.blocks[idx](h)
            if attention is not None:
                h = attention[idx](h, record)
            if tap:
                taps[tap] = h
        return taps, h

    def forward_features(self, x: torch.Tensor):
        taps, h = self.encode(x)
        return taps, self.head(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encode(x)[1])

    def class_weights(self) -> torch.Tensor:
        if self.spec.head != "gap_fc":
            raise UnsupportedOperationError(
                f"CAM needs a global-average-pool + linear head; {self.spec.architecture_id} has {self.spec.head}"
            )
        return self.head[-1].weight

    def freeze(self) -> "DiagnosticModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


class _Mean(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim

    def forward(self, x):
        return x.mean(dim=self.dim)


def build_model(spec: BackboneSpec, seed: Optional[int] = None) -> DiagnosticModel:
    if seed is not None:
        torch.manual_seed(seed)
    return DiagnosticModel(spec)


def _check_input(model, x: torch.Tensor):
    expected = (model.spec.input_shape[-1], *model.spec.input_shape[:-1])
    if tuple(x.shape[1:]) != expected:
        raise ShapeError(f"model expects channel-first input {expected}, got {tuple(x.shape[1:])}")


def forward_features(model: nn.Module, x):
    """Feature pyramid and class posteriors for channel-last input ``x``.

    Returns ``(pyramid, probs)`` where ``pyramid`` maps tap names to
    channel-last arrays.
    """
    spec = model.spec
    x = check_images(x, spec.domain)
    xt = to_channels_first(x)
    _check_input(model, xt)
    with torch.no_grad():
        taps, logits = model.forward_features(xt.to(_dtype(model)))
    pyramid = OrderedDict((k, v.movedim(1, -1).numpy()) for k, v in taps.items())
    return pyramid, torch.softmax(logits, dim=1).double().numpy()


def _dtype(model: nn.Module):
    return next(model.parameters()).dtype


def predict_proba(model: nn.Module, X, batch_size: int = 256) -> np.ndarray:
    """Softmax posteriors for a channel-last batch, in input order."""
    X = check_images(X, model.spec.domain)
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(X), batch_size):
            xt = to_channels_first(X[start:start + batch_size]).to(_dtype(model))
            _check_input(model, xt)
            out.append(torch.softmax(model(xt), dim=1).double())
    return torch.cat(out).numpy()


def predict(model: nn.Module, x) -> list:
    """Posterior of each input as a :class:`TargetCondition`."""
    return [TargetCondition(p / p.sum()) for p in predict_proba(model, x)]


def cam_from_features(features: torch.Tensor, weights: torch.Tensor, class_index: int, out_size) -> np.ndarray:
    """Class activation map from channel-first features ``(N, C, *spatial)``."""
    heat = torch.einsum("nc...,c->n...", features, weights[class_index]).unsqueeze(1)
    heat = resize(heat, out_size)[:, 0]
    flat = heat.flatten(1)
    lo = flat.min(dim=1).values.view(-1, *[1] * (heat.dim() - 1))
    hi = flat.max(dim=1).values.view(-1, *[1] * (heat.dim() - 1))
    span = hi - lo
    heat = torch.where(span > 0, (heat - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(heat))
    return heat.detach().numpy()


def cam(model: nn.Module, x, class_index: int) -> np.ndarray:
    """Input-resolution CAM heatmap in [0, 1] for each image in ``x``."""
    weights = _head(model).class_weights()
    if not 0 <= class_index < weights.shape[0]:
        raise ValueError(f"class_index {class_index} out of range")
    x = check_images(x, model.spec.domain)
    xt = to_channels_first(x).to(_dtype(model))
    _check_input(model, xt)
    with torch.no_grad():
        _, final = _encode(model, xt)
    return cam_from_features(final, weights.detach(), class_index, model.spec.input_shape[:-1])


def _head(model):
    return getattr(model, "base", model)


def _encode(model, xt):
    if hasattr(model, "base"):
        return model.base.encode(xt, model.attention)
    return model.encode(xt)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    steps: int = 0

    def to_dict(self) -> dict:
        return dict(train_loss=self.train_loss, train_acc=self.train_acc,
                    val_loss=self.val_loss, val_acc=self.val_acc, steps=self.steps)


def split_validation(n: int, seed: int, fraction: float = 0.1):
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(round(n * fraction)) if n >= 10 else 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def evaluate(model: nn.Module, X: np.ndarray, y: np.ndarray, batch_size: int = 256):
    """(mean cross-entropy, accuracy) of ``model`` on channel-last data."""
    probs = predict_proba(model, X, batch_size)
    ce = -np.mean(np.log(np.clip(probs[np.arange(len(y)), y], 1e-12, None)))
    return float(ce), float(np.mean(probs.argmax(1) == y))


def train_backbone(X, y, spec: BackboneSpec, params: HyperParams, validation_fraction: float = 0.1,
                   model: Optional[DiagnosticModel] = None, log_every: int = 0):
    """Supervised pre-training with Adam and per-epoch exponential LR decay.

    Returns ``(model, history)``; the model comes back frozen.
    """
    X = check_images(X, spec.domain)
    y = check_labels(y, spec.num_classes)
    if len(X) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(params.seed)
    rng = np.random.default_rng(params.seed)
    if model is None:
        model = DiagnosticModel(spec)
    tr, va = split_validation(len(X), params.seed, validation_fraction)
    opt = torch.optim.Adam(model.parameters(), lr=params.lr_cls, betas=(params.adam_beta1, params.adam_beta2))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=params.decay)
    hist = TrainHistory()
    done = False
    for epoch in range(params.epochs):
        model.train()
        losses, correct, seen = [], 0, 0
        for batch in _batches(tr, params.batch_size, rng):
            xb = to_channels_first(X[batch])
            yb = torch.as_tensor(y[batch])
            logits = model(xb)
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"backbone loss diverged at step {hist.steps}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            hist.steps += 1
            losses.append(loss.item())
            correct += int((logits.argmax(1) == yb).sum())
            seen += len(batch)
            if log_every and hist.steps % log_every == 0:
                logger.info("backbone step %d loss %.4f", hist.steps, loss.item())
            if params.max_steps_backbone and hist.steps >= params.max_steps_backbone:
                done = True
                break
        sched.step()
        hist.train_loss.append(float(np.mean(losses)))
        hist.train_acc.append(correct / max(seen, 1))
        if len(va):
            vl, vacc = evaluate(model, X[va], y[va])
            hist.val_loss.append(vl)
            hist.val_acc.append(vacc)
        logger.info("backbone epoch %d train_loss %.4f val_acc %s", epoch + 1, hist.train_loss[-1],
                    hist.val_acc[-1] if hist.val_acc else "n/a")
        if done:
            break
    if params.bn_recalibrate:
        recalibrate_batch_norm(model, X[tr], params.batch_size)
    return model.freeze(), hist


def recalibrate_batch_norm(model: nn.Module, X: np.ndarray, batch_size: int = 256) -> nn.Module:
    """Re-estimate batch-norm running statistics as plain averages over ``X``.

    Exponential running averages from small batches lag the final weights;
    evaluation mode can then collapse to a single class even at low training
    loss.
    """
    if len(X) < 2:
        return model
    # near-equal chunks so no chunk degenerates to a single sample
    chunks = np.array_split(np.arange(len(X)), max(1, len(X) // max(batch_size, 2)))
    batches = [to_channels_first(X[c]).to(_dtype(model)) for c in chunks]
    with torch.no_grad():
        torch.optim.swa_utils.update_bn(batches, model)
    return model


def _batches(idx: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = idx[rng.permutation(len(idx))]
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


class BackboneClassifier(BaseEstimator, ClassifierMixin):
    """Scikit-learn wrapper around :func:`train_backbone`.

    Parameters
    ----------
    domain
        ``"planar2d"`` or ``"volumetric3d"``.
    params
        Hyperparameters; defaults to the domain's profile.
    width
        Channel multiplier for the volumetric stack (1.0 reproduces the
        reference widths).
    """

    def __init__(self, domain: str = PLANAR2D, params: Optional[HyperParams] = None, width: float = 1.0,
                 validation_fraction: float = 0.1):
        self.domain = domain
        self.params = params
        self.width = width
        self.validation_fraction = validation_fraction

    def _spec(self, input_shape, num_classes):
        if self.domain == PLANAR2D:
            return planar_spec(num_classes, input_shape)
        return volumetric_spec(num_classes, input_shape, self.width)

    def fit(self, X, y):
        X = check_images(X, self.domain)
        y = check_labels(y)
        self.classes_ = np.arange(int(y.max()) + 1)
        params = self.params or HyperParams.profile(self.domain)
        spec = self._spec(X.shape[1:], len(self.classes_))
        self.model_, self.history_ = train_backbone(X, y, spec, params, self.validation_fraction)
        self.checksum_ = param_checksum(self.model_)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, X)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def cam(self, X, class_index: int):
        check_is_fitted(self, "model_")
        return cam(self.model_, X, class_index)
