"""Counterfactual map generator (conditional U-Net decoder) and discriminator.

The generator decodes the frozen encoder's feature pyramid; every tapped
feature map is concatenated with the tiled target condition and passed
through a small conditioning convolution before it reaches the decoder.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Optional

import numpy as np
import torch
from torch import nn

from .backbone import DiagnosticModel, ShapeError
from .core import PLANAR2D, check_conditions, check_images
from .layers import ConvBlock, LRELU_SLOPE, SameConv, SamePool, activation, batch_norm, match_size, to_channels_first


def tile_condition(t, spatial_shape) -> np.ndarray:
    """Broadcast condition ``t`` to a channel-last ``(*spatial_shape, |Y|)`` array."""
    spatial_shape = tuple(int(s) for s in spatial_shape)
    if not spatial_shape or any(s < 1 for s in spatial_shape):
        raise ShapeError(f"spatial shape must be positive, got {spatial_shape}")
    p = np.asarray(t, dtype=np.float64).reshape(-1)
    return np.broadcast_to(p, (*spatial_shape, p.size)).copy()


def tile(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """(N, K) conditions -> (N, K, *spatial) matching ``like``."""
    shape = (t.shape[0], t.shape[1], *like.shape[2:])
    return t.view(*t.shape, *[1] * (like.dim() - 2)).expand(shape)


class SkipConditioner(nn.Module):
    """LReLU(Conv(F ⊕ Tile(t))) with a 3x3[x3] stride-1 zero-padded kernel."""

    def __init__(self, dims: int, channels: int, num_classes: int, out_channels: Optional[int] = None, bn: bool = False):
        super().__init__()
        self.channels = channels
        self.num_classes = num_classes
        out_channels = out_channels or channels
        self.conv = SameConv(dims, channels + num_classes, out_channels, 3, 1, bias=not bn)
        self.bn = batch_norm(dims, out_channels) if bn else nn.Identity()
        self.act = nn.LeakyReLU(LRELU_SLOPE)

    def forward(self, f: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.channels:
            raise ShapeError(f"conditioner expects {self.channels} channels, got {f.shape[1]}")
        if t.shape[1] != self.num_classes:
            raise ShapeError(f"condition has {t.shape[1]} entries, expected {self.num_classes}")
        return self.act(self.bn(self.conv(torch.cat([f, tile(t.to(f.dtype), f)], dim=1))))


class _Up(nn.Module):
    def __init__(self, dims):
        super().__init__()
        self.dims = dims

    def forward(self, x):
        return nn.functional.interpolate(x, scale_factor=2, mode="nearest")


class Generator(nn.Module):
    """Decoder G_phi plus the per-tap skip conditioners.

    ``stages`` is a list of ``(tap, pre, post)``: ``pre`` runs on the
    upsampled decoder state before the conditioned skip ``tap`` is
    concatenated, ``post`` runs after concatenation.
    """

    def __init__(self, dims, taps, bottleneck, conditioners, stages, head, out_size, final_activation):
        super().__init__()
        self.dims = dims
        self.taps = list(taps)
        self.bottleneck = bottleneck
        self.conditioners = nn.ModuleDict(conditioners)
        self.stage_taps = [s[0] for s in stages]
        self.pre = nn.ModuleList([s[1] for s in stages])
        self.post = nn.ModuleList([s[2] for s in stages])
        self.head = head
        self.out_size = tuple(out_size)
        self.final_activation = final_activation

    def condition(self, pyramid: "OrderedDict[str, torch.Tensor]", t: torch.Tensor):
        """Conditioned skip features {tap: τ(F_tap, t)}."""
        missing = [k for k in self.conditioners if k not in pyramid]
        if missing:
            raise ShapeError(f"feature pyramid lacks taps {missing}")
        return OrderedDict((k, self.conditioners[k](pyramid[k], t)) for k in self.conditioners)

    def decode(self, conditioned: "OrderedDict[str, torch.Tensor]") -> torch.Tensor:
        h = conditioned[self.bottleneck]
        for tap, pre, post in zip(self.stage_taps, self.pre, self.post):
            h = pre(h)
            if tap is not None:
                skip = conditioned[tap]
                h = match_size(h, skip.shape[2:])
                h = torch.cat([skip, h], dim=1)
            h = post(h)
        return match_size(self.head(h), self.out_size)

    def forward(self, pyramid, t):
        return self.decode(self.condition(pyramid, t))


def _seq(*mods):
    return nn.Sequential(*mods)


def planar_generator(encoder: DiagnosticModel, final_activation: str = "tanh", output_bn: bool = True) -> Generator:
    shapes = encoder.tap_shapes()
    k = encoder.spec.num_classes
    (c1, c2, c3, c4) = [shapes[f"enc{i}"][1] for i in range(1, 5)]
    conds = OrderedDict((name, SkipConditioner(2, ch, k)) for name, (_, ch) in shapes.items())
    up = _Up(2)
    stages = [
        ("enc3", _seq(up, ConvBlock(2, c4, c3, 3)), ConvBlock(2, 2 * c3, c3, 3)),
        ("enc2", _seq(up, ConvBlock(2, c3, c2, 2, padding="valid")), ConvBlock(2, 2 * c2, c2, 3)),
        ("enc1", _seq(up, ConvBlock(2, c2, c1, 3)), ConvBlock(2, 2 * c1, c1, 3)),
    ]
    out_ch = encoder.spec.input_shape[-1]
    deconv = nn.ConvTranspose2d(c1, out_ch, 4, 2, padding=1, bias=not output_bn)
    head = _seq(deconv, batch_norm(2, out_ch) if output_bn else nn.Identity(), activation(final_activation))
    return Generator(2, shapes, "enc4", conds, stages, head, encoder.spec.input_shape[:-1], final_activation)


def volumetric_generator(encoder: DiagnosticModel, final_activation: str = "linear", output_bn: bool = True) -> Generator:
    shapes = encoder.tap_shapes()
    k = encoder.spec.num_classes
    ch = {name: c for name, (_, c) in shapes.items()}
    conds = OrderedDict()
    for name, c in ch.items():
        conds[name] = SkipConditioner(3, c, k, bn=(name == "bottleneck"))
    up = _Up(3)

    def blocks(cin, cout):
        return _seq(ConvBlock(3, cin, cout, 3, act="lrelu"), ConvBlock(3, cout, cout, 3, act="lrelu"))

    def deconv(cin, cout):
        return _seq(up, nn.ConvTranspose3d(cin, cout, (1, 2, 1), 1, bias=False), batch_norm(3, cout),
                    nn.LeakyReLU(LRELU_SLOPE))

    b, e4, e3, e2, e1 = ch["bottleneck"], ch["enc4"], ch["enc3"], ch["enc2"], ch["enc1"]
    stages = [
        ("enc4", up, blocks(b + e4, e4)),
        ("enc3", deconv(e4, e3), blocks(2 * e3, e3)),
        ("enc2", deconv(e3, e2), blocks(2 * e2, e2)),
        ("enc1", deconv(e2, e1), blocks(2 * e1, e1)),
    ]
    out_ch = encoder.spec.input_shape[-1]
    head = _seq(up, SameConv(3, e1, out_ch, 3, bias=not output_bn),
                batch_norm(3, out_ch) if output_bn else nn.Identity(), activation(final_activation))
    return Generator(3, shapes, "bottleneck", conds, stages, head, encoder.spec.input_shape[:-1], final_activation)


class ChannelAffine(nn.Module):
    """Per-channel scale and shift: a batch-norm layer without batch statistics."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        shape = (1, -1) + (1,) * (x.dim() - 2)
        return x * self.weight.view(shape) + self.bias.view(shape)


def replace_batch_norm(module: nn.Module) -> nn.Module:
    """Swap every batch-norm layer for a :class:`ChannelAffine` in place."""
    for name, child in module.named_children():
        if isinstance(child, nn.modules.batchnorm._BatchNorm):
            setattr(module, name, ChannelAffine(child.num_features))
        else:
            replace_batch_norm(child)
    return module


GENERATOR_NORMS = ("batch", "affine")


def build_generator(encoder: DiagnosticModel, norm: str = "affine", **kw) -> Generator:
    """Generator matched to the encoder's taps.

    ``norm="affine"`` (the default) replaces batch normalization with a
    learned per-channel affine map, so a sample's map does not depend on
    the batch it is generated in. ``norm="batch"`` keeps batch norm.
    """
    if norm not in GENERATOR_NORMS:
        raise ValueError(f"norm must be one of {GENERATOR_NORMS}, got {norm!r}")
    if encoder.spec.domain == PLANAR2D:
        if set(encoder.tap_shapes()) != {"enc1", "enc2", "enc3", "enc4"}:
            gen = generic_generator(encoder, **kw)
        else:
            gen = planar_generator(encoder, **kw)
    elif set(encoder.tap_shapes()) != {"enc1", "enc2", "enc3", "enc4", "bottleneck"}:
        gen = generic_generator(encoder, **kw)
    else:
        gen = volumetric_generator(encoder, **kw)
    gen.norm = norm
    return replace_batch_norm(gen) if norm == "affine" else gen


def generic_generator(encoder: DiagnosticModel, final_activation: Optional[str] = None, output_bn: bool = False) -> Generator:
    """Minimal U-Net decoder for arbitrary tap sets (small test models)."""
    dims = encoder.spec.dims
    shapes = encoder.tap_shapes()
    k = encoder.spec.num_classes
    conds = OrderedDict((name, SkipConditioner(dims, c, k)) for name, (_, c) in shapes.items())
    names = list(shapes)
    bottleneck = encoder.spec.bottleneck
    stages = []
    prev = shapes[bottleneck][1]
    for name in reversed(names[:-1]):
        c = shapes[name][1]
        stages.append((name, _seq(_Up(dims), ConvBlock(dims, prev, c, 3, bn=False)), ConvBlock(dims, 2 * c, c, 3, bn=False)))
        prev = c
    final_activation = final_activation or ("tanh" if dims == 2 else "linear")
    head = _seq(_Up(dims), SameConv(dims, prev, encoder.spec.input_shape[-1], 3), activation(final_activation))
    return Generator(dims, shapes, bottleneck, conds, stages, head, encoder.spec.input_shape[:-1], final_activation)


class Discriminator(nn.Module):
    """Conv stack with a single linear output per image."""

    def __init__(self, dims, input_shape, layers):
        super().__init__()
        mods = []
        in_ch = input_shape[-1]
        size = list(input_shape[:-1])
        for layer in layers:
            if layer[0] == "pool":
                mods.append(SamePool(dims, 2, 2))
                size = [-(-s // 2) for s in size]
                continue
            _, out_ch, kernel, stride, bn = layer
            mods.append(ConvBlock(dims, in_ch, out_ch, kernel, stride, bn=bn, act="lrelu"))
            size = [-(-s // stride) for s in size]
            in_ch = out_ch
        self.features = nn.Sequential(*mods)
        self.fc = nn.Linear(in_ch * int(np.prod(size)), 1)
        self.input_shape = tuple(input_shape)

    def forward(self, x):
        expected = (self.input_shape[-1], *self.input_shape[:-1])
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"discriminator expects {expected}, got {tuple(x.shape[1:])}")
        return self.fc(self.features(x).flatten(1)).squeeze(1)


def planar_discriminator(input_shape=(28, 28, 1), widths=(32, 64, 128, 256)) -> Discriminator:
    layers = []
    for i, w in enumerate(widths):
        layers.append(("conv", w, 3, 1, i > 0))
        layers.append(("conv", w, 4, 2, True))
    return Discriminator(2, input_shape, layers)


def volumetric_discriminator(input_shape, width: float = 1.0) -> Discriminator:
    def w(c):
        return max(int(round(c * width)), 1)

    layers = [("conv", w(16), 3, 1, False), ("conv", w(16), 3, 1, True), ("pool",),
              ("conv", w(32), 3, 1, True), ("conv", w(32), 3, 1, True), ("pool",)]
    for c, pool in ((64, True), (128, True), (128, False)):
        layers += [("conv", w(c), 3, 1, True)] * 3
        if pool:
            layers.append(("pool",))
    return Discriminator(3, input_shape, layers)


def tiny_discriminator(input_shape=(4, 4, 1)) -> Discriminator:
    dims = len(input_shape) - 1
    return Discriminator(dims, input_shape, [("conv", 2, 3, 1, False), ("conv", 3, 3, 2, False)])


def build_discriminator(encoder: DiagnosticModel, width: float = 1.0) -> Discriminator:
    shape = encoder.spec.input_shape
    if encoder.spec.domain == PLANAR2D:
        if encoder.spec.architecture_id == "tiny":
            return tiny_discriminator(shape)
        return planar_discriminator(shape)
    return volumetric_discriminator(shape, width)


# -- functional surface ------------------------------------------------------


def _pyramid(encoder: nn.Module, x: torch.Tensor):
    """Tapped features from a plain or XGA-injected encoder."""
    if hasattr(encoder, "base"):
        return encoder.base.encode(x, encoder.attention)[0]
    return encoder.encode(x)[0]


def generate_maps(encoder: nn.Module, generator: Generator, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Channel-first tensor path: M = G(T(x, t))."""
    return generator(_pyramid(encoder, x), t)


def _num_classes(encoder):
    return getattr(encoder, "base", encoder).spec.num_classes


def _domain(encoder):
    return getattr(encoder, "base", encoder).spec.domain


def _prepare(encoder, x, t):
    x = check_images(x, _domain(encoder))
    k = _num_classes(encoder)
    t = np.asarray(t.probs if hasattr(t, "probs") else t, dtype=np.float64)
    if t.shape[-1] != k:
        raise ValueError(f"target condition has {t.shape[-1]} entries, model has {k} classes")
    t = check_conditions(t, len(x), k)
    dtype = next(encoder.parameters()).dtype
    return to_channels_first(x).to(dtype), torch.tensor(np.array(t), dtype=dtype)


def generate_map(encoder, generator: Generator, x, t) -> np.ndarray:
    """Counterfactual maps for channel-last ``x`` conditioned on ``t`` (channel-last output)."""
    xt, tt = _prepare(encoder, x, t)
    generator.eval()
    with torch.no_grad():
        m = generate_maps(encoder, generator, xt, tt)
    return m.movedim(1, -1).numpy()


def transform(x, m):
    """X~ = X + M, elementwise and unclipped."""
    if isinstance(x, torch.Tensor):
        if x.shape != m.shape:
            raise ShapeError(f"image {tuple(x.shape)} and map {tuple(m.shape)} differ in shape")
        return x + m
    x, m = np.asarray(x), np.asarray(m)
    if x.shape != m.shape:
        raise ShapeError(f"image {x.shape} and map {m.shape} differ in shape")
    return x + m


def cycle_tensors(encoder, generator, model, x: torch.Tensor, t: torch.Tensor):
    """Channel-first cycle: returns (M1, X~, M2, X').

    The return map is conditioned on the ORIGINAL input's posterior R(x).
    """
    with torch.no_grad():
        posterior = torch.softmax(model(x), dim=1)
    m1 = generate_maps(encoder, generator, x, t)
    x_tilde = x + m1
    m2 = generate_maps(encoder, generator, x_tilde, posterior)
    return m1, x_tilde, m2, x_tilde + m2


def cycle_reconstruct(encoder, generator, model, x, t):
    """(X~, X') for channel-last inputs."""
    xt, tt = _prepare(encoder, x, t)
    generator.eval()
    with torch.no_grad():
        _, x_tilde, _, x_prime = cycle_tensors(encoder, generator, model, xt, tt)
    return x_tilde.movedim(1, -1).numpy(), x_prime.movedim(1, -1).numpy()


def discriminate(disc: Discriminator, x) -> np.ndarray:
    """One unbounded realism score per channel-last image."""
    dims = len(disc.input_shape) - 1
    x = check_images(x, PLANAR2D if dims == 2 else "volumetric3d")
    dtype = next(disc.parameters()).dtype
    disc.eval()
    with torch.no_grad():
        return disc(to_channels_first(x).to(dtype)).double().numpy()
