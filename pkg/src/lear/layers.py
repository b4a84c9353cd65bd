"""Dimension-generic building blocks shared by the 2-D and 3-D networks."""

from __future__ import annotations

import math
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LRELU_SLOPE = 0.2

_Size = Union[int, Sequence[int]]


def _tuple(v: _Size, n: int) -> tuple:
    return tuple(v) if isinstance(v, (tuple, list)) else (v,) * n


def same_padding(size: Sequence[int], kernel: Sequence[int], stride: Sequence[int], dilation=None) -> list:
    """TF-style 'same' padding as an ``F.pad`` argument (last axis first).

    Output size is ``ceil(in / stride)``; odd totals put the extra element
    at the trailing end.
    """
    dilation = dilation or (1,) * len(size)
    pads = []
    for n, k, s, d in zip(size, kernel, stride, dilation):
        out = math.ceil(n / s)
        total = max((out - 1) * s + (k - 1) * d + 1 - n, 0)
        pads.append((total // 2, total - total // 2))
    return [p for pair in reversed(pads) for p in pair]


class SameConv(nn.Module):
    """Convolution with 'same' padding for any stride (2-D or 3-D)."""

    def __init__(self, dims, in_ch, out_ch, kernel, stride=1, padding="same", bias=True, dilation=1):
        super().__init__()
        self.dims = dims
        self.kernel = _tuple(kernel, dims)
        self.stride = _tuple(stride, dims)
        self.dilation = _tuple(dilation, dims)
        self.padding = padding
        conv = nn.Conv2d if dims == 2 else nn.Conv3d
        self.conv = conv(in_ch, out_ch, self.kernel, self.stride, padding=0, bias=bias, dilation=self.dilation)

    def forward(self, x):
        if self.padding == "same":
            x = F.pad(x, same_padding(x.shape[2:], self.kernel, self.stride, self.dilation))
        return self.conv(x)


class SamePool(nn.Module):
    """Max pooling with 'same' padding (pads with -inf)."""

    def __init__(self, dims, kernel, stride):
        super().__init__()
        self.dims = dims
        self.kernel = _tuple(kernel, dims)
        self.stride = _tuple(stride, dims)

    def forward(self, x):
        x = F.pad(x, same_padding(x.shape[2:], self.kernel, self.stride), value=float("-inf"))
        pool = F.max_pool2d if self.dims == 2 else F.max_pool3d
        return pool(x, self.kernel, self.stride)


def activation(name: str) -> nn.Module:
    if name == "relu":
        return nn.ReLU()
    if name == "lrelu":
        return nn.LeakyReLU(LRELU_SLOPE)
    if name == "tanh":
        return nn.Tanh()
    if name in ("linear", None):
        return nn.Identity()
    raise ValueError(f"unknown activation {name!r}")


def batch_norm(dims: int, ch: int) -> nn.Module:
    return nn.BatchNorm2d(ch) if dims == 2 else nn.BatchNorm3d(ch)


class ConvBlock(nn.Module):
    """Conv -> BatchNorm -> activation."""

    def __init__(self, dims, in_ch, out_ch, kernel, stride=1, bn=True, act="relu", padding="same"):
        super().__init__()
        self.conv = SameConv(dims, in_ch, out_ch, kernel, stride, padding=padding, bias=not bn)
        self.bn = batch_norm(dims, out_ch) if bn else nn.Identity()
        self.act = activation(act)
        self.out_channels = out_ch

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


def match_size(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Center-crop or zero-pad the spatial dims of ``x`` to ``size``."""
    size = tuple(size)
    if tuple(x.shape[2:]) == size:
        return x
    for axis, target in enumerate(size, start=2):
        n = x.shape[axis]
        if n > target:
            start = (n - target) // 2
            x = x.narrow(axis, start, target)
        elif n < target:
            before = (target - n) // 2
            pad = [0, 0] * (x.dim() - 2)
            idx = (x.dim() - 1 - axis) * 2
            pad[idx], pad[idx + 1] = before, target - n - before
            x = F.pad(x, pad)
    return x


def resize(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Bilinear/trilinear resampling with the align-corners convention."""
    size = tuple(int(s) for s in size)
    if tuple(x.shape[2:]) == size:
        return x
    mode = "bilinear" if x.dim() == 4 else "trilinear"
    if any(t == 1 and n > 1 for n, t in zip(x.shape[2:], size)):
        # align_corners would pick the first element; average instead.
        return _resize_axiswise(x, size)
    return F.interpolate(x, size=size, mode=mode, align_corners=True)


def _resize_axiswise(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    for axis, target in enumerate(size, start=2):
        n = x.shape[axis]
        if n == target:
            continue
        if n == 1:
            reps = [1] * x.dim()
            reps[axis] = target
            x = x.repeat(*reps)
            continue
        if target == 1:
            x = x.narrow(axis, 0, n).mean(dim=axis, keepdim=True)
            continue
        pos = torch.linspace(0, n - 1, target, dtype=x.dtype, device=x.device)
        lo = pos.floor().long().clamp(max=n - 2)
        frac = (pos - lo.to(x.dtype))
        shape = [1] * x.dim()
        shape[axis] = target
        frac = frac.view(shape)
        x = x.index_select(axis, lo) * (1 - frac) + x.index_select(axis, lo + 1) * frac
    return x


def to_channels_first(X) -> torch.Tensor:
    """(N, *spatial, C) array or tensor -> (N, C, *spatial) tensor."""
    t = torch.as_tensor(np.asarray(X)) if not isinstance(X, torch.Tensor) else X
    # canonical strides: size-1 axes otherwise keep input-dependent strides,
    # which change the conv kernel path and the low-order bits of the output
    return t.movedim(-1, 1).clone(memory_format=torch.contiguous_format)


def to_channels_last(t: torch.Tensor) -> torch.Tensor:
    return t.movedim(1, -1)


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
