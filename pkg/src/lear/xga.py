"""Explanation-guided attention (XGA).

Each injected block computes a global (squeeze-and-excitation) vector, a
local single-channel saliency map and a contextual map from a strided
dilated convolution, fuses them into a sigmoid mask ``A`` and modulates the
block output as ``ReLU(U + U * A)``. Training pulls the channel-compressed
mask toward a guidance map distilled from counterfactual maps.
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import DiagnosticModel
from .core import ConfigError, ShapeError, check_images
from .layers import param_checksum, resize, to_channels_first

logger = logging.getLogger(__name__)

DILATION = 2
REDUCTION_STRIDE = 2
NORM_EPS = 1e-8


# -- functional pieces (channel-first tensors) ---------------------------------


def channel_descriptor(u: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel: (N, C, *spatial) -> (N, C)."""
    if u.dim() < 3 or u[0, 0].numel() == 0:
        raise ShapeError(f"feature map needs at least one spatial element, got {tuple(u.shape)}")
    return u.flatten(2).mean(dim=2)


def global_attention(d: torch.Tensor, w_shrink: torch.Tensor, w_expand: torch.Tensor) -> torch.Tensor:
    """g = W_expand ReLU(W_shrink d); weight shapes (C/r, C) and (C, C/r)."""
    if w_shrink.shape[1] != d.shape[-1] or w_expand.shape[1] != w_shrink.shape[0]:
        raise ShapeError("global attention weights do not match the descriptor length")
    return F.linear(F.relu(F.linear(d, w_shrink)), w_expand)


def _conv(dims):
    return F.conv2d if dims == 2 else F.conv3d


def local_attention(u: torch.Tensor, w_shrink: torch.Tensor, w_collapse: torch.Tensor) -> torch.Tensor:
    """S = W_collapse * ReLU(W_shrink * U) with 1x1[x1] kernels; one output channel."""
    conv = _conv(u.dim() - 2)
    if w_shrink.shape[1] != u.shape[1]:
        raise ShapeError(f"local attention expects {w_shrink.shape[1]} channels, got {u.shape[1]}")
    return conv(F.relu(conv(u, w_shrink)), w_collapse)


def contextual_attention(u: torch.Tensor, w_reduction: torch.Tensor,
                         dilation: int = DILATION, stride: int = REDUCTION_STRIDE) -> torch.Tensor:
    """U' = Up(ReLU(W_reduction *_d U)), upscaled back to U's spatial size."""
    conv = _conv(u.dim() - 2)
    if w_reduction.shape[1] != u.shape[1]:
        raise ShapeError(f"contextual attention expects {w_reduction.shape[1]} channels, got {u.shape[1]}")
    k = w_reduction.shape[2]
    pad = dilation * (k - 1) // 2
    reduced = F.relu(conv(u, w_reduction, stride=stride, padding=pad, dilation=dilation))
    return resize(reduced, u.shape[2:])


def fuse_attention(g: torch.Tensor, s: torch.Tensor, u_ctx: torch.Tensor) -> torch.Tensor:
    """A = sigmoid(G* x U' + S* x U') with g (N, C) and S (N, 1, *spatial) tiled."""
    if g.shape != u_ctx.shape[:2] or s.shape[1] != 1 or s.shape[2:] != u_ctx.shape[2:]:
        raise ShapeError(f"cannot fuse g {tuple(g.shape)}, S {tuple(s.shape)}, U' {tuple(u_ctx.shape)}")
    g_star = g.view(*g.shape, *[1] * (u_ctx.dim() - 2))
    # keep A strictly inside (0, 1) where the sigmoid saturates in floating point
    info = torch.finfo(u_ctx.dtype)
    return torch.sigmoid(g_star * u_ctx + s * u_ctx).clamp(info.tiny, 1.0 - info.eps)


def modulate(u: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    if u.shape != a.shape:
        raise ShapeError(f"feature map {tuple(u.shape)} and mask {tuple(a.shape)} differ")
    return F.relu(u + u * a)


def compress_attention(a: torch.Tensor) -> torch.Tensor:
    """Channel-wise L2 norm: (N, C, *spatial) -> (N, 1, *spatial)."""
    return torch.linalg.vector_norm(a, dim=1, keepdim=True)


def resize_guidance(m_guide: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    return resize(m_guide, size)


def _unit(v: torch.Tensor):
    norm = torch.linalg.vector_norm(v, dim=1, keepdim=True)
    ok = norm.squeeze(1) >= NORM_EPS
    return v / norm.clamp_min(NORM_EPS), ok


def xga_penalty(compressed: Sequence[torch.Tensor], guides: Sequence[torch.Tensor]) -> torch.Tensor:
    """Omega: sum over layers of the L2 distance between unit-normalized maps, batch-averaged.

    A layer whose guidance or attention map has (near) zero norm contributes 0.
    """
    if len(compressed) != len(guides):
        raise ShapeError(f"{len(compressed)} attention maps vs {len(guides)} guidance maps")
    total = None
    for a_bar, m_bar in zip(compressed, guides):
        if a_bar.shape != m_bar.shape:
            raise ShapeError(f"layer shapes differ: {tuple(a_bar.shape)} vs {tuple(m_bar.shape)}")
        a_u, a_ok = _unit(a_bar.flatten(1))
        m_u, m_ok = _unit(m_bar.flatten(1))
        dist = torch.linalg.vector_norm(m_u - a_u, dim=1)
        ok = a_ok & m_ok
        if not bool(ok.all()):
            logger.warning("xga penalty: %d degenerate map(s) skipped", int((~ok).sum()))
        dist = torch.where(ok, dist, torch.zeros_like(dist))
        total = dist if total is None else total + dist
    return total.mean()


def loss_xga(y, probs=None, omega=0.0, lambda8: float = 0.1, *, logits=None) -> torch.Tensor:
    """CE(y, probs) + lambda8 * Omega."""
    from .objectives import loss_cls

    if lambda8 < 0:
        raise ValueError("lambda8 must be >= 0")
    return loss_cls(y, probs, logits=logits) + lambda8 * torch.as_tensor(omega)


# -- modules ---------------------------------------------------------------------


class XGABlock(nn.Module):
    """Attention module injected after one conv block."""

    def __init__(self, dims: int, channels: int, r: int = 4, kernel: int = 3):
        super().__init__()
        if channels % r:
            raise ConfigError(f"r={r} does not divide channel count {channels}")
        hidden = channels // r
        self.dims, self.channels, self.r = dims, channels, r
        self.w_c_shrink = nn.Parameter(torch.empty(hidden, channels))
        self.w_expand = nn.Parameter(torch.empty(channels, hidden))
        one = (1,) * dims
        self.w_d_shrink = nn.Parameter(torch.empty(hidden, channels, *one))
        self.w_collapse = nn.Parameter(torch.empty(1, hidden, *one))
        self.w_reduction = nn.Parameter(torch.empty(channels, channels, *(kernel,) * dims))
        self.reset_parameters()

    def reset_parameters(self):
        for w in self.parameters():
            nn.init.kaiming_uniform_(w, a=5 ** 0.5)

    def maps(self, u: torch.Tensor) -> dict:
        d = channel_descriptor(u)
        g = global_attention(d, self.w_c_shrink, self.w_expand)
        s = local_attention(u, self.w_d_shrink, self.w_collapse)
        u_ctx = contextual_attention(u, self.w_reduction)
        return dict(d=d, g=g, S=s, U_ctx=u_ctx, A=fuse_attention(g, s, u_ctx))

    def forward(self, u: torch.Tensor, record: Optional[list] = None) -> torch.Tensor:
        a = self.maps(u)["A"]
        if record is not None:
            record.append(a)
        return modulate(u, a)


class XGAModel(nn.Module):
    """Frozen diagnostic model with one XGA block after every conv block."""

    def __init__(self, base: DiagnosticModel, r: int = 4):
        super().__init__()
        self.base = base
        dims = base.spec.dims
        self.attention = nn.ModuleList([XGABlock(dims, c, r) for c in base.block_channels])

    @property
    def spec(self):
        return self.base.spec

    def train(self, mode: bool = True):
        super().train(mode)
        self.base.eval()  # frozen batch-norm statistics
        return self

    def forward_features(self, x):
        taps, h = self.base.encode(x, self.attention)
        return taps, self.base.head(h)

    def forward_with_attention(self, x):
        record = []
        _, h = self.base.encode(x, self.attention, record)
        return self.base.head(h), record

    def forward(self, x):
        return self.base.head(self.base.encode(x, self.attention)[1])

    def omega_parameters(self):
        return self.attention.parameters()

    def theta_checksum(self) -> str:
        return param_checksum(self.base)

    def omega_checksum(self) -> str:
        return param_checksum(self.attention)


def inject(backbone: DiagnosticModel, r: int = 4, seed: Optional[int] = None) -> XGAModel:
    """Wrap a frozen backbone with attention after every conv block.

    The backbone object is shared, not copied, so its parameters stay the
    same tensors.
    """
    for c in backbone.block_channels:
        if c % r:
            raise ConfigError(f"r={r} does not divide channel count {c} of an injected layer")
    backbone.freeze()
    if seed is not None:
        torch.manual_seed(seed)
    return XGAModel(backbone, r)


def guided_loss(model: XGAModel, x: torch.Tensor, y: torch.Tensor, guide: torch.Tensor, lambda8: float):
    """(total, ce, omega) for a batch; ``guide`` is (N, 1, *input spatial)."""
    logits, masks = model.forward_with_attention(x)
    ce = F.cross_entropy(logits, y)
    compressed = [compress_attention(a) for a in masks]
    guides = [resize_guidance(guide, a.shape[2:]) for a in compressed]
    omega = xga_penalty(compressed, guides)
    return ce + lambda8 * omega, ce, omega


def attention_maps(model: XGAModel, x) -> list:
    """Per-layer channel-last masks A and compressed maps for channel-last ``x``."""
    x = check_images(x, model.spec.domain)
    xt = to_channels_first(x).to(next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        _, masks = model.forward_with_attention(xt)
    return [(a.movedim(1, -1).numpy(), compress_attention(a).movedim(1, -1).numpy()) for a in masks]
