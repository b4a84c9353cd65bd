"""Loss terms for counterfactual map generation.

Images and maps are batched and channel-last, ``(N, *spatial, C)``. Norms are
summed over each sample's voxels; expectations are batch means.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .core import HyperParams, ShapeError

CE_CLAMP = 1e-12


def _t(v, like=None) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(v, dtype=dtype)


def _per_sample_l1(a: torch.Tensor) -> torch.Tensor:
    return a.abs().reshape(a.shape[0], -1).sum(dim=1)


def loss_cyc(x, x_prime) -> torch.Tensor:
    x, x_prime = _t(x), _t(x_prime)
    if x.shape != x_prime.shape:
        raise ShapeError(f"cycle loss shapes differ: {tuple(x.shape)} vs {tuple(x_prime.shape)}")
    return _per_sample_l1(x_prime - x).mean()


def loss_adv_d(score_real, score_fake1, score_fake2, smoothing: float = 0.0) -> torch.Tensor:
    """Least-squares discriminator loss; the real target is ``1 - smoothing``."""
    real, f1, f2 = _t(score_real), _t(score_fake1), _t(score_fake2)
    return ((real - (1.0 - smoothing)) ** 2).mean() + 0.5 * ((f1 ** 2).mean() + (f2 ** 2).mean())


def loss_adv_g(score_fake1, score_fake2) -> torch.Tensor:
    f1, f2 = _t(score_fake1), _t(score_fake2)
    return 0.5 * (((f1 - 1.0) ** 2).mean() + ((f2 - 1.0) ** 2).mean())


def loss_tv(x_tilde) -> torch.Tensor:
    """Anisotropic total variation over the spatial axes, summed per sample."""
    x = _t(x_tilde)
    if x.dim() not in (4, 5):
        raise ShapeError(f"total variation needs (N, *spatial, C) with 2 or 3 spatial axes, got {tuple(x.shape)}")
    total = x.new_zeros(x.shape[0])
    for axis in range(1, x.dim() - 1):
        n = x.shape[axis]
        if n < 2:
            continue
        diff = x.narrow(axis, 1, n - 1) - x.narrow(axis, 0, n - 1)
        total = total + _per_sample_l1(diff)
    return total.mean()


def map_norms(m) -> tuple:
    """Batch means of the per-sample L1 and (unsquared) L2 norms of a map."""
    m = _t(m)
    flat = m.reshape(m.shape[0], -1)
    return flat.abs().sum(dim=1).mean(), torch.linalg.vector_norm(flat, dim=1).mean()


def loss_map(m, lambda1: float, lambda2: float) -> torch.Tensor:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("map regularization weights must be >= 0")
    l1, l2 = map_norms(m)
    return lambda1 * l1 + lambda2 * l2


def loss_cls(t, probs=None, *, logits=None) -> torch.Tensor:
    """Cross-entropy ``-sum t_i log p_i`` (probabilities clamped at 1e-12).

    Pass ``logits`` instead of ``probs`` to use a log-softmax, which keeps
    gradients alive for saturated outputs.
    """
    t = _t(t, probs if probs is not None else logits)
    if logits is not None:
        logp = torch.log_softmax(logits, dim=-1)
    else:
        logp = torch.log(_t(probs).clamp_min(CE_CLAMP))
    if t.shape[-1] != logp.shape[-1]:
        raise ShapeError(f"condition length {t.shape[-1]} != class count {logp.shape[-1]}")
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if logp.dim() == 1:
        logp = logp.unsqueeze(0)
    return -(t * logp).sum(dim=-1).mean()


@dataclass
class LossBreakdown:
    cyc: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    tv: float = 0.0
    map_l1: float = 0.0
    map_l2: float = 0.0
    cls: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def columns() -> list:
        return ["cyc", "adv_g", "adv_d", "tv", "map_l1", "map_l2", "cls", "total"]


def weighted_total(params: HyperParams, *, cyc=0.0, adv_g=0.0, adv_d=0.0, tv=0.0, map_l1=0.0, map_l2=0.0, cls=0.0):
    p = params
    return (p.lambda3 * adv_g + p.lambda4 * adv_d + p.lambda5 * cyc + p.lambda6 * cls
            + p.lambda7 * tv + p.lambda1 * map_l1 + p.lambda2 * map_l2)


def loss_cmg_total(components: dict, params: HyperParams) -> LossBreakdown:
    """Bundle component values into a :class:`LossBreakdown` with its weighted total."""
    vals = {k: float(components.get(k, 0.0)) for k in LossBreakdown.columns() if k != "total"}
    return LossBreakdown(**vals, total=float(weighted_total(params, **vals)))


def generator_objective(params: HyperParams, *, cyc, adv_g, tv, map_l1, map_l2, cls):
    """What the generator minimizes: every CMG term except the discriminator's."""
    return weighted_total(params, cyc=cyc, adv_g=adv_g, tv=tv, map_l1=map_l1, map_l2=map_l2, cls=cls)


def discriminator_objective(params: HyperParams, adv_d):
    return params.lambda4 * adv_d
