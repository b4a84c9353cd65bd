"""Phase 1 (CMG), Phase 2 (XGA) and the iterative explain-reinforce loop."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .backbone import DiagnosticModel, evaluate, split_validation, train_backbone
from .cmg import Generator, build_discriminator, build_generator
from .core import HyperParams, check_images, check_labels, sample_uniform_targets
from .guidance import build_guidance_batch
from .io import save_checkpoint
from .layers import param_checksum, to_channels_first, to_channels_last
from .objectives import (LossBreakdown, discriminator_objective, generator_objective, loss_adv_d, loss_adv_g,
                         loss_cls, loss_cmg_total, loss_cyc, loss_tv, map_norms)
from .xga import XGAModel, guided_loss, inject

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """A training loss became non-finite."""


def _features_and_logits(encoder: nn.Module, x: torch.Tensor):
    if hasattr(encoder, "base"):
        taps, h = encoder.base.encode(x, encoder.attention)
        return taps, encoder.base.head(h)
    return encoder.forward_features(x)


def _rng(params: HyperParams, salt: int) -> np.random.Generator:
    return np.random.default_rng([params.seed, salt])


def _adam(module, lr, params: HyperParams):
    return torch.optim.Adam([p for p in module.parameters() if p.requires_grad], lr=lr,
                            betas=(params.adam_beta1, params.adam_beta2))


def _check_finite(value: torch.Tensor, phase: str, step: int, parts: dict):
    if not torch.isfinite(value):
        detail = ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items())
        raise DivergenceError(f"{phase} loss non-finite at step {step}: {detail}")


class CSVLog:
    """Row-per-step CSV writer; also keeps rows in memory."""

    def __init__(self, columns, path: Optional[Path] = None):
        self.columns = ["step", *columns]
        self.rows = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def append(self, row: dict):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[c] for c in self.columns])


def cmg_step(encoder, generator, disc, x, t, params: HyperParams, opt_g, opt_d):
    """One alternating generator/discriminator update; returns the components."""
    with torch.no_grad():
        taps_x, logits_x = _features_and_logits(encoder, x)
        posterior = torch.softmax(logits_x, dim=1)

    generator.train()
    disc.train()
    for p in disc.parameters():
        p.requires_grad_(False)
    m1 = generator(taps_x, t)
    x_tilde = x + m1
    taps_tilde, logits_tilde = _features_and_logits(encoder, x_tilde)
    m2 = generator(taps_tilde, posterior)
    x_prime = x_tilde + m2

    d_f1, d_f2 = disc(x_tilde), disc(x_prime)
    adv_g = loss_adv_g(d_f1, d_f2)
    cls = loss_cls(t, logits=logits_tilde)
    cyc = loss_cyc(x, x_prime)
    tv = loss_tv(to_channels_last(x_tilde)) if params.lambda7 else x.new_zeros(())
    l1, l2 = map_norms(m1)
    g_obj = generator_objective(params, cyc=cyc, adv_g=adv_g, tv=tv, map_l1=l1, map_l2=l2, cls=cls)
    opt_g.zero_grad()
    g_obj.backward()
    opt_g.step()

    for p in disc.parameters():
        p.requires_grad_(True)
    xt_d, xp_d = x_tilde.detach(), x_prime.detach()
    scores = disc(torch.cat([x, xt_d, xp_d]))
    n = x.shape[0]
    adv_d = loss_adv_d(scores[:n], scores[n:2 * n], scores[2 * n:], params.label_smoothing)
    d_obj = discriminator_objective(params, adv_d)
    opt_d.zero_grad()
    d_obj.backward()
    opt_d.step()

    parts = dict(cyc=cyc, adv_g=adv_g, adv_d=adv_d, tv=tv, map_l1=l1, map_l2=l2, cls=cls)
    return {k: float(v.detach()) for k, v in parts.items()}


@dataclass
class PhaseResult:
    log: list
    steps: int
    seconds: float
    checksums: dict = field(default_factory=dict)


def train_cmg_phase(encoder: nn.Module, generator: Generator, disc: nn.Module, X, params: HyperParams,
                    log_path: Optional[Path] = None, salt: int = 1, max_steps: Optional[int] = None) -> PhaseResult:
    """Phase 1: fit generator and discriminator with the encoder frozen.

    ``encoder`` is the frozen diagnostic model (plain or XGA-injected); it
    supplies the feature pyramid and acts as the reasoning evaluator.
    """
    base = getattr(encoder, "base", encoder)
    X = check_images(X, base.spec.domain)
    k = base.spec.num_classes
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    torch.manual_seed(params.seed + salt)
    rng = _rng(params, salt)
    opt_g = _adam(generator, params.lr_g, params)
    opt_d = _adam(disc, params.lr_d, params)
    sched_g = torch.optim.lr_scheduler.ExponentialLR(opt_g, params.cmg_decay)
    sched_d = torch.optim.lr_scheduler.ExponentialLR(opt_d, params.cmg_decay)
    log = CSVLog(LossBreakdown.columns(), log_path)
    max_steps = max_steps if max_steps is not None else params.max_steps_cmg
    step, start = 0, time.time()
    for epoch in range(params.cmg_epochs):
        for batch in _batch_indices(len(X), params.cmg_batch_size, rng):
            x = to_channels_first(X[batch])
            t = torch.as_tensor(sample_uniform_targets(k, len(batch), rng), dtype=x.dtype)
            parts = cmg_step(encoder, generator, disc, x, t, params, opt_g, opt_d)
            row = loss_cmg_total(parts, params)
            if not np.isfinite(row.total):
                raise DivergenceError(f"CMG loss non-finite at step {step}: {row}")
            step += 1
            log.append({"step": step, **row.to_dict()})
            if step % 25 == 0:
                logger.info("cmg step %d %s", step, {k2: round(v, 4) for k2, v in row.to_dict().items()})
            if max_steps and step >= max_steps:
                break
        sched_g.step()
        sched_d.step()
        if max_steps and step >= max_steps:
            break
    generator.eval()
    disc.eval()
    return PhaseResult(log.rows, step, time.time() - start)


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


# -- Phase 2 -------------------------------------------------------------------


class InvariantError(AssertionError):
    """A parameter partition changed during a phase that must not touch it."""


def _checksums(**modules) -> dict:
    return {name: param_checksum(m) for name, m in modules.items() if m is not None}


def _assert_unchanged(before: dict, after: dict, names, phase: str):
    changed = [n for n in names if n in before and before[n] != after[n]]
    if changed:
        raise InvariantError(f"{phase} modified frozen parameters: {changed}")


def guidance_classes(params: HyperParams, num_classes: int) -> tuple:
    if params.guidance_classes is not None:
        a, b = params.guidance_classes
        if not (0 <= a < num_classes and 0 <= b < num_classes) or a == b:
            raise ValueError(f"guidance classes {params.guidance_classes} invalid for {num_classes} classes")
        return a, b
    return 0, num_classes - 1


def compute_guidance(encoder: nn.Module, generator: Generator, X, classes: tuple, batch_size: int = 64) -> np.ndarray:
    """Per-sample guidance maps (N, *spatial, 1) from maps toward the two extreme classes."""
    base = getattr(encoder, "base", encoder)
    k = base.spec.num_classes
    dtype = next(base.parameters()).dtype
    eye = torch.eye(k, dtype=dtype)
    encoder.eval()
    generator.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(X), batch_size):
            x = to_channels_first(X[s:s + batch_size]).to(dtype)
            taps, _ = _features_and_logits(encoder, x)
            n = x.shape[0]
            m_a = generator(taps, eye[classes[0]].expand(n, k))
            m_b = generator(taps, eye[classes[1]].expand(n, k))
            out.append(build_guidance_batch(to_channels_last(m_a).numpy(), to_channels_last(m_b).numpy()))
    return np.concatenate(out).astype(np.float32)


def train_xga_phase(model: XGAModel, generator: Generator, X, y, params: HyperParams,
                    pyramid_encoder: Optional[nn.Module] = None, log_path: Optional[Path] = None,
                    salt: int = 2, max_steps: Optional[int] = None, guidance: Optional[np.ndarray] = None) -> PhaseResult:
    """Phase 2: fit the attention weights only.

    Guidance maps are computed once at phase start with ``pyramid_encoder``
    (the encoder the generator was trained against this iteration; the plain
    backbone by default) and cached for the whole phase.
    """
    X = check_images(X, model.spec.domain)
    y = check_labels(y, model.spec.num_classes)
    pyramid_encoder = pyramid_encoder if pyramid_encoder is not None else model.base
    if guidance is None:
        guidance = compute_guidance(pyramid_encoder, generator, X, guidance_classes(params, model.spec.num_classes))
    torch.manual_seed(params.seed + salt)
    rng = _rng(params, salt)
    for p in model.base.parameters():
        p.requires_grad_(False)
    for p in model.omega_parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.omega_parameters(), lr=params.lr_xga, betas=(params.adam_beta1, params.adam_beta2))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, params.xga_decay)
    log = CSVLog(["loss", "ce", "omega", "epoch"], log_path)
    max_steps = max_steps if max_steps is not None else params.max_steps_xga
    step, start = 0, time.time()
    model.train()
    for epoch in range(params.xga_epochs):
        for batch in _batch_indices(len(X), params.xga_batch_size, rng):
            x = to_channels_first(X[batch])
            yb = torch.as_tensor(y[batch])
            guide = to_channels_first(guidance[batch]).to(x.dtype)
            total, ce, omega = guided_loss(model, x, yb, guide, params.lambda8)
            _check_finite(total, "XGA", step, dict(ce=ce, omega=omega))
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            log.append({"step": step, "loss": total.item(), "ce": ce.item(), "omega": omega.item(), "epoch": epoch + 1})
            if max_steps and step >= max_steps:
                break
        sched.step()
        if max_steps and step >= max_steps:
            break
    model.eval()
    for p in model.omega_parameters():
        p.requires_grad_(False)
    return PhaseResult(log.rows, step, time.time() - start)


def epoch_means(rows: list, column: str = "loss") -> list:
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(r["epoch"], []).append(r[column])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# -- run directory -------------------------------------------------------------


class RunDirectory:
    """``config.json``, ``checkpoints/``, ``logs/`` and ``reports/`` under one root."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / name

    def log(self, phase: str, k: int) -> Path:
        return self.root / "logs" / f"{phase}_{k}.csv"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def create(self):
        for sub in ("checkpoints", "logs", "reports"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self


def _save(run: Optional[RunDirectory], name: str, module: nn.Module, model: DiagnosticModel, params: HyperParams,
          metrics: Optional[dict] = None, extra: Optional[dict] = None):
    if run is None:
        return None
    spec = model.spec
    save_checkpoint(run.checkpoint(name), module, architecture_id=f"{spec.architecture_id}:{name.split('_')[0]}",
                    input_shape=spec.input_shape, class_count=spec.num_classes, seed=params.seed,
                    metrics=metrics, extra=extra)
    return str(run.checkpoint(name))


# -- iterative scheme ------------------------------------------------------------


PLAIN, XGA_MODE = "plain", "xga"


@dataclass
class IterationState:
    k: int
    encoder_mode: str
    checkpoints: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    checksums: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("iteration index starts at 1")
        expected = PLAIN if self.k == 1 else XGA_MODE
        if self.encoder_mode != expected:
            raise ValueError(f"iteration {self.k} must use the {expected} encoder, got {self.encoder_mode}")


@dataclass
class LearResult:
    history: list
    backbone: DiagnosticModel
    generator: Generator
    discriminator: nn.Module
    xga: XGAModel
    logs: dict = field(default_factory=dict)


def pyramid_encoder(k: int, backbone: DiagnosticModel, xga_model: XGAModel) -> nn.Module:
    """Encoder that feeds the generator at iteration ``k``: plain first, attention-injected after."""
    return backbone if k == 1 else xga_model


def iterate_lear(backbone: DiagnosticModel, X, y, params: HyperParams, n_iters: int,
                 X_val=None, y_val=None, generator: Optional[Generator] = None, discriminator: Optional[nn.Module] = None,
                 xga_model: Optional[XGAModel] = None, run: Optional[RunDirectory] = None,
                 disc_width: float = 1.0) -> LearResult:
    """Alternate Phase 1 and Phase 2 ``n_iters`` times.

    From iteration 2 the generator consumes the attention-injected encoder.
    With ``params.warm_start`` the generator, discriminator and attention
    weights carry over between iterations; otherwise each iteration
    re-initializes them from seeds derived from the iteration index.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    X = check_images(X, backbone.spec.domain)
    y = check_labels(y, backbone.spec.num_classes)
    if X_val is None:
        tr, va = split_validation(len(X), params.seed)
        X, y, X_val, y_val = X[tr], y[tr], X[va], y[va]
    backbone.freeze()
    if run is not None:
        run.create()

    def fresh(k):
        torch.manual_seed(params.seed + 100 * k)
        g = build_generator(backbone, params.generator_norm)
        d = build_discriminator(backbone, width=disc_width)
        return g, d, inject(backbone, params.r, seed=params.seed + 100 * k + 7)

    if generator is None or discriminator is None or xga_model is None:
        g0, d0, a0 = fresh(1)
        generator = generator or g0
        discriminator = discriminator or d0
        xga_model = xga_model or a0
    history, logs = [], {}
    for k in range(1, n_iters + 1):
        if k > 1 and not params.warm_start:
            generator, discriminator, xga_model = fresh(k)
        encoder = pyramid_encoder(k, backbone, xga_model)
        state = IterationState(k, PLAIN if k == 1 else XGA_MODE)

        before = _checksums(theta=backbone, phi=generator, psi=discriminator, omega=xga_model.attention)
        cmg = train_cmg_phase(encoder, generator, discriminator, X, params,
                              log_path=run.log("cmg", k) if run else None, salt=10 * k + 1)
        mid = _checksums(theta=backbone, phi=generator, psi=discriminator, omega=xga_model.attention)
        _assert_unchanged(before, mid, ("theta", "omega"), f"CMG phase {k}")

        xga_res = train_xga_phase(xga_model, generator, X, y, params, pyramid_encoder=encoder,
                                  log_path=run.log("xga", k) if run else None, salt=10 * k + 2)
        after = _checksums(theta=backbone, phi=generator, psi=discriminator, omega=xga_model.attention)
        _assert_unchanged(mid, after, ("theta", "phi", "psi"), f"XGA phase {k}")

        _, acc = evaluate(xga_model, X_val, y_val)
        state.metrics = {"val_acc": acc, "cmg_steps": cmg.steps, "xga_steps": xga_res.steps,
                         "cmg_final_total": cmg.log[-1]["total"] if cmg.log else float("nan"),
                         "xga_final_loss": xga_res.log[-1]["loss"] if xga_res.log else float("nan")}
        state.checksums = {"before": before, "after_cmg": mid, "after_xga": after}
        state.checkpoints = {
            "cmg": _save(run, f"cmg_{k}", generator, backbone, params, state.metrics),
            "disc": _save(run, f"disc_{k}", discriminator, backbone, params),
            "xga": _save(run, f"xga_{k}", xga_model.attention, backbone, params, state.metrics, {"r": params.r}),
        }
        logger.info("iteration %d: val_acc %.4f", k, acc)
        history.append(state)
        logs[k] = {"cmg": cmg.log, "xga": xga_res.log}
    return LearResult(history, backbone, generator, discriminator, xga_model, logs)


# -- augmentation baseline -------------------------------------------------------


@dataclass
class AugmentResult:
    model: DiagnosticModel
    X_synth: np.ndarray
    y_synth: np.ndarray
    history: object
    source_checksum: str


def synthesize(encoder: nn.Module, generator: Generator, X, y, batch_size: int = 64):
    """Transformed images toward every non-ground-truth class: n * (K - 1) samples."""
    base = getattr(encoder, "base", encoder)
    k = base.spec.num_classes
    X = check_images(X, base.spec.domain)
    y = check_labels(y, k)
    dtype = next(base.parameters()).dtype
    eye = torch.eye(k, dtype=dtype)
    xs, ys = [], []
    encoder.eval()
    generator.eval()
    with torch.no_grad():
        for s in range(0, len(X), batch_size):
            x = to_channels_first(X[s:s + batch_size]).to(dtype)
            yb = y[s:s + batch_size]
            taps, _ = _features_and_logits(encoder, x)
            for shift in range(1, k):
                tgt = (yb + shift) % k
                m = generator(taps, eye[torch.as_tensor(tgt)])
                xs.append(to_channels_last(x + m).numpy())
                ys.append(tgt)
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.int64)


def augment_finetune(backbone: DiagnosticModel, generator: Generator, X, y, params: HyperParams,
                     epochs: int = 1, encoder: Optional[nn.Module] = None) -> AugmentResult:
    """Fine-tune a copy of ``backbone`` on the originals plus their counterfactual transforms."""
    source = param_checksum(backbone)
    X = check_images(X, backbone.spec.domain)
    y = check_labels(y, backbone.spec.num_classes)
    X_s, y_s = synthesize(encoder if encoder is not None else backbone, generator, X, y)
    model = copy.deepcopy(backbone)
    for p in model.parameters():
        p.requires_grad_(True)
    ft_params = params.replace(epochs=epochs, decay=1.0)
    model, hist = train_backbone(np.concatenate([X, X_s]), np.concatenate([y, y_s]), model.spec, ft_params,
                                 validation_fraction=0.0, model=model)
    if param_checksum(backbone) != source:
        raise InvariantError("augmentation fine-tune modified the source backbone")
    return AugmentResult(model, X_s, y_s, hist, source)
