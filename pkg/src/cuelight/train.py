"""Enhancer training on the combined objective, checkpointing and gradient checks."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io
from .curves import DCENet, apply_curves, build_enhancer
from .data import TrainingPatch, epoch_batches
from .errors import CheckFailure, ConfigError, InvalidArgument, TrainingDiverged
from .guidance import build_description, guidance_loss
from .image import as_image
from .losses import ZeroRefConfig, weighted_zero_reference, zero_reference_terms
from .prior import prior_loss

log = logging.getLogger(__name__)

TERMS = ("exposure", "spatial", "color", "tv", "zero_reference", "prior", "content", "context", "total")


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 200
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip_norm: float = 0.1
    zr: ZeroRefConfig = field(default_factory=ZeroRefConfig)
    lambda_prior: float = 1.0
    lambda_content: float = 1.0
    lambda_context: float = 1.0
    seed: int = 0
    scale_factor: int = 1
    checkpoint_every: int = 1
    max_steps: int | None = None
    channels: int = 32
    n_iterations: int = 8

    def __post_init__(self):
        if isinstance(self.zr, dict):
            self.zr = ZeroRefConfig(**self.zr)
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.grad_clip_norm <= 0:
            raise ConfigError("learning_rate and grad_clip_norm must be > 0, weight_decay >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.checkpoint_every < 1 or self.scale_factor < 1:
            raise ConfigError("batch_size, checkpoint_every and scale_factor must be >= 1, epochs >= 0")
        if min(self.lambda_prior, self.lambda_content, self.lambda_context) < 0:
            raise ConfigError("loss weights must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def as_patch(item) -> TrainingPatch:
    return item if isinstance(item, TrainingPatch) else TrainingPatch(as_image(item))


def batch_tensor(batch, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([as_image(as_patch(p).image) for p in batch]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def total_training_loss(batch, net: DCENet, cfg: TrainConfig, backend=None, prompts=None, heads=None):
    """Combined objective for one batch of patches (or plain images).

    Returns ``(loss, breakdown)`` where ``breakdown`` maps every name in
    ``TERMS`` to a float. Disabled terms are reported as exactly 0.
    """
    batch = [as_patch(p) for p in batch]
    if not batch:
        raise InvalidArgument("batch must be nonempty")
    if cfg.lambda_prior > 0 and (prompts is None or backend is None):
        raise ConfigError("lambda_prior > 0 needs a learned prompt pair and an encoder backend")
    if (cfg.lambda_content > 0 or cfg.lambda_context > 0) and backend is None:
        raise ConfigError("semantic guidance needs an encoder backend")

    dtype = next(net.parameters()).dtype
    x = batch_tensor(batch, dtype)
    params = net(x)
    enhanced = apply_curves(x, params)
    terms = zero_reference_terms(enhanced, x, params, cfg.zr)
    terms["zero_reference"] = weighted_zero_reference(terms, cfg.zr)
    zero = enhanced.new_zeros(())
    terms["prior"] = prior_loss(enhanced, prompts, backend) if cfg.lambda_prior > 0 else zero
    if cfg.lambda_content > 0 or cfg.lambda_context > 0:
        content = [build_description(p.content, "content") for p in batch]
        context = [build_description(p.context, "context") for p in batch]
        terms["content"], terms["context"] = guidance_loss(enhanced, content, context, backend, heads)
    else:
        terms["content"] = terms["context"] = zero
    total = terms["zero_reference"]
    for name, weight in (("prior", cfg.lambda_prior), ("content", cfg.lambda_content), ("context", cfg.lambda_context)):
        if weight > 0:
            total = total + weight * terms[name]
    terms["total"] = total
    return total, {k: float(terms[k].detach()) for k in TERMS}


@dataclass
class TrainResult:
    net: DCENet
    trace: list[dict]
    checkpoints: list[Path] = field(default_factory=list)


def _optimizer(net: DCENet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(net.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def save_checkpoint(path, net: DCENet, opt: torch.optim.Optimizer, epoch: int, trace: list[dict], cfg: TrainConfig) -> Path:
    """Weights, optimizer moments and the trace so far in one container."""
    tensors = {f"net.{k}": v for k, v in net.state_dict().items()}
    for i, state in sorted(opt.state_dict()["state"].items()):
        for key, value in sorted(state.items()):
            tensors[f"opt.{i}.{key}"] = torch.as_tensor(value)
    rows = [[row[k] for k in TERMS] + [row["epoch"]] for row in trace]
    tensors["trace"] = np.array(rows, dtype=np.float64).reshape(-1, len(TERMS) + 1)
    meta = {
        "epoch": epoch,
        "step": len(trace),
        "terms": list(TERMS),
        "config": cfg.to_dict(),
        "channels": net.channels,
        "n_iterations": net.n_iterations,
    }
    return io.save_tensors(path, tensors, meta)


def load_checkpoint(path, cfg: TrainConfig | None = None):
    """Rebuild ``(net, optimizer, epoch, trace)`` from a checkpoint."""
    tensors, meta = io.load_tensors(path)
    cfg = cfg or TrainConfig(**meta["config"])
    net = DCENet(meta["channels"], meta["n_iterations"])
    net.load_state_dict({k[4:]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("net.")})
    opt = _optimizer(net, cfg)
    state = {}
    for name, value in tensors.items():
        if name.startswith("opt."):
            _, i, key = name.split(".", 2)
            state.setdefault(int(i), {})[key] = torch.from_numpy(value.copy())
    opt.load_state_dict({"state": state, "param_groups": opt.state_dict()["param_groups"]})
    terms = meta["terms"]
    trace = [{"step": s + 1, "epoch": int(row[-1]), **dict(zip(terms, map(float, row[:-1])))}
             for s, row in enumerate(tensors["trace"])]
    return net, opt, int(meta["epoch"]), trace


def train_enhancer(dataset, cfg: TrainConfig, backend=None, prompts=None, heads=None, net: DCENet | None = None,
                   checkpoint_dir=None, resume=None) -> TrainResult:
    """AdamW with decoupled weight decay and global-norm clipping.

    One step per batch; batches come from a per-epoch seeded shuffle.
    Every ``checkpoint_every`` epochs a checkpoint is written to
    ``checkpoint_dir``. A non-finite loss writes ``diverged`` there and
    raises ``TrainingDiverged``.
    """
    items = [as_patch(p) for p in dataset]
    if not items:
        raise InvalidArgument("training needs a nonempty dataset")
    if len(items) < cfg.batch_size:
        raise InvalidArgument(f"{len(items)} items cannot fill one batch of {cfg.batch_size}")
    for h in heads.values() if heads else ():
        h.trainable = False
    if resume is not None:
        net, opt, start_epoch, trace = load_checkpoint(resume, cfg)
    else:
        net = net if net is not None else build_enhancer(cfg.seed, cfg.channels, cfg.n_iterations)
        opt = _optimizer(net, cfg)
        start_epoch, trace = 0, []
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    checkpoints = []
    net.train()
    for epoch in range(start_epoch, cfg.epochs):
        for batch in epoch_batches(items, cfg.batch_size, cfg.seed, epoch):
            if cfg.max_steps is not None and len(trace) >= cfg.max_steps:
                break
            loss, breakdown = total_training_loss(batch, net, cfg, backend, prompts, heads)
            if not np.isfinite(breakdown["total"]):
                path = None
                if checkpoint_dir is not None:
                    path = save_checkpoint(checkpoint_dir / "diverged", net, opt, epoch, trace, cfg)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {len(trace) + 1}", path)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip_norm)
            opt.step()
            trace.append({"step": len(trace) + 1, "epoch": epoch + 1, **breakdown})
        done = epoch + 1
        if checkpoint_dir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.epochs):
            checkpoints.append(save_checkpoint(checkpoint_dir / f"epoch_{done:04d}", net, opt, done, trace, cfg))
        if cfg.max_steps is not None and len(trace) >= cfg.max_steps:
            break
    net.eval()
    return TrainResult(net, trace, checkpoints)


def gradient_check(loss_fn, point: torch.Tensor, step: float = 1e-3, n_coords: int = 64, seed: int = 0,
                   skip_kinks: bool = False) -> float:
    """Largest relative gap between autograd and central differences.

    ``loss_fn`` maps a float64 tensor shaped like ``point`` to a scalar.
    Up to ``n_coords`` coordinates are sampled with a seeded generator.

    With ``skip_kinks`` a coordinate is excluded when the analytic slope is
    discontinuous inside the probe interval (an absolute value crossing
    zero, say), where central differences do not estimate the derivative.
    Discontinuity is detected from the autograd slopes at ``x - step``,
    ``x`` and ``x + step``: for a smooth function their second difference
    is ``O(step**2)``, across a kink it is the size of the jump.
    """
    x = point.detach().to(torch.float64).clone()

    def value_and_grad(p):
        p = p.clone().requires_grad_(True)
        value = loss_fn(p)
        if value.ndim != 0 or not torch.isfinite(value):
            raise CheckFailure(f"loss must be a finite scalar, got {value}")
        (g,) = torch.autograd.grad(value, p)
        if not torch.isfinite(g).all():
            raise CheckFailure("analytic gradient is not finite")
        return g.reshape(-1)

    grad = value_and_grad(x)
    scale = float(grad.abs().max())
    flat = x.reshape(-1)
    n = flat.numel()
    coords = np.random.default_rng(seed).choice(n, size=min(n_coords, n), replace=False)
    worst, skipped = 0.0, 0
    for i in coords:
        plus, minus = flat.clone(), flat.clone()
        plus[i] += step
        minus[i] -= step
        with torch.no_grad():
            fp, fm = float(loss_fn(plus.view_as(x))), float(loss_fn(minus.view_as(x)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise CheckFailure(f"non-finite loss while probing coordinate {i}")
        analytic = float(grad[i])
        if skip_kinks:
            gp = float(value_and_grad(plus.view_as(x))[i])
            gm = float(value_and_grad(minus.view_as(x))[i])
            if abs(gp + gm - 2 * analytic) > 1e-3 * max(scale, 1e-12):
                skipped += 1
                continue
        numeric = (fp - fm) / (2 * step)
        denom = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / denom)
    if skipped == len(coords):
        raise CheckFailure("every sampled coordinate straddles a kink")
    if skipped:
        log.info("gradient_check: skipped %d of %d coordinates at kinks", skipped, len(coords))
    return worst
