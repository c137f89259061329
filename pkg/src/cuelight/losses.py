"""Zero-reference losses on ``B x 3 x H x W`` tensors.

Each loss returns a scalar tensor averaged over the batch and is
differentiable with respect to its image or curve-map inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidArgument


@dataclass
class ZeroRefConfig:
    exposure_target: float = 0.6
    exposure_patch: int = 16
    exposure_mode: str = "patch"  # "patch" or "pixel"
    spatial_region: int = 4
    w_exposure: float = 10.0
    w_spatial: float = 1.0
    w_color: float = 5.0
    w_tv: float = 200.0

    def __post_init__(self):
        if not 0.0 < self.exposure_target < 1.0:
            raise InvalidArgument("exposure_target must lie in (0, 1)")
        if self.exposure_patch < 1 or self.spatial_region < 1:
            raise InvalidArgument("patch and region sizes must be >= 1")
        if min(self.w_exposure, self.w_spatial, self.w_color, self.w_tv) < 0:
            raise InvalidArgument("loss weights must be >= 0")
        if self.exposure_mode not in ("patch", "pixel"):
            raise InvalidArgument(f"unknown exposure_mode {self.exposure_mode!r}")


def _batched(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[1] != 3:
        raise InvalidArgument(f"expected a B x 3 x H x W tensor, got {tuple(x.shape)}")
    return x


def exposure_loss(enhanced: torch.Tensor, cfg: ZeroRefConfig | None = None) -> torch.Tensor:
    cfg = cfg or ZeroRefConfig()
    x = _batched(enhanced)
    p = cfg.exposure_patch
    h, w = x.shape[-2:]
    if h < p or w < p:
        raise InvalidArgument(f"{h}x{w} image is smaller than one {p}x{p} exposure patch")
    intensity = x.mean(dim=1, keepdim=True)
    if cfg.exposure_mode == "pixel":
        kept = intensity[..., : (h // p) * p, : (w // p) * p]
        return (kept - cfg.exposure_target).abs().mean()
    return (F.avg_pool2d(intensity, p) - cfg.exposure_target).abs().mean()


def spatial_consistency_loss(enhanced: torch.Tensor, original: torch.Tensor, cfg: ZeroRefConfig | None = None) -> torch.Tensor:
    """Mean over regions of squared differences of neighbour contrasts.

    Images are reduced to region means of channel-mean intensity. Every
    region compares itself with each existing 4-connected neighbour, so an
    adjacent pair contributes once from each side. The sum is divided by the
    number of regions.
    """
    cfg = cfg or ZeroRefConfig()
    enhanced, original = _batched(enhanced), _batched(original)
    if enhanced.shape != original.shape:
        raise InvalidArgument(f"shape mismatch: {tuple(enhanced.shape)} vs {tuple(original.shape)}")
    r = cfg.spatial_region
    if min(enhanced.shape[-2:]) < r:
        raise InvalidArgument(f"image is smaller than one {r}x{r} region")
    e = F.avg_pool2d(enhanced.mean(1, keepdim=True), r)[:, 0]
    o = F.avg_pool2d(original.mean(1, keepdim=True), r)[:, 0]
    horiz = ((e[:, :, 1:] - e[:, :, :-1]).abs() - (o[:, :, 1:] - o[:, :, :-1]).abs()) ** 2
    vert = ((e[:, 1:, :] - e[:, :-1, :]).abs() - (o[:, 1:, :] - o[:, :-1, :]).abs()) ** 2
    k = e.shape[1] * e.shape[2]
    per_image = 2.0 * (horiz.sum(dim=(1, 2)) + vert.sum(dim=(1, 2))) / k
    return per_image.mean()


def color_loss(enhanced: torch.Tensor) -> torch.Tensor:
    x = _batched(enhanced)
    mr, mg, mb = x.mean(dim=(2, 3)).unbind(dim=1)
    return ((mr - mg) ** 2 + (mr - mb) ** 2 + (mg - mb) ** 2).mean()


def tv_loss(params: torch.Tensor) -> torch.Tensor:
    """Smoothness of curve maps shaped ``[B x] N x 3 x H x W``.

    Per iteration and channel: ``(mean|dx| + mean|dy|)^2`` with forward
    differences, summed over channels and averaged over iterations.
    """
    if params.ndim == 4:
        params = params.unsqueeze(0)
    if params.ndim != 5 or params.shape[2] != 3:
        raise InvalidArgument(f"expected B x N x 3 x H x W curve maps, got {tuple(params.shape)}")
    zero = params.new_zeros(params.shape[:3])
    dx = (params[..., :, 1:] - params[..., :, :-1]).abs().mean(dim=(-2, -1)) if params.shape[-1] > 1 else zero
    dy = (params[..., 1:, :] - params[..., :-1, :]).abs().mean(dim=(-2, -1)) if params.shape[-2] > 1 else zero
    return ((dx + dy) ** 2).sum(dim=2).mean()


def zero_reference_terms(enhanced, original, params, cfg: ZeroRefConfig | None = None) -> dict[str, torch.Tensor]:
    cfg = cfg or ZeroRefConfig()
    return {
        "exposure": exposure_loss(enhanced, cfg),
        "spatial": spatial_consistency_loss(enhanced, original, cfg),
        "color": color_loss(enhanced),
        "tv": tv_loss(params),
    }


def weighted_zero_reference(terms: dict[str, torch.Tensor], cfg: ZeroRefConfig) -> torch.Tensor:
    return (
        cfg.w_exposure * terms["exposure"]
        + cfg.w_spatial * terms["spatial"]
        + cfg.w_color * terms["color"]
        + cfg.w_tv * terms["tv"]
    )


def total_zero_reference_loss(enhanced, original, params, cfg: ZeroRefConfig | None = None) -> torch.Tensor:
    cfg = cfg or ZeroRefConfig()
    return weighted_zero_reference(zero_reference_terms(enhanced, original, params, cfg), cfg)
