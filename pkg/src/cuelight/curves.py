"""Curve-parameter estimator and the iterative quadratic enhancement curve."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io
from .errors import InvalidArgument, InvalidModel
from .image import as_image, bilinear, resize_bilinear, to_tensor

MIN_SIZE = 8
CHECKPOINT_VERSION = 1


class DCENet(nn.Module):
    """Seven 3x3 conv layers with mirrored skip concatenations and a tanh head.

    ``forward`` maps a ``B x 3 x H x W`` batch to curve maps of shape
    ``B x n_iterations x 3 x H x W`` with values in ``[-1, 1]``.
    """

    def __init__(self, channels: int = 32, n_iterations: int = 8):
        super().__init__()
        if channels < 1 or n_iterations < 1:
            raise InvalidModel("channels and n_iterations must be positive")
        self.channels = channels
        self.n_iterations = n_iterations
        c = channels
        self.conv1 = nn.Conv2d(3, c, 3, 1, 1)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1)
        self.conv3 = nn.Conv2d(c, c, 3, 1, 1)
        self.conv4 = nn.Conv2d(c, c, 3, 1, 1)
        self.conv5 = nn.Conv2d(2 * c, c, 3, 1, 1)
        self.conv6 = nn.Conv2d(2 * c, c, 3, 1, 1)
        self.conv7 = nn.Conv2d(2 * c, 3 * n_iterations, 3, 1, 1)

    def reset_parameters(self, seed: int = 0) -> "DCENet":
        """Fan-in scaled Gaussian init; the head starts at zero (identity curves)."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.convs()[:-1]:
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            self.conv7.weight.zero_()
            self.conv7.bias.zero_()
        return self

    def convs(self) -> list[nn.Conv2d]:
        return [self.conv1, self.conv2, self.conv3, self.conv4, self.conv5, self.conv6, self.conv7]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x1 = F.relu(self.conv1(x))
        x2 = F.relu(self.conv2(x1))
        x3 = F.relu(self.conv3(x2))
        x4 = F.relu(self.conv4(x3))
        x5 = F.relu(self.conv5(torch.cat([x3, x4], 1)))
        x6 = F.relu(self.conv6(torch.cat([x2, x5], 1)))
        a = torch.tanh(self.conv7(torch.cat([x1, x6], 1)))
        b, _, h, w = a.shape
        return a.view(b, self.n_iterations, 3, h, w)


def build_enhancer(seed: int = 0, channels: int = 32, n_iterations: int = 8) -> DCENet:
    return DCENet(channels, n_iterations).reset_parameters(seed)


def _check_net(net: DCENet) -> None:
    if net.conv7.out_channels != 3 * net.n_iterations:
        raise InvalidModel(
            f"head emits {net.conv7.out_channels} channels, expected {3 * net.n_iterations}"
        )
    for name, p in net.named_parameters():
        if not torch.isfinite(p).all():
            raise InvalidModel(f"parameter {name} is not finite")


def estimate_curves(img, net: DCENet) -> np.ndarray:
    """Curve maps of shape ``n_iterations x 3 x H x W`` for one image."""
    img = as_image(img)
    if min(img.shape[:2]) < MIN_SIZE:
        raise InvalidArgument(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {img.shape[:2]}")
    _check_net(net)
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        a = net(to_tensor(img, dtype))
    return a[0].to(torch.float64).numpy()


def apply_curves(x, params):
    """Apply ``LE <- LE + a * LE * (1 - LE)`` once per iteration map.

    ``x`` is either an ``H x W x 3`` image with ``params`` of shape
    ``n_iterations x 3 x H x W``, or a ``B x 3 x H x W`` tensor with
    ``params`` of shape ``B x n_iterations x 3 x H x W``.
    """
    image_input = isinstance(x, np.ndarray) and x.ndim == 3
    if image_input:
        x = as_image(x).transpose(2, 0, 1)
    if tuple(x.shape[-3:]) != tuple(params.shape[-3:]) or tuple(x.shape[:-3]) != tuple(params.shape[:-4]):
        raise InvalidArgument(f"curve maps {tuple(params.shape)} do not match image {tuple(x.shape)}")
    out = x
    for n in range(params.shape[-4]):
        a = params[..., n, :, :, :]
        out = out + a * out * (1 - out)
    return out.transpose(1, 2, 0) if image_input else out


def upsample_curves(params: np.ndarray, h: int, w: int) -> np.ndarray:
    n = params.shape[0]
    stacked = params.reshape(n * 3, *params.shape[2:]).transpose(1, 2, 0)
    up = bilinear(stacked, h, w).transpose(2, 0, 1).reshape(n, 3, h, w)
    return np.clip(up, -1.0, 1.0)


def enhance(img, net: DCENet, scale: int = 1) -> np.ndarray:
    """Enhance one image, estimating curves at ``1/scale`` resolution."""
    img = as_image(img)
    if scale < 1:
        raise InvalidArgument(f"scale must be >= 1, got {scale}")
    h, w = img.shape[:2]
    if scale == 1:
        params = estimate_curves(img, net)
    else:
        if h // scale < MIN_SIZE or w // scale < MIN_SIZE:
            raise InvalidArgument(f"{h}x{w} image is too small for scale {scale}")
        small = resize_bilinear(img, h // scale, w // scale)
        params = upsample_curves(estimate_curves(small, net), h, w)
    return np.clip(apply_curves(img, params), 0.0, 1.0)


def mac_breakdown(h: int, w: int, scale: int = 1, channels: int = 32, n_iterations: int = 8) -> dict[str, int]:
    """Multiply-accumulate counts: estimator at reduced size, curves at full size.

    Conv layers cost ``C_in * C_out * 9`` MACs per output pixel (biases are
    not counted); one curve step costs two MACs per pixel per channel.
    """
    if h < 1 or w < 1 or scale < 1:
        raise InvalidArgument("h, w and scale must be positive")
    hs, ws = max(h // scale, 1), max(w // scale, 1)
    c = channels
    layers = [(3, c), (c, c), (c, c), (c, c), (2 * c, c), (2 * c, c), (2 * c, 3 * n_iterations)]
    estimator = sum(cin * cout * 9 for cin, cout in layers) * hs * ws
    curve = 2 * 3 * n_iterations * h * w
    return {"estimator": estimator, "curve": curve, "total": estimator + curve}


def count_macs(h: int, w: int, scale: int = 1, net: DCENet | None = None, **shape) -> int:
    if net is not None:
        shape = {"channels": net.channels, "n_iterations": net.n_iterations}
    return mac_breakdown(h, w, scale, **shape)["total"]


def save_enhancer(path, net: DCENet, extra: dict | None = None):
    meta = {"n_iterations": net.n_iterations, "channels": net.channels, "version": CHECKPOINT_VERSION}
    meta.update(extra or {})
    return io.save_tensors(path, net.state_dict(), meta)


def load_enhancer(path) -> DCENet:
    tensors, meta = io.load_tensors(path)
    try:
        net = DCENet(int(meta["channels"]), int(meta["n_iterations"]))
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    except (KeyError, RuntimeError) as exc:
        raise InvalidModel(f"cannot load enhancer from {path}: {exc}") from exc
    return net
