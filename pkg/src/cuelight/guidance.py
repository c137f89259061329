"""Content/context descriptions and the batch image-text matching loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .clip import EncoderBackend, ProjectionHead, encode_image, encode_texts
from .errors import DegenerateBatchWarning, InvalidArgument

DEFAULT_LOGIT_SCALE = 100.0


@dataclass(frozen=True)
class InstanceAnnotation:
    bbox: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    category: str
    confidence: float = 1.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise InvalidArgument(f"degenerate bbox {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgument(f"confidence {self.confidence} outside [0, 1]")

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0


@dataclass(frozen=True)
class Description:
    text: str
    kind: str  # "content" or "context"

    @property
    def empty(self) -> bool:
        return not self.text


def build_description(instances, kind: str = "content") -> Description:
    """One comma-separated item per instance, sorted lexicographically."""
    if kind not in ("content", "context"):
        raise InvalidArgument(f"kind must be 'content' or 'context', got {kind!r}")
    return Description(", ".join(sorted(inst.category for inst in instances)), kind)


@dataclass
class SimilarityMatrix:
    values: torch.Tensor  # raw cosines, N x N
    logit_scale: float = DEFAULT_LOGIT_SCALE

    @property
    def logits(self) -> torch.Tensor:
        return self.logit_scale * self.values


def similarity_matrix(images, descriptions, backend: EncoderBackend, head: ProjectionHead | None = None,
                      logit_scale: float = DEFAULT_LOGIT_SCALE) -> SimilarityMatrix:
    """Cosines between every image ``i`` and every description ``j``.

    ``images`` is a ``B x 3 x H x W`` tensor or a list of arrays.
    """
    n = images.shape[0] if isinstance(images, torch.Tensor) else len(images)
    if n != len(descriptions):
        raise InvalidArgument(f"{n} images but {len(descriptions)} descriptions")
    texts = [d.text if isinstance(d, Description) else d for d in descriptions]
    if any(not t for t in texts):
        raise InvalidArgument("empty descriptions must be filtered out before matching")
    img = encode_image(images, backend, head)
    if img.ndim == 1:
        img = img.unsqueeze(0)
    txt = encode_texts(texts, backend, head).to(img.dtype)
    return SimilarityMatrix(img @ txt.T, logit_scale)


def bidirectional_ce(sim: SimilarityMatrix) -> torch.Tensor:
    """Mean of row-wise (image to text) and column-wise (text to image) CE with diagonal targets."""
    logits = sim.logits
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise InvalidArgument(f"similarity matrix must be square, got {tuple(logits.shape)}")
    target = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def _matching_term(images: torch.Tensor, descriptions, backend, head, logit_scale, kind) -> torch.Tensor:
    keep = [i for i, d in enumerate(descriptions) if not d.empty]
    if len(keep) < 2:
        warnings.warn(f"{kind} guidance skipped: {len(keep)} non-empty description(s) in batch", DegenerateBatchWarning)
        return images.new_zeros(())
    sim = similarity_matrix(images[keep], [descriptions[i] for i in keep], backend, head, logit_scale)
    return bidirectional_ce(sim)


def guidance_loss(images: torch.Tensor, content, context, backend: EncoderBackend, heads: dict | None = None,
                  logit_scale: float = DEFAULT_LOGIT_SCALE) -> tuple[torch.Tensor, torch.Tensor]:
    """Content and context matching losses for one batch.

    Members with empty descriptions are dropped from the corresponding
    matrix; a matrix with fewer than two members contributes zero.
    """
    heads = heads or {}
    if not (images.shape[0] == len(content) == len(context)):
        raise InvalidArgument("images, content and context batches must align")
    content_loss = _matching_term(images, content, backend, heads.get("content"), logit_scale, "content")
    context_loss = _matching_term(images, context, backend, heads.get("context"), logit_scale, "context")
    return content_loss, context_loss
