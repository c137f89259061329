"""Learned image prior: a positive/negative prompt pair trained to tell
block-averaged (denoised proxy) images from strided (noise-preserving)
samples of the same low-light input."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch

from . import io
from .clip import EMBED_DIM, EncoderBackend, encode_image, encode_prompt_tokens
from .errors import InvalidArgument
from .image import PhotometricParams, as_image, avg_pool, photometric_augment, subsample

POSITIVE, NEGATIVE = 0, 1


@dataclass
class PromptPair:
    positive: torch.Tensor  # n_tokens x 512
    negative: torch.Tensor
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.positive.shape != self.negative.shape:
            raise InvalidArgument("positive and negative prompts must share a shape")

    @property
    def n_tokens(self) -> int:
        return self.positive.shape[0]

    def swapped(self) -> "PromptPair":
        return PromptPair(self.negative, self.positive, dict(self.metadata))

    def save(self, path):
        meta = {"n_tokens": self.n_tokens, **self.metadata}
        return io.save_tensors(path, {"positive": self.positive, "negative": self.negative}, meta)

    @classmethod
    def load(cls, path) -> "PromptPair":
        tensors, meta = io.load_tensors(path)
        return cls(torch.from_numpy(tensors["positive"].copy()), torch.from_numpy(tensors["negative"].copy()), meta)


@dataclass
class PriorSample:
    image: np.ndarray
    label: int  # POSITIVE (0) or NEGATIVE (1)

    def __post_init__(self):
        if self.label not in (POSITIVE, NEGATIVE):
            raise InvalidArgument(f"label must be 0 or 1, got {self.label}")


@dataclass
class PriorConfig:
    scale: int = 4
    n_tokens: int = 16
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    init_std: float = 0.02
    seed: int = 0
    brightness: tuple = (0.7, 1.3)
    contrast: tuple = (0.7, 1.3)
    hue: tuple = (-18.0, 18.0)

    def __post_init__(self):
        if self.scale < 2:
            raise InvalidArgument("sampling scale must be >= 2")
        if self.n_tokens < 1 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgument("n_tokens and batch_size must be >= 1, epochs >= 0")


def synthesize_pair(img, cfg: PriorConfig, rng: np.random.Generator) -> tuple[PriorSample, PriorSample]:
    img = as_image(img)
    s = cfg.scale
    h, w = img.shape[:2]
    if h < s or w < s:
        raise InvalidArgument(f"{h}x{w} image is smaller than the sampling scale {s}")
    params = PhotometricParams.sample(rng, cfg.brightness, cfg.contrast, cfg.hue)
    augmented = photometric_augment(img, params)
    offset = (int(rng.integers(s)), int(rng.integers(s)))
    # crop so the strided sample has exactly floor(H/s) x floor(W/s) pixels
    cropped = augmented[: (h // s) * s, : (w // s) * s]
    return PriorSample(avg_pool(cropped, s), POSITIVE), PriorSample(subsample(cropped, s, offset), NEGATIVE)


def init_prompt_pair(cfg: PriorConfig, token_dim: int = EMBED_DIM, dtype=torch.float32) -> PromptPair:
    gen = torch.Generator().manual_seed(cfg.seed)
    shape = (cfg.n_tokens, token_dim)
    pos = torch.randn(shape, generator=gen, dtype=torch.float64) * cfg.init_std
    neg = torch.randn(shape, generator=gen, dtype=torch.float64) * cfg.init_std
    return PromptPair(pos.to(dtype), neg.to(dtype), {"seed": cfg.seed})


def positive_probability(image_emb: torch.Tensor, pos_emb: torch.Tensor, neg_emb: torch.Tensor) -> torch.Tensor:
    """Softmax weight of the positive prompt over raw cosine similarities."""
    cos = torch.stack([image_emb @ pos_emb, image_emb @ neg_emb], dim=-1)
    return torch.softmax(cos, dim=-1)[..., 0]


def _prompt_embeddings(prompts: PromptPair, backend: EncoderBackend, head=None):
    return encode_prompt_tokens(prompts.positive, backend, head), encode_prompt_tokens(prompts.negative, backend, head)


def prompt_probability(img, prompts: PromptPair, backend: EncoderBackend, head=None) -> torch.Tensor:
    """Probability that ``img`` (array, or ``B x 3 x H x W`` tensor) matches the positive prompt."""
    pos, neg = _prompt_embeddings(prompts, backend, head)
    emb = encode_image(img, backend, head).to(pos.dtype)
    return positive_probability(emb, pos, neg)


def true_class_nll(p_positive: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy pushing each sample toward its own class."""
    # select rather than weight, so a certain prediction never multiplies 0 by -inf
    true_class = torch.where(labels.to(torch.bool), 1 - p_positive, p_positive)
    return -torch.log(true_class).mean()


def prompt_init_loss(batch, prompts: PromptPair, backend: EncoderBackend, head=None) -> torch.Tensor:
    if not batch:
        raise InvalidArgument("prompt_init_loss needs a nonempty batch")
    pos, neg = _prompt_embeddings(prompts, backend, head)
    emb = torch.stack([encode_image(s.image, backend, head) for s in batch]).to(pos.dtype)
    labels = torch.tensor([s.label for s in batch])
    return true_class_nll(positive_probability(emb, pos, neg), labels)


def prior_loss(enhanced, prompts: PromptPair, backend: EncoderBackend, head=None) -> torch.Tensor:
    """``-log p(positive)`` averaged over a batch of enhanced images."""
    return -torch.log(prompt_probability(enhanced, prompts, backend, head)).mean()


def _embed_samples(samples, backend: EncoderBackend, chunk: int = 64) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            out.append(encode_image([s.image for s in samples[i : i + chunk]], backend))
    return torch.cat(out)


def classification_accuracy(prompts: PromptPair, samples, backend: EncoderBackend) -> float:
    with torch.no_grad():
        pos, neg = _prompt_embeddings(prompts, backend)
        p = positive_probability(_embed_samples(samples, backend).to(pos.dtype), pos, neg)
    predicted = (p < 0.5).long()
    labels = torch.tensor([s.label for s in samples])
    return float((predicted == labels).double().mean())


def learn_prompt_pair(images, cfg: PriorConfig, backend: EncoderBackend) -> tuple[PromptPair, list[float]]:
    """Optimize a seeded prompt pair on synthesized positive/negative samples.

    Returns the pair and the per-epoch mean training loss.
    """
    images = list(images)
    if not images:
        raise InvalidArgument("prompt learning needs at least one image")
    prompts = init_prompt_pair(cfg, backend.token_dim)
    prompts.metadata.update({"backend": backend.identifier, "config": _jsonable(cfg)})
    pos = prompts.positive.clone().requires_grad_(True)
    neg = prompts.negative.clone().requires_grad_(True)
    opt = torch.optim.Adam([pos, neg], lr=cfg.learning_rate)
    steps_per_epoch = -(-2 * len(images) // cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs * steps_per_epoch, 1))
    trace = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        samples = [s for img in images for s in synthesize_pair(img, cfg, rng)]
        emb = _embed_samples(samples, backend)
        labels = torch.tensor([s.label for s in samples])
        order = torch.from_numpy(rng.permutation(len(samples)))
        losses = []
        for start in range(0, len(samples), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            pe = encode_prompt_tokens(pos, backend)
            ne = encode_prompt_tokens(neg, backend)
            loss = true_class_nll(positive_probability(emb[idx].to(pe.dtype), pe, ne), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        trace.append(float(np.mean(losses)))
    return PromptPair(pos.detach(), neg.detach(), prompts.metadata), trace


def _jsonable(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}
