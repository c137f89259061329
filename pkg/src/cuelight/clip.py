"""Vision-language encoder adapter.

Two backends share one interface:

* ``MockBackend``: deterministic, seeded, CPU-cheap and fully
  differentiable. The image body extracts intensity-grid, contrast and
  high-frequency-energy statistics; the text body is a hashed token table
  with positional weighted pooling.
* ``PretrainedBackend``: a CLIP checkpoint loaded from a local directory
  through ``transformers``.

Encoder bodies are frozen. Only ``ProjectionHead`` parameters (and prompt
tokens owned by the caller) are ever optimized.
"""

from __future__ import annotations

import copy
import hashlib
import os
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io
from .errors import BackendError, InvalidArgument

EMBED_DIM = 512
WEIGHTS_ENV = "CUELIGHT_CLIP_WEIGHTS"
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class ProjectionHead(nn.Module):
    """Linear maps from the image and text feature spaces into the joint space."""

    def __init__(self, image_dim: int, text_dim: int, embed_dim: int = EMBED_DIM, trainable: bool = True):
        super().__init__()
        if embed_dim != EMBED_DIM:
            raise InvalidArgument(f"joint embedding width must be {EMBED_DIM}, got {embed_dim}")
        self.image_proj = nn.Linear(image_dim, embed_dim, bias=False)
        self.text_proj = nn.Linear(text_dim, embed_dim, bias=False)
        self.trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        for p in self.parameters():
            p.requires_grad_(self._trainable)

    def save(self, path, metadata: dict | None = None):
        meta = {"image_dim": self.image_proj.in_features, "text_dim": self.text_proj.in_features}
        meta.update(metadata or {})
        return io.save_tensors(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path, trainable: bool = False) -> "ProjectionHead":
        tensors, meta = io.load_tensors(path)
        head = cls(int(meta["image_dim"]), int(meta["text_dim"]), trainable=trainable)
        head.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
        head.trainable = trainable
        return head


@dataclass(frozen=True)
class Preprocessing:
    size: int | None = 224  # None keeps the native resolution
    mean: tuple = CLIP_MEAN
    std: tuple = CLIP_STD

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self.size is not None and x.shape[-2:] != (self.size, self.size):
            x = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
        mean = x.new_tensor(self.mean).view(1, 3, 1, 1)
        std = x.new_tensor(self.std).view(1, 3, 1, 1)
        return (x - mean) / std


class EncoderBackend:
    kind = "abstract"
    image_dim: int
    text_dim: int
    token_dim: int = EMBED_DIM

    def __init__(self):
        self.preprocess = Preprocessing()
        self._head: ProjectionHead | None = None

    @property
    def identifier(self) -> str:
        return self.kind

    @property
    def head(self) -> ProjectionHead:
        """Frozen projections shipped with the backend."""
        if self._head is None:
            self._head = self._build_head()
            self._head.trainable = False
        return self._head

    def default_head(self, trainable: bool = True) -> ProjectionHead:
        head = copy.deepcopy(self.head)
        head.trainable = trainable
        return head

    def image_features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def tokenize(self, text: str) -> torch.Tensor:
        """Token embeddings ``L x token_dim`` for a description."""
        raise NotImplementedError

    def token_features(self, tokens: torch.Tensor) -> torch.Tensor:
        """Text-body features for ``B x L x token_dim`` continuous tokens."""
        raise NotImplementedError

    def body_state(self) -> dict[str, torch.Tensor]:
        raise NotImplementedError

    def _build_head(self) -> ProjectionHead:
        raise NotImplementedError


def _orthonormal(rows: int, cols: int, gen: torch.Generator) -> torch.Tensor:
    """``rows x cols`` matrix with orthonormal columns (``rows >= cols``) or rows."""
    a = torch.randn(max(rows, cols), min(rows, cols), generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
    return q if rows >= cols else q.T


class MockBackend(EncoderBackend):
    """Seeded stand-in for a CLIP encoder pair."""

    kind = "mock"

    stat_reference = -1.0  # typical log noise ratio of a dark image

    def __init__(self, seed: int = 0, grid: int = 4, vocab_size: int = 4096, stat_gain: float = 2.0):
        super().__init__()
        self.seed = seed
        self.grid = grid
        self.vocab_size = vocab_size
        self.stat_gain = stat_gain
        self.preprocess = Preprocessing(size=None)
        self.image_dim = 3 * grid * grid + 10
        self.text_dim = EMBED_DIM
        gen = torch.Generator().manual_seed(seed)
        self._token_table = torch.randn(vocab_size, EMBED_DIM, generator=gen, dtype=torch.float64) * 0.02
        self._image_proj = _orthonormal(EMBED_DIM, self.image_dim, gen).T.contiguous()
        self._text_proj = _orthonormal(EMBED_DIM, EMBED_DIM, gen).contiguous()

    @property
    def identifier(self) -> str:
        return f"mock-{self.seed}"

    def _build_head(self) -> ProjectionHead:
        head = ProjectionHead(self.image_dim, self.text_dim)
        with torch.no_grad():
            head.image_proj.weight.copy_(self._image_proj.T)
            head.text_proj.weight.copy_(self._text_proj.T)
        return head

    def image_features(self, x: torch.Tensor) -> torch.Tensor:
        # native resolution: resampling would wash out pixel-level noise statistics
        z = self.preprocess(x)
        b = z.shape[0]
        grid = F.adaptive_avg_pool2d(z, self.grid).reshape(b, -1)
        mean = z.mean(dim=(2, 3))
        # noise-to-brightness ratios, measured on the raw [0, 1] input
        level = x.mean(dim=(2, 3)) + 1e-2
        grad = (x[..., :, 1:] - x[..., :, :-1]).abs().mean(dim=(2, 3)) + (x[..., 1:, :] - x[..., :-1, :]).abs().mean(dim=(2, 3))
        lap = (4 * x[..., 1:-1, 1:-1] - x[..., :-2, 1:-1] - x[..., 2:, 1:-1] - x[..., 1:-1, :-2] - x[..., 1:-1, 2:]).abs().mean(dim=(2, 3))
        stats = torch.cat([torch.log(grad / level + 1e-3), torch.log(lap / level + 1e-3)], dim=1)
        ones = z.new_ones(b, 1)
        return torch.cat([grid, mean, self.stat_gain * (stats - self.stat_reference), ones], dim=1)

    def _token_ids(self, text: str) -> list[int]:
        ids = []
        for word in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.blake2b(word.encode(), digest_size=8).digest()
            ids.append(int.from_bytes(digest, "little") % self.vocab_size)
        return ids

    def tokenize(self, text: str) -> torch.Tensor:
        ids = self._token_ids(text)
        if not ids:
            raise InvalidArgument(f"description {text!r} has no tokens")
        return self._token_table[ids]

    def token_features(self, tokens: torch.Tensor) -> torch.Tensor:
        length = tokens.shape[-2]
        pos = torch.arange(length, dtype=tokens.dtype, device=tokens.device)
        weights = (1.0 + 0.5 * torch.sin(0.7 * pos + 0.3)) / length
        return torch.einsum("l,bld->bd", weights, tokens)

    def body_state(self) -> dict[str, torch.Tensor]:
        return {"token_table": self._token_table, "image_proj": self._image_proj, "text_proj": self._text_proj}


class PretrainedBackend(EncoderBackend):
    """CLIP weights from a local ``transformers`` checkpoint directory."""

    kind = "pretrained"

    def __init__(self, path=None):
        super().__init__()
        path = path or os.environ.get(WEIGHTS_ENV)
        if not path:
            raise BackendError(f"no CLIP weights given; pass a path or set {WEIGHTS_ENV}")
        try:
            from transformers import CLIPModel, CLIPTokenizer
            from transformers.masking_utils import create_causal_mask
        except ImportError as exc:  # pragma: no cover
            raise BackendError("the pretrained backend requires `transformers`") from exc
        try:
            self.model = CLIPModel.from_pretrained(path).eval()
            self.tokenizer = CLIPTokenizer.from_pretrained(path)
        except OSError as exc:
            raise BackendError(f"cannot load CLIP weights from {path}: {exc}") from exc
        self._causal_mask = create_causal_mask
        self.path = str(path)
        for p in self.model.parameters():
            p.requires_grad_(False)
        cfg = self.model.config
        self.image_dim = cfg.vision_config.hidden_size
        self.text_dim = cfg.text_config.hidden_size
        self.token_dim = cfg.text_config.hidden_size
        if self.model.config.projection_dim != EMBED_DIM:
            raise BackendError(f"projection width {cfg.projection_dim} != {EMBED_DIM}")
        self.preprocess = Preprocessing(size=cfg.vision_config.image_size)

    @property
    def identifier(self) -> str:
        return f"pretrained:{self.path}"

    def _build_head(self) -> ProjectionHead:
        head = ProjectionHead(self.image_dim, self.text_dim)
        with torch.no_grad():
            head.image_proj.weight.copy_(self.model.visual_projection.weight)
            head.text_proj.weight.copy_(self.model.text_projection.weight)
        return head

    def image_features(self, x: torch.Tensor) -> torch.Tensor:
        dtype = self.model.dtype
        return self.model.vision_model(pixel_values=self.preprocess(x.to(dtype))).pooler_output

    def tokenize(self, text: str) -> torch.Tensor:
        ids = self.tokenizer(text, truncation=True, return_tensors="pt")["input_ids"][0]
        with torch.no_grad():
            return self.model.text_model.embeddings.token_embedding(ids[1:-1])

    def token_features(self, tokens: torch.Tensor) -> torch.Tensor:
        # [SOS] tokens [EOS], pooled at the EOS position
        text = self.model.text_model
        emb = text.embeddings.token_embedding
        b = tokens.shape[0]
        sos = emb.weight[self.tokenizer.bos_token_id].expand(b, 1, -1)
        eos = emb.weight[self.tokenizer.eos_token_id].expand(b, 1, -1)
        seq = torch.cat([sos, tokens.to(emb.weight.dtype), eos], dim=1)
        hidden = text.embeddings(inputs_embeds=seq)
        mask = self._causal_mask(config=text.config, inputs_embeds=hidden, attention_mask=None, past_key_values=None)
        out = text.encoder(inputs_embeds=hidden, attention_mask=mask, is_causal=True).last_hidden_state
        return text.final_layer_norm(out)[:, -1]

    def body_state(self) -> dict[str, torch.Tensor]:
        skip = ("visual_projection", "text_projection")
        return {k: v for k, v in self.model.state_dict().items() if not k.startswith(skip)}


def load_backend(kind: str = "mock", seed: int = 0, path=None) -> EncoderBackend:
    if kind == "mock":
        return MockBackend(seed=seed)
    if kind == "pretrained":
        return PretrainedBackend(path)
    raise BackendError(f"unknown backend kind {kind!r}")


def _image_batch(img, dtype) -> tuple[torch.Tensor, bool]:
    if isinstance(img, torch.Tensor):
        return (img.unsqueeze(0), True) if img.ndim == 3 else (img, False)
    if isinstance(img, (list, tuple)):
        arr = np.stack([np.asarray(i, dtype=np.float64) for i in img])
        return torch.from_numpy(arr.transpose(0, 3, 1, 2)).to(dtype), False
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidArgument(f"expected an H x W x 3 image, got shape {arr.shape}")
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()).unsqueeze(0).to(dtype), True


def _head_dtype(head: ProjectionHead) -> torch.dtype:
    return head.image_proj.weight.dtype


def encode_image(img, backend: EncoderBackend, head: ProjectionHead | None = None) -> torch.Tensor:
    """Unit-norm joint-space embedding(s) of an image or ``B x 3 x H x W`` batch."""
    head = head or backend.head
    x, single = _image_batch(img, _head_dtype(head))
    feats = backend.image_features(x.to(_head_dtype(head))).to(_head_dtype(head))
    emb = F.normalize(head.image_proj(feats), dim=-1)
    return emb[0] if single else emb


def encode_prompt_tokens(tokens: torch.Tensor, backend: EncoderBackend, head: ProjectionHead | None = None) -> torch.Tensor:
    """Embed continuous prompt tokens (``L x 512`` or ``B x L x 512``)."""
    head = head or backend.head
    single = tokens.ndim == 2
    if single:
        tokens = tokens.unsqueeze(0)
    if tokens.ndim != 3 or tokens.shape[-1] != backend.token_dim or tokens.shape[1] < 1:
        raise InvalidArgument(f"prompt tokens must be L x {backend.token_dim} with L >= 1, got {tuple(tokens.shape)}")
    feats = backend.token_features(tokens.to(_head_dtype(head)))
    emb = F.normalize(head.text_proj(feats.to(_head_dtype(head))), dim=-1)
    return emb[0] if single else emb


def encode_text(description: str, backend: EncoderBackend, head: ProjectionHead | None = None) -> torch.Tensor:
    if not isinstance(description, str) or not description.strip():
        raise InvalidArgument("description must be a nonempty string")
    return encode_prompt_tokens(backend.tokenize(description), backend, head)


def encode_texts(descriptions, backend: EncoderBackend, head: ProjectionHead | None = None) -> torch.Tensor:
    return torch.stack([encode_text(d, backend, head) for d in descriptions])


@dataclass
class FineTuneConfig:
    steps: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    logit_scale: float = 100.0
    seed: int = 0
    tune: str = "both"  # "both", "image" or "text"


def _features(items, backend: EncoderBackend, dtype) -> torch.Tensor:
    with torch.no_grad():
        if all(isinstance(i, str) for i in items):
            return torch.cat([backend.token_features(backend.tokenize(i).unsqueeze(0)) for i in items]).to(dtype)
        x, _ = _image_batch(list(items), dtype)
        return backend.image_features(x).to(dtype)


def matching_accuracy(head: ProjectionHead, backend: EncoderBackend, pairs) -> float:
    """Fraction of images whose nearest distinct description is their own."""
    images, texts = zip(*pairs)
    classes = sorted(set(texts))
    dtype = _head_dtype(head)
    with torch.no_grad():
        img = F.normalize(head.image_proj(_features(images, backend, dtype)), dim=-1)
        txt = F.normalize(head.text_proj(_features(classes, backend, dtype)), dim=-1)
        pred = (img @ txt.T).argmax(dim=1)
    target = torch.tensor([classes.index(t) for t in texts])
    return float((pred == target).double().mean())


def fine_tune_projection(head: ProjectionHead, pairs, backend: EncoderBackend, task: str = "content",
                         config: FineTuneConfig | None = None) -> ProjectionHead:
    """Fit a copy of ``head`` to match images with their descriptions.

    ``pairs`` is a sequence of ``(image, description)``. Batches are scored
    with the symmetric image/text cross-entropy; the encoder body never
    changes. Returns the updated copy.
    """
    from .guidance import SimilarityMatrix, bidirectional_ce

    if task not in ("content", "context"):
        raise InvalidArgument(f"task must be 'content' or 'context', got {task!r}")
    if not pairs:
        raise InvalidArgument("fine-tuning needs a nonempty dataset")
    config = config or FineTuneConfig()
    tuned = copy.deepcopy(head)
    tuned.trainable = True
    if config.tune == "image":
        tuned.text_proj.weight.requires_grad_(False)
    elif config.tune == "text":
        tuned.image_proj.weight.requires_grad_(False)
    if config.steps == 0:
        return tuned

    dtype = _head_dtype(tuned)
    images, texts = zip(*pairs)
    img_feats = _features(images, backend, dtype)
    txt_feats = _features(texts, backend, dtype)
    params = [p for p in tuned.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(pairs)
    bs = min(config.batch_size, n)
    for _ in range(config.steps):
        idx = torch.from_numpy(rng.permutation(n)[:bs])
        img = F.normalize(tuned.image_proj(img_feats[idx]), dim=-1)
        txt = F.normalize(tuned.text_proj(txt_feats[idx]), dim=-1)
        loss = bidirectional_ce(SimilarityMatrix(img @ txt.T, config.logit_scale))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return tuned
