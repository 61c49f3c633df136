"""Dual-encoder abstraction, toy reference models, prompts and checkpoints.

A dual encoder pairs an image tower and a text tower that map into a shared
``embed_dim``-dimensional space. All similarity computations downstream work
on L2-normalized embeddings, so cosine similarity is a plain dot product.

Images are float tensors ``[B, C, H, W]`` with pixels in ``[0, 1]``. Any
model-internal normalization (mean/std, resizing) happens inside the image
tower, so attack budgets are always expressed in raw pixel units.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._util import TOOL_VERSION, atomic_write, stable_hash

PAD = "<pad>"
UNK = "<unk>"
CLS_PLACEHOLDER = "[CLS]"
DEFAULT_TEMPLATE = "This is a photo of a [CLS]"
DEFAULT_TEMPERATURE = 0.01
CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Word-level vocabulary. Id 0 is padding, id 1 is the unknown word."""

    def __init__(self, words: Iterable[str]):
        seen = {PAD: 0, UNK: 1}
        for word in words:
            word = word.lower()
            if word not in seen:
                seen[word] = len(seen)
        self._index = seen
        self._words = list(seen)

    @property
    def words(self) -> list[str]:
        return list(self._words)

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: object) -> bool:
        return isinstance(word, str) and word.lower() in self._index and word.lower() not in (PAD, UNK)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._words == other._words

    def id(self, word: str) -> int:
        return self._index.get(word.lower(), 1)

    def word(self, idx: int) -> str:
        return self._words[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]


@dataclass(frozen=True)
class PromptSet:
    """One tokenized prompt per class plus the token span of each class name."""

    class_names: tuple[str, ...]
    prompts: tuple[tuple[str, ...], ...]
    class_token_spans: tuple[tuple[int, int], ...]
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if not (len(self.class_names) == len(self.prompts) == len(self.class_token_spans)):
            raise ValueError("PromptSet needs exactly one prompt and one span per class")
        for tokens, (start, end) in zip(self.prompts, self.class_token_spans):
            if not 0 <= start < end <= len(tokens):
                raise ValueError(f"class token span {(start, end)} out of range for prompt {tokens}")

    def __len__(self) -> int:
        return len(self.prompts)

    def texts(self) -> list[str]:
        return [" ".join(p) for p in self.prompts]

    def replace_prompt(self, index: int, tokens: Sequence[str]) -> "PromptSet":
        """Copy with prompt ``index`` swapped for an equal-length token sequence."""
        if len(tokens) != len(self.prompts[index]):
            raise ValueError("replacement prompt must keep the token count")
        prompts = list(self.prompts)
        prompts[index] = tuple(tokens)
        return replace(self, prompts=tuple(prompts))

    def replace_prompts(self, prompts: Sequence[Sequence[str]]) -> "PromptSet":
        out = self
        for i, tokens in enumerate(prompts):
            out = out.replace_prompt(i, tokens)
        return out


def build_prompts(class_names: Sequence[str], template: str = DEFAULT_TEMPLATE) -> PromptSet:
    """Fill ``template`` (placeholder ``[CLS]`` or ``{}``) with each class name."""
    template_tokens = tokenize(template.replace("{}", CLS_PLACEHOLDER))
    placeholder = CLS_PLACEHOLDER.lower()
    if template_tokens.count(placeholder) != 1:
        raise ValueError(f"template must contain exactly one {CLS_PLACEHOLDER} placeholder: {template!r}")
    at = template_tokens.index(placeholder)
    prompts, spans = [], []
    for name in class_names:
        name_tokens = tokenize(name)
        if not name_tokens:
            raise ValueError("class names must be non-empty")
        prompts.append(tuple(template_tokens[:at] + name_tokens + template_tokens[at + 1:]))
        spans.append((at, at + len(name_tokens)))
    return PromptSet(tuple(class_names), tuple(prompts), tuple(spans), template)


def template_words(template: str = DEFAULT_TEMPLATE) -> list[str]:
    return [t for t in tokenize(template.replace("{}", CLS_PLACEHOLDER)) if t != CLS_PLACEHOLDER.lower()]


class DualEncoder(nn.Module):
    """Base class for image/text encoder pairs.

    Subclasses provide ``image_tower`` and ``text_tower`` submodules and
    implement :meth:`encode_image`, :meth:`encode_text` and :meth:`token_ids`.
    The temperature lives in a buffer: it is saved, loaded and interpolated
    with the weights but never receives gradients.
    """

    kind = "abstract"
    resizes_input = False
    image_tower: nn.Module
    text_tower: nn.Module

    def __init__(self, image_shape: tuple[int, int, int], embed_dim: int, temperature: float):
        super().__init__()
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.image_shape = tuple(image_shape)
        self.embed_dim = embed_dim
        self.register_buffer("temperature", torch.tensor(float(temperature)))

    @property
    def vocab(self):
        raise NotImplementedError

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def token_ids(self, sequences: Sequence[Sequence[str]]) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError

    def image_parameters(self) -> list[nn.Parameter]:
        return list(self.image_tower.parameters())

    def text_parameters(self) -> list[nn.Parameter]:
        return list(self.text_tower.parameters())

    @property
    def dtype(self) -> torch.dtype:
        return self.temperature.dtype

    def config_hash(self) -> str:
        return stable_hash(self.config())


def _pad_ids(rows: list[list[int]], max_len: int | None) -> tuple[torch.Tensor, torch.Tensor]:
    width = max((len(r) for r in rows), default=0)
    if max_len is not None and width > max_len:
        raise ShapeError(f"token sequence of length {width} exceeds the model limit {max_len}")
    ids = torch.zeros(len(rows), width, dtype=torch.long)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return ids, ids != 0


class _ImageTower(nn.Module):
    def __init__(self, channels: int, size: int, width: int, hidden: int, embed_dim: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1),
            nn.GELU(),
            nn.AvgPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1),
            nn.GELU(),
            nn.AvgPool2d(2),
            nn.Flatten(),
        )
        self.head = nn.Sequential(
            nn.Linear(2 * width * (size // 4) ** 2, hidden),
            nn.GELU(),
            nn.Linear(hidden, embed_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # fixed pixel standardization, as CLIP does before its vision stem
        return self.head(self.features((x - 0.5) * 4.0))


class _TextTower(nn.Module):
    def __init__(self, vocab_size: int, max_len: int, width: int, embed_dim: int):
        super().__init__()
        self.tokens = nn.Embedding(vocab_size, width)
        self.positions = nn.Embedding(max_len, width)
        self.head = nn.Sequential(nn.Linear(width, width), nn.GELU(), nn.Linear(width, embed_dim))

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1], device=ids.device)
        h = self.tokens(ids) + self.positions(pos)[None]
        m = mask.to(h.dtype)[..., None]
        pooled = (h * m).sum(1) / m.sum(1).clamp(min=1.0)
        return self.head(pooled)


class ToyDualEncoder(DualEncoder):
    """Small conv image tower and position-aware bag-of-words text tower.

    GELU activations keep both towers smooth, which finite-difference gradient
    checks rely on.
    """

    kind = "toy"

    def __init__(
        self,
        vocab: Vocabulary | Sequence[str],
        image_shape: tuple[int, int, int] = (3, 32, 32),
        embed_dim: int = 32,
        width: int = 8,
        hidden: int = 64,
        text_width: int = 32,
        max_len: int = 16,
        temperature: float = DEFAULT_TEMPERATURE,
    ):
        super().__init__(image_shape, embed_dim, temperature)
        self._vocab = vocab if isinstance(vocab, Vocabulary) else Vocabulary(vocab)
        c, h, w = self.image_shape
        if h != w or h % 4:
            raise ShapeError("toy image tower needs square images with side divisible by 4")
        self.max_len = max_len
        self._kwargs = dict(embed_dim=embed_dim, width=width, hidden=hidden, text_width=text_width, max_len=max_len)
        self.image_tower = _ImageTower(c, h, width, hidden, embed_dim)
        self.text_tower = _TextTower(len(self._vocab), max_len, text_width, embed_dim)

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.image_tower(images)

    def encode_text(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.text_tower(ids, mask)

    def token_ids(self, sequences):
        return _pad_ids([self._vocab.encode(s) for s in sequences], self.max_len)

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "vocab": self._vocab.words,
            "image_shape": list(self.image_shape),
            **self._kwargs,
        }


class LinearDualEncoder(DualEncoder):
    """Affine image map and mean-of-token-embeddings text map.

    Gradients are available in closed form, which makes this the reference
    model for checking attack steps against hand-derived formulas.
    """

    kind = "linear"

    def __init__(
        self,
        vocab: Vocabulary | Sequence[str],
        image_shape: tuple[int, int, int] = (3, 8, 8),
        embed_dim: int = 16,
        max_len: int = 16,
        temperature: float = DEFAULT_TEMPERATURE,
        zero_init: bool = False,
    ):
        super().__init__(image_shape, embed_dim, temperature)
        self._vocab = vocab if isinstance(vocab, Vocabulary) else Vocabulary(vocab)
        self.max_len = max_len
        n_pixels = int(torch.tensor(self.image_shape).prod())
        self.image_tower = nn.Sequential(nn.Flatten(), nn.Linear(n_pixels, embed_dim))
        self.text_tower = nn.ModuleDict(
            {"tokens": nn.Embedding(len(self._vocab), embed_dim), "bias": nn.ParameterList([nn.Parameter(torch.zeros(embed_dim))])}
        )
        if zero_init:
            with torch.no_grad():
                self.image_tower[1].weight.zero_()
                self.text_tower["tokens"].weight.zero_()
        self._kwargs = dict(embed_dim=embed_dim, max_len=max_len)

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    @property
    def image_weight(self) -> torch.Tensor:
        return self.image_tower[1].weight

    @property
    def image_bias(self) -> torch.Tensor:
        return self.image_tower[1].bias

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.image_tower(images)

    def encode_text(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.text_tower["tokens"](ids)
        m = mask.to(h.dtype)[..., None]
        return (h * m).sum(1) / m.sum(1).clamp(min=1.0) + self.text_tower["bias"][0]

    def token_ids(self, sequences):
        return _pad_ids([self._vocab.encode(s) for s in sequences], self.max_len)

    def config(self) -> dict:
        return {"kind": self.kind, "vocab": self._vocab.words, "image_shape": list(self.image_shape), **self._kwargs}


CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class _HFVocab:
    def __init__(self, tokenizer):
        self._tokenizer = tokenizer

    def __contains__(self, word: object) -> bool:
        if not isinstance(word, str):
            return False
        ids = self._tokenizer(word, add_special_tokens=False)["input_ids"]
        return bool(ids) and getattr(self._tokenizer, "unk_token_id", None) not in ids


class ClipAdapter(DualEncoder):
    """Backs the dual-encoder contract with a Hugging Face ``CLIPModel``.

    Input images stay in raw ``[0, 1]`` pixel space; resizing and CLIP's
    mean/std normalization are applied inside the image tower so that attack
    budgets keep their pixel meaning. Word-level prompts are joined with spaces
    and re-tokenized with the model's own tokenizer.
    """

    kind = "clip"
    resizes_input = True

    def __init__(self, clip_model: nn.Module, tokenizer, image_size: int = 224, temperature: float | None = None,
                 source: str | None = None):
        if temperature is None:
            temperature = float(1.0 / clip_model.logit_scale.exp().item())
        proj = getattr(clip_model.config, "projection_dim", None)
        super().__init__((3, image_size, image_size), proj, temperature)
        self.clip = clip_model
        self.tokenizer = tokenizer
        self.source = source
        self.register_buffer("pixel_mean", torch.tensor(CLIP_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(CLIP_STD).view(1, 3, 1, 1), persistent=False)

    @classmethod
    def from_pretrained(cls, name: str = "openai/clip-vit-base-patch32", **kwargs) -> "ClipAdapter":
        from transformers import CLIPModel, CLIPTokenizer

        return cls(CLIPModel.from_pretrained(name), CLIPTokenizer.from_pretrained(name), source=name, **kwargs)

    @property
    def image_tower(self) -> nn.Module:  # type: ignore[override]
        return nn.ModuleList([self.clip.vision_model, self.clip.visual_projection])

    @property
    def text_tower(self) -> nn.Module:  # type: ignore[override]
        return nn.ModuleList([self.clip.text_model, self.clip.text_projection])

    @property
    def vocab(self):
        return _HFVocab(self.tokenizer)

    @staticmethod
    def _features(out) -> torch.Tensor:
        if isinstance(out, torch.Tensor):
            return out
        for name in ("image_embeds", "text_embeds", "pooler_output"):
            if getattr(out, name, None) is not None:
                return getattr(out, name)
        raise TypeError(f"cannot extract features from {type(out).__name__}")

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        size = self.image_shape[1:]
        if tuple(images.shape[-2:]) != size:
            images = F.interpolate(images, size=size, mode="bilinear", align_corners=False)
        pixels = (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)
        return self._features(self.clip.get_image_features(pixel_values=pixels))

    def encode_text(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self._features(self.clip.get_text_features(input_ids=ids, attention_mask=mask.long()))

    def token_ids(self, sequences):
        enc = self.tokenizer([" ".join(s) for s in sequences], padding=True, return_tensors="pt")
        return enc["input_ids"], enc["attention_mask"].bool()

    def config(self) -> dict:
        return {"kind": self.kind, "source": self.source, "image_shape": list(self.image_shape)}


MODEL_KINDS: dict[str, type[DualEncoder]] = {"toy": ToyDualEncoder, "linear": LinearDualEncoder}


def model_from_config(config: dict) -> DualEncoder:
    cfg = dict(config)
    kind = cfg.pop("kind")
    if kind == "clip":
        if not cfg.get("source"):
            raise CheckpointError("clip checkpoints need a 'source' model name to rebuild the architecture")
        return ClipAdapter.from_pretrained(cfg["source"])
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    cfg["image_shape"] = tuple(cfg["image_shape"])
    return MODEL_KINDS[kind](**cfg)


def embed_images(model: DualEncoder, images: torch.Tensor) -> torch.Tensor:
    """L2-normalized image embeddings ``[B, d]``; differentiable in pixels and weights."""
    if images.dim() == 3:
        images = images[None]
    expected = model.image_shape if not model.resizes_input else model.image_shape[:1]
    if images.dim() != 4 or tuple(images.shape[1:1 + len(expected)]) != tuple(expected):
        raise ShapeError(f"expected images shaped [B, {', '.join(map(str, model.image_shape))}], got {list(images.shape)}")
    if images.shape[0] == 0:
        raise ShapeError("image batch is empty")
    if images.detach().min() < 0 or images.detach().max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    return F.normalize(model.encode_image(images.to(model.dtype)), dim=-1)


def embed_texts(
    model: DualEncoder,
    texts: PromptSet | Sequence[Sequence[str]] | tuple[torch.Tensor, torch.Tensor] | torch.Tensor,
) -> torch.Tensor:
    """L2-normalized text embeddings ``[N, d]``.

    Accepts a :class:`PromptSet`, a list of word sequences (unknown words map to
    the UNK id), or pre-computed token ids (optionally with a mask). Raw ids
    outside the vocabulary raise :class:`VocabularyError`.
    """
    if isinstance(texts, PromptSet):
        texts = list(texts.prompts)
    if isinstance(texts, torch.Tensor):
        texts = (texts, texts != 0)
    if isinstance(texts, tuple) and len(texts) == 2 and isinstance(texts[0], torch.Tensor):
        ids, mask = texts
        if model.kind != "clip" and ids.numel() and (ids.min() < 0 or ids.max() >= len(model.vocab)):
            raise VocabularyError(f"token id outside vocabulary of size {len(model.vocab)}")
    else:
        if len(texts) == 0:
            return torch.zeros(0, model.embed_dim, dtype=model.dtype)
        ids, mask = model.token_ids(texts)
    if ids.shape[0] == 0:
        return torch.zeros(0, model.embed_dim, dtype=model.dtype)
    return F.normalize(model.encode_text(ids, mask), dim=-1)


def save_checkpoint(model: DualEncoder, path: str | os.PathLike, config_hash: str | None = None,
                    extra: dict | None = None) -> str:
    """Write a versioned checkpoint; returns the config hash stored in it."""
    config = model.config()
    config_hash = config_hash or stable_hash(config)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "tool_version": TOOL_VERSION,
        "config_hash": config_hash,
        "model_config": config,
        "dtype": str(model.dtype).replace("torch.", ""),
        "temperature": float(model.temperature.item()),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write(path, lambda fh: fh.write(buf.getvalue()))
    return config_hash


def read_checkpoint(path: str | os.PathLike) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - torch raises several unrelated types here
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint written by this toolkit")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} has checkpoint format version {payload['format_version']!r}; "
            f"this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload


def load_checkpoint(path: str | os.PathLike) -> DualEncoder:
    payload = read_checkpoint(path)
    model = model_from_config(payload["model_config"])
    model.to(getattr(torch, payload["dtype"]))
    model.load_state_dict(payload["state_dict"], strict=True)
    model.checkpoint_hash = payload["config_hash"]
    return model.eval()
