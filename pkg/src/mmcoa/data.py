"""Datasets: a seeded synthetic shape/colour generator and a small registry.

Every dataset is held in memory as a float tensor ``[N, C, H, W]`` in
``[0, 1]`` plus integer labels and class names. Registry entries describe
where the data comes from; :func:`load_dataset` materializes one split.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ._util import atomic_write
from .encoders import DEFAULT_TEMPLATE, PromptSet, Vocabulary, build_prompts, template_words, tokenize
from .seeding import numpy_rng

SHAPES = ("circle", "ring", "square", "frame", "triangle", "diamond", "plus", "cross", "bar", "pillar")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.15, 0.3, 0.9),
    "yellow": (0.9, 0.85, 0.1),
    "cyan": (0.1, 0.8, 0.85),
    "magenta": (0.85, 0.2, 0.8),
    "orange": (0.95, 0.55, 0.1),
    "purple": (0.5, 0.2, 0.7),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
}


class DatasetError(ValueError):
    pass


@dataclass
class ClassificationDataset:
    name: str
    images: torch.Tensor
    labels: torch.Tensor
    class_names: tuple[str, ...]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError("images and labels differ in length")
        if not self.ids:
            self.ids = [f"{self.name}/{i}" for i in range(len(self.labels))]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices: Sequence[int]) -> "ClassificationDataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return ClassificationDataset(self.name, self.images[idx], self.labels[idx], self.class_names,
                                     [self.ids[i] for i in idx.tolist()])

    def prompts(self, template: str = DEFAULT_TEMPLATE) -> PromptSet:
        return build_prompts(self.class_names, template)

    def first_per_class(self, n: int) -> "ClassificationDataset":
        """The first ``n`` examples of every class, in class order."""
        picks = []
        for c in range(self.num_classes):
            rows = (self.labels == c).nonzero().flatten().tolist()[:n]
            picks.extend(rows)
        return self.subset(picks)


# ---------------------------------------------------------------------------
# Synthetic shapes


def shape_mask(shape: str, size: int, cy: float, cx: float, s: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r2 = dy**2 + dx**2
    box = np.maximum(np.abs(dx), np.abs(dy))
    if shape == "circle":
        m = r2 <= s**2
    elif shape == "ring":
        m = (r2 <= s**2) & (r2 >= (s - 3) ** 2)
    elif shape == "square":
        m = box <= 0.8 * s
    elif shape == "frame":
        m = (box <= 0.8 * s) & (box >= 0.8 * s - 2.5)
    elif shape == "triangle":
        m = (dy >= -s) & (dy <= 0.7 * s) & (np.abs(dx) <= (dy + s) * 0.6)
    elif shape == "diamond":
        m = np.abs(dx) + np.abs(dy) <= s
    elif shape == "plus":
        m = ((np.abs(dx) <= 1.5) & (np.abs(dy) <= s)) | ((np.abs(dy) <= 1.5) & (np.abs(dx) <= s))
    elif shape == "cross":
        m = ((np.abs(dx - dy) <= 2) | (np.abs(dx + dy) <= 2)) & (box <= 0.75 * s)
    elif shape == "bar":
        m = (np.abs(dy) <= 2) & (np.abs(dx) <= s)
    elif shape == "pillar":
        m = (np.abs(dx) <= 2) & (np.abs(dy) <= s)
    else:
        raise DatasetError(f"unknown shape {shape!r}")
    return m.astype(np.float64)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parametric image classes.

    ``classes`` lists (shape, colour) pairs; ``None`` in either slot means that
    factor is drawn at random per image and is a nuisance variable.
    """

    classes: tuple[tuple[str | None, str | None], ...]
    class_names: tuple[str, ...]
    size: int = 32
    contrast: tuple[float, float] = (0.35, 0.6)
    noise: float = 0.06
    per_class: tuple[tuple[str, int], ...] = (("train", 500), ("test", 100))

    def count(self, split: str) -> int:
        counts = dict(self.per_class)
        if split not in counts:
            raise DatasetError(f"unknown split {split!r}; available: {sorted(counts)}")
        return counts[split]


def render_image(rng: np.random.Generator, shape: str, color: str, size: int, contrast, noise) -> np.ndarray:
    s = rng.uniform(size * 0.22, size * 0.34)
    cy, cx = rng.uniform(size * 0.38, size * 0.62, size=2)
    mask = shape_mask(shape, size, cy, cx, s)
    background = rng.uniform(0.3, 0.7) + rng.uniform(-0.08, 0.08, size=3)
    alpha = rng.uniform(*contrast)
    rgb = np.asarray(COLORS[color])
    img = background[:, None, None] * (1 - alpha * mask) + rgb[:, None, None] * alpha * mask
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, split: str, seed: int = 0, name: str = "synthetic") -> ClassificationDataset:
    """Deterministic in ``(spec, split, seed)``; exactly ``spec.count(split)`` images per class."""
    n = spec.count(split)
    colors = list(COLORS)
    images = np.empty((n * len(spec.classes), 3, spec.size, spec.size), dtype=np.float32)
    labels = np.empty(n * len(spec.classes), dtype=np.int64)
    row = 0
    for label, (shape, color) in enumerate(spec.classes):
        rng = numpy_rng(seed, f"synthetic/{name}/{split}", label)
        for _ in range(n):
            sh = shape if shape is not None else SHAPES[rng.integers(len(SHAPES))]
            co = color if color is not None else colors[rng.integers(len(colors))]
            images[row] = render_image(rng, sh, co, spec.size, spec.contrast, spec.noise)
            labels[row] = label
            row += 1
    ids = [f"{name}/{split}/{i}" for i in range(len(labels))]
    return ClassificationDataset(name, torch.from_numpy(images), torch.from_numpy(labels), spec.class_names, ids)


SHAPES10 = SyntheticSpec(tuple((s, None) for s in SHAPES), SHAPES)
COLORS10 = SyntheticSpec(tuple((None, c) for c in COLORS), tuple(COLORS))
_COMBOS = [(s, c) for c in ("red", "green", "blue", "yellow") for s in SHAPES[:5]]
SHAPECOLORS20 = SyntheticSpec(tuple(_COMBOS), tuple(f"{c} {s}" for s, c in _COMBOS))


# ---------------------------------------------------------------------------
# Registry


@dataclass(frozen=True)
class DatasetRegistryEntry:
    name: str
    class_names: tuple[str, ...]
    splits: tuple[str, ...]
    loader_kind: str  # builtin-synthetic | builtin-public | directory-of-images | archive
    license_note: str = ""
    source: object = None  # SyntheticSpec, directory path or archive path

    def validate(self) -> list[str]:
        problems = []
        if not self.class_names:
            problems.append("class names are empty")
        if len(set(self.class_names)) != len(self.class_names):
            problems.append("class names are not unique")
        if len(set(self.splits)) != len(self.splits):
            problems.append("split names repeat")
        if self.loader_kind not in ("builtin-synthetic", "builtin-public", "directory-of-images", "archive"):
            problems.append(f"unknown loader kind {self.loader_kind!r}")
        return problems


DIGIT_NAMES = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")

REGISTRY: dict[str, DatasetRegistryEntry] = {
    "shapes10": DatasetRegistryEntry("shapes10", SHAPES10.class_names, ("train", "test"), "builtin-synthetic",
                                     "generated locally; no license restrictions", SHAPES10),
    "colors10": DatasetRegistryEntry("colors10", COLORS10.class_names, ("train", "test"), "builtin-synthetic",
                                     "generated locally; no license restrictions", COLORS10),
    "shapecolors20": DatasetRegistryEntry("shapecolors20", SHAPECOLORS20.class_names, ("train", "test"),
                                          "builtin-synthetic", "generated locally; no license restrictions",
                                          SHAPECOLORS20),
    "digits": DatasetRegistryEntry("digits", DIGIT_NAMES, ("train", "test"), "builtin-public",
                                   "UCI optical handwritten digits as bundled with scikit-learn (CC BY 4.0)"),
}


def register_dataset(entry: DatasetRegistryEntry) -> None:
    problems = entry.validate()
    if problems:
        raise DatasetError(f"invalid registry entry {entry.name!r}: {'; '.join(problems)}")
    REGISTRY[entry.name] = entry


def _load_digits(split: str, size: int = 32, test_fraction: float = 0.2) -> ClassificationDataset:
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = torch.from_numpy(bunch.images.astype(np.float32) / 16.0)[:, None]
    images = torch.nn.functional.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)
    images = images.clamp(0, 1).repeat(1, 3, 1, 1)
    labels = torch.from_numpy(bunch.target.astype(np.int64))
    rng = numpy_rng(0, "digits-split")
    order = rng.permutation(len(labels))
    n_test = int(round(len(labels) * test_fraction))
    rows = np.sort(order[:n_test] if split == "test" else order[n_test:])
    ds = ClassificationDataset("digits", images, labels, DIGIT_NAMES)
    return ds.subset(rows.tolist())


def _load_directory(root: Path, split: str, class_names: Sequence[str], size: int) -> ClassificationDataset:
    from PIL import Image

    images, labels, ids = [], [], []
    for label, name in enumerate(class_names):
        folder = root / split / name
        if not folder.is_dir():
            raise DatasetError(f"missing class folder {folder}")
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            img = Image.open(path).convert("RGB").resize((size, size))
            images.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            labels.append(label)
            ids.append(f"{root.name}/{split}/{name}/{path.name}")
    return ClassificationDataset(root.name, torch.from_numpy(np.stack(images)), torch.tensor(labels),
                                 tuple(class_names), ids)


def _load_archive(path: Path, split: str, name: str) -> ClassificationDataset:
    with np.load(path, allow_pickle=False) as arc:
        images = torch.from_numpy(arc[f"{split}_images"].astype(np.float32))
        labels = torch.from_numpy(arc[f"{split}_labels"].astype(np.int64))
        class_names = tuple(str(c) for c in arc["class_names"])
    return ClassificationDataset(name, images, labels, class_names)


def load_dataset(name: str, split: str, *, seed: int = 0, cache_dir: str | os.PathLike | None = None,
                 size: int = 32) -> ClassificationDataset:
    if name not in REGISTRY:
        raise DatasetError(f"unknown dataset {name!r}; registered: {sorted(REGISTRY)}")
    entry = REGISTRY[name]
    if split not in entry.splits:
        raise DatasetError(f"dataset {name!r} has no split {split!r}")
    if entry.loader_kind == "builtin-synthetic":
        cache = Path(cache_dir) / f"{name}-{split}-{seed}.npz" if cache_dir else None
        if cache is not None and cache.exists():
            with np.load(cache) as arc:
                return ClassificationDataset(name, torch.from_numpy(arc["images"]), torch.from_numpy(arc["labels"]),
                                             entry.class_names, [f"{name}/{split}/{i}" for i in range(len(arc["labels"]))])
        ds = generate_synthetic(entry.source, split, seed, name)
        if cache is not None:
            atomic_write(cache, lambda fh: np.savez(fh, images=ds.images.numpy(), labels=ds.labels.numpy()))
        return ds
    if entry.loader_kind == "builtin-public":
        return _load_digits(split, size)
    if entry.loader_kind == "directory-of-images":
        return _load_directory(Path(entry.source), split, entry.class_names, size)
    return _load_archive(Path(entry.source), split, name)


def build_vocabulary(class_name_sets: Sequence[Sequence[str]], template: str = DEFAULT_TEMPLATE,
                     extra_words: Sequence[str] = ()) -> Vocabulary:
    """Template words, every class-name word, then ``extra_words`` (e.g. substitution candidates)."""
    words = list(template_words(template))
    for names in class_name_sets:
        for n in names:
            words.extend(tokenize(n))
    words.extend(extra_words)
    return Vocabulary(words)


def class_words(class_name_sets: Sequence[Sequence[str]]) -> list[str]:
    out: dict[str, None] = {}
    for names in class_name_sets:
        for n in names:
            for w in tokenize(n):
                out.setdefault(w, None)
    return list(out)


@dataclass
class RetrievalCorpus:
    """Aligned (image, caption) pairs: caption ``i`` describes image ``i``."""

    images: torch.Tensor
    captions: PromptSet
    ids: list[str]

    def __len__(self) -> int:
        return int(self.images.shape[0])


def retrieval_corpus_from(dataset: ClassificationDataset, offset: int = 0,
                          template: str = DEFAULT_TEMPLATE) -> RetrievalCorpus:
    """One image per class (the ``offset``-th of each class) paired with its class prompt."""
    rows = []
    for c in range(dataset.num_classes):
        members = (dataset.labels == c).nonzero().flatten().tolist()
        rows.append(members[offset % len(members)])
    sub = dataset.subset(rows)
    return RetrievalCorpus(sub.images, build_prompts(dataset.class_names, template), sub.ids)
