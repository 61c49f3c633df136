"""Image, text and multimodal attacks against a dual encoder.

Image attacks run signed-gradient ascent in raw pixel space and project back
onto the L-inf ball around the clean image intersected with ``[0, 1]``. Text
attacks greedily substitute tokens to push the prompt embedding away from its
clean embedding. Attacks never modify model parameters or their ``.grad``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Protocol, Sequence

import numpy as np
import torch

from ._util import TOOL_VERSION, atomic_write, stable_hash, write_json
from .encoders import DualEncoder, PromptSet, embed_images, embed_texts
from .losses import similarity_logits, stable_log_softmax
from .seeding import torch_generator


class AttackError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class AdversarialBudget:
    """Image-side and text-side attack constraints (pixel units in [0, 1])."""

    epsilon: float = 1 / 255
    alpha: float = 1 / 255
    steps: int = 100
    norm: Literal["linf", "l2"] = "linf"
    text_budget: int = 1
    candidate_list_length: int = 10
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0 or self.alpha < 0:
            raise ValueError("epsilon and alpha must be nonnegative")
        if self.alpha > self.epsilon:
            raise ValueError(f"alpha ({self.alpha}) must not exceed epsilon ({self.epsilon})")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.text_budget < 0:
            raise ValueError("text_budget must be nonnegative")
        if self.candidate_list_length < 1:
            raise ValueError("candidate_list_length must be at least 1")

    @classmethod
    def zero(cls) -> "AdversarialBudget":
        return cls(epsilon=0.0, alpha=0.0, steps=1, text_budget=0)

    def image_only(self) -> "AdversarialBudget":
        return AdversarialBudget(**{**asdict(self), "text_budget": 0})

    def text_only(self) -> "AdversarialBudget":
        return AdversarialBudget(**{**asdict(self), "epsilon": 0.0, "alpha": 0.0})

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return stable_hash(self.to_dict())


# Attack-time defaults: 10-step PGD while training, 100-step at test time,
# both at step size and radius 1/255; one substituted token from 10 candidates.
TRAIN_BUDGET = AdversarialBudget(epsilon=1 / 255, alpha=1 / 255, steps=10)
TEST_BUDGET = AdversarialBudget(epsilon=1 / 255, alpha=1 / 255, steps=100)
RETRIEVAL_BUDGET = AdversarialBudget(epsilon=2 / 255, alpha=1.25 / 255, steps=10)


@dataclass
class AttackResult:
    adversarial_input: torch.Tensor | tuple[str, ...]
    objective_trace: list[float]
    perturbation_norm: float
    substitutions: list[tuple[int, str, str]] = field(default_factory=list)


@dataclass
class ImageAttackBatch:
    """Batched image attack output; indexing yields per-example AttackResults."""

    adversarial: torch.Tensor  # [B, C, H, W]
    objective_trace: torch.Tensor  # [steps + 1, B]
    perturbation_norm: torch.Tensor  # [B], achieved L-inf distance

    def __len__(self) -> int:
        return self.adversarial.shape[0]

    def __getitem__(self, i: int) -> AttackResult:
        return AttackResult(
            self.adversarial[i],
            self.objective_trace[:, i].tolist(),
            float(self.perturbation_norm[i]),
        )


# ---------------------------------------------------------------------------
# Image attacks


def project_linf(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    return torch.min(torch.max(x_adv, x - epsilon), x + epsilon).clamp(0.0, 1.0)


def _random_start(x: torch.Tensor, epsilon: float, seed: int, example_ids, scale: float | None) -> torch.Tensor:
    """Per-example seeded start: uniform in the ball, or Gaussian of std ``scale``."""
    noise = torch.empty_like(x)
    for row, ex in enumerate(example_ids):
        gen = torch_generator(seed, "pgd-init", int(ex))
        if scale is None:
            sample = torch.rand(x.shape[1:], generator=gen, dtype=x.dtype) * 2 - 1
            noise[row] = sample * epsilon
        else:
            noise[row] = torch.randn(x.shape[1:], generator=gen, dtype=x.dtype) * scale
    return project_linf(x + noise, x, epsilon)


def run_pgd(model: DualEncoder, images: torch.Tensor, objective, budget: AdversarialBudget, *,
            x_init: torch.Tensor | None = None) -> ImageAttackBatch:
    """Signed-gradient ascent on a per-example objective with L-inf projection.

    ``objective(x_adv)`` returns a ``[B]`` loss vector; examples are independent
    so the gradient of its sum yields each example's own gradient.
    """
    if budget.norm != "linf":
        raise NotImplementedError("only L-inf PGD is implemented; 'l2' is a declared placeholder")
    x = images.detach().to(model.dtype)
    x_adv = x.clone() if x_init is None else x_init.detach().clone()
    trace = []
    for step in range(budget.steps):
        x_adv.requires_grad_(True)
        values = objective(x_adv)
        (grad,) = torch.autograd.grad(values.sum(), x_adv)
        if not torch.isfinite(grad).all():
            raise AttackError("non-finite input gradient in PGD", step)
        trace.append(values.detach())
        x_adv = project_linf(x_adv.detach() + budget.alpha * grad.sign(), x, budget.epsilon)
    with torch.no_grad():
        trace.append(objective(x_adv).detach())
    norms = (x_adv - x).abs().flatten(1).max(dim=1).values
    return ImageAttackBatch(x_adv.detach(), torch.stack(trace), norms)


def contrastive_objective(model: DualEncoder, text_embeds: torch.Tensor, labels: torch.Tensor):
    """Per-example cross-entropy of image embeddings against fixed (clean) prompts."""
    text_embeds = text_embeds.detach()
    labels = torch.as_tensor(labels, dtype=torch.long)

    def objective(x_adv):
        log_p = stable_log_softmax(similarity_logits(embed_images(model, x_adv), text_embeds, model.temperature))
        return -log_p.gather(1, labels[:, None]).squeeze(1)

    return objective


def pgd_image_attack(model: DualEncoder, images: torch.Tensor, prompts: PromptSet, labels, budget: AdversarialBudget,
                     *, seed: int = 0, example_ids: Sequence[int] | None = None,
                     text_embeds: torch.Tensor | None = None) -> ImageAttackBatch:
    """PGD on the adversarial-image / clean-text contrastive loss."""
    if text_embeds is None:
        with torch.no_grad():
            text_embeds = embed_texts(model, prompts)
    x_init = None
    if budget.random_start:
        ids = range(images.shape[0]) if example_ids is None else example_ids
        x_init = _random_start(images.detach().to(model.dtype), budget.epsilon, seed, ids, None)
    return run_pgd(model, images, contrastive_objective(model, text_embeds, labels), budget, x_init=x_init)


# ---------------------------------------------------------------------------
# Text attacks


class CandidateProvider(Protocol):
    def candidates(self, prompt: tuple[str, ...], position: int) -> list[str]:
        """Ordered replacement words for ``prompt[position]``, original excluded."""


DEFAULT_DISTRACTORS = ("picture", "image", "snapshot", "drawing", "sketch", "render", "scan", "shot", "view", "still")


def confusables(word: str, limit: int = 12) -> list[str]:
    """Deterministic character-level near-misses of ``word``.

    Plurals, truncations, transpositions, doubled and dropped letters: the kind
    of near-synonym substitutions a masked language model proposes for a noun,
    without needing one.
    """
    w = word.lower()
    out: list[str] = []

    def add(c: str):
        if c and c != w and c not in out and c.isalpha():
            out.append(c)

    add(w + "s")
    add(w[:-1])
    for i in range(len(w) - 1):
        add(w[:i] + w[i + 1] + w[i] + w[i + 2:])
    for i in range(1, len(w)):
        add(w[:i] + w[i] + w[i:])
    for i in range(1, len(w) - 1):
        add(w[:i] + w[i + 1:])
    add(w + "y")
    add("un" + w)
    return out[:limit]


class SubstitutionTable:
    """Word -> ordered replacement list; the default :class:`CandidateProvider`.

    Class-name words map to their confusables and template words to a fixed
    list of distractor nouns. ``vocab`` (anything supporting ``in``) filters out
    replacements the victim model cannot represent.
    """

    def __init__(self, table: dict[str, Sequence[str]], length: int = 10, vocab=None):
        self.table = {k.lower(): [c.lower() for c in v] for k, v in table.items()}
        self.length = length
        self.vocab = vocab

    @classmethod
    def default(cls, class_words: Sequence[str], template_words: Sequence[str] = (), length: int = 10,
                distractors: Sequence[str] = DEFAULT_DISTRACTORS, vocab=None) -> "SubstitutionTable":
        protected = {w.lower() for w in class_words} | {w.lower() for w in template_words}
        table = {}
        for w in class_words:
            table[w.lower()] = [c for c in confusables(w) if c not in protected]
        for w in template_words:
            table.setdefault(w.lower(), [d for d in distractors if d not in protected])
        return cls(table, length, vocab)

    def words(self) -> list[str]:
        seen: dict[str, None] = {}
        for cands in self.table.values():
            for c in cands:
                seen.setdefault(c, None)
        return list(seen)

    def with_vocab(self, vocab, length: int | None = None) -> "SubstitutionTable":
        return SubstitutionTable(self.table, self.length if length is None else length, vocab)

    def candidates(self, prompt: tuple[str, ...], position: int) -> list[str]:
        original = prompt[position].lower()
        out = []
        for c in self.table.get(original, []):
            if c == original or (self.vocab is not None and c not in self.vocab):
                continue
            out.append(c)
            if len(out) == self.length:
                break
        return out


class MaskedLMCandidates:
    """Candidate provider backed by a masked language model (fill-mask).

    The original word is masked and the top predictions that the victim can
    represent are returned, best first.
    """

    def __init__(self, fill_mask=None, model_name: str = "bert-base-uncased", length: int = 10, vocab=None,
                 top_k: int = 50):
        if fill_mask is None:
            from transformers import pipeline

            fill_mask = pipeline("fill-mask", model=model_name)
        self.fill_mask = fill_mask
        self.length = length
        self.vocab = vocab
        self.top_k = top_k

    def candidates(self, prompt: tuple[str, ...], position: int) -> list[str]:
        mask = getattr(getattr(self.fill_mask, "tokenizer", None), "mask_token", "[MASK]")
        masked = " ".join(mask if i == position else t for i, t in enumerate(prompt))
        original = prompt[position].lower()
        out: list[str] = []
        for pred in self.fill_mask(masked, top_k=self.top_k):
            word = pred["token_str"].strip().lower()
            if not word.isalpha() or word == original or word in out:
                continue
            if self.vocab is not None and word not in self.vocab:
                continue
            out.append(word)
            if len(out) == self.length:
                break
        return out


def _attack_positions(prompt, span, widen: bool) -> list[int]:
    if widen or span is None:
        return list(range(len(prompt)))
    start, end = span
    return list(range(start, end))


@torch.no_grad()
def text_attack(model: DualEncoder, prompt: Sequence[str], clean_text_embedding: torch.Tensor | None,
                budget: AdversarialBudget, candidates: CandidateProvider, *,
                span: tuple[int, int] | None = None, widen: bool = False) -> AttackResult:
    """Greedy budgeted token substitution maximizing embedding displacement.

    Each round scores every (position, candidate) pair not yet substituted by
    ``||g(t_a) - g(t)||`` on normalized embeddings and commits the best one,
    ties going to the earliest position, then the earliest candidate. A round
    that cannot increase the displacement ends the attack early.
    """
    current = tuple(prompt)
    if clean_text_embedding is None:
        clean_text_embedding = embed_texts(model, [current])[0]
    clean = clean_text_embedding.reshape(-1).to(model.dtype)
    positions = _attack_positions(current, span, widen)
    trace = [0.0]
    subs: list[tuple[int, str, str]] = []
    used: set[int] = set()
    best_so_far = 0.0
    for _ in range(budget.text_budget):
        pairs = []
        for pos in positions:
            if pos in used:
                continue
            for cand in candidates.candidates(current, pos)[: budget.candidate_list_length]:
                pairs.append((pos, cand))
        if not pairs:
            break
        texts = [current[:pos] + (cand,) + current[pos + 1:] for pos, cand in pairs]
        dists = (embed_texts(model, texts) - clean).norm(dim=1)
        best = int(torch.argmax(dists))
        value = float(dists[best])
        if value < best_so_far:
            break
        pos, cand = pairs[best]
        subs.append((pos, current[pos], cand))
        used.add(pos)
        current = texts[best]
        best_so_far = value
        trace.append(value)
    return AttackResult(current, trace, len(subs), subs)


def attack_prompt_set(model: DualEncoder, prompts: PromptSet, budget: AdversarialBudget,
                      candidates: CandidateProvider, *, widen: bool = False) -> tuple[PromptSet, list[AttackResult]]:
    """Attack every prompt of a prompt set independently."""
    if budget.text_budget == 0 or len(prompts) == 0:
        return prompts, [AttackResult(p, [0.0], 0, []) for p in prompts.prompts]
    with torch.no_grad():
        clean = embed_texts(model, prompts)
    results = [
        text_attack(model, p, clean[i], budget, candidates, span=prompts.class_token_spans[i], widen=widen)
        for i, p in enumerate(prompts.prompts)
    ]
    return prompts.replace_prompts([r.adversarial_input for r in results]), results


# ---------------------------------------------------------------------------
# Multimodal attacks


@dataclass
class MultimodalAttackResult:
    image: ImageAttackBatch
    text: list[AttackResult]
    adversarial_prompts: PromptSet
    stage_order: tuple[str, ...] = ("image", "text")


def multimodal_attack(model: DualEncoder, images: torch.Tensor, prompts: PromptSet, labels,
                      budget: AdversarialBudget, candidates: CandidateProvider, *, seed: int = 0,
                      example_ids=None, widen: bool = False) -> MultimodalAttackResult:
    """Independent image and text attacks against the same frozen parameters."""
    image = pgd_image_attack(model, images, prompts, labels, budget, seed=seed, example_ids=example_ids)
    adv_prompts, text = attack_prompt_set(model, prompts, budget, candidates, widen=widen)
    return MultimodalAttackResult(image, text, adv_prompts)


def _kl_rows(log_p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    return (log_p.exp() * (log_p - log_q)).sum(dim=1)


def co_attack_objective(model: DualEncoder, images: torch.Tensor, clean_text: torch.Tensor, adv_text: torch.Tensor):
    """KL(adv image vs adv texts || clean image vs adv texts)
    + KL(adv image vs clean texts || clean image vs clean texts), per example."""
    tau = model.temperature
    clean_text, adv_text = clean_text.detach(), adv_text.detach()
    with torch.no_grad():
        clean_img = embed_images(model, images)
        ref_adv = stable_log_softmax(similarity_logits(clean_img, adv_text, tau))
        ref_clean = stable_log_softmax(similarity_logits(clean_img, clean_text, tau))

    def objective(x_adv):
        emb = embed_images(model, x_adv)
        term_adv = _kl_rows(stable_log_softmax(similarity_logits(emb, adv_text, tau)), ref_adv)
        term_clean = _kl_rows(stable_log_softmax(similarity_logits(emb, clean_text, tau)), ref_clean)
        return term_adv + term_clean

    return objective


CO_ATTACK_INIT_STD = 1e-3


def co_attack(model: DualEncoder, images: torch.Tensor, prompts: PromptSet, labels, budget: AdversarialBudget,
              candidates: CandidateProvider, *, seed: int = 0, example_ids=None, widen: bool = False,
              init_std: float = CO_ATTACK_INIT_STD) -> MultimodalAttackResult:
    """Text first, then PGD on divergence terms that involve the adversarial text.

    Both divergences vanish, with zero gradient, at the clean image, so the
    image stage starts from a small seeded Gaussian offset.
    """
    adv_prompts, text = attack_prompt_set(model, prompts, budget, candidates, widen=widen)
    with torch.no_grad():
        clean_text = embed_texts(model, prompts)
        adv_text = embed_texts(model, adv_prompts)
    x = images.detach().to(model.dtype)
    ids = range(x.shape[0]) if example_ids is None else example_ids
    x_init = _random_start(x, budget.epsilon, seed, ids, init_std) if init_std > 0 else None
    image = run_pgd(model, x, co_attack_objective(model, x, clean_text, adv_text), budget, x_init=x_init)
    return MultimodalAttackResult(image, text, adv_prompts, ("text", "image"))


# ---------------------------------------------------------------------------
# Corpus export


def export_image_corpus(out_dir: str | os.PathLike, batch: ImageAttackBatch, clean_ids: Sequence,
                        attack_config_hash: str, extra: dict | None = None) -> Path:
    """Write ``images.npy`` (float32, lossless) and ``manifest.json``."""
    out_dir = Path(out_dir)
    arr = batch.adversarial.detach().cpu().to(torch.float32).numpy()
    atomic_write(out_dir / "images.npy", lambda fh: np.save(fh, arr))
    manifest = {
        "tool_version": TOOL_VERSION,
        "attack_config_hash": attack_config_hash,
        "array": "images.npy",
        "entries": [
            {"row": i, "clean_id": cid, "linf": float(batch.perturbation_norm[i]),
             "final_objective": float(batch.objective_trace[-1, i])}
            for i, cid in enumerate(clean_ids)
        ],
        **(extra or {}),
    }
    write_json(out_dir / "manifest.json", manifest)
    return out_dir


def export_text_corpus(out_dir: str | os.PathLike, results: Sequence[AttackResult], prompt_ids: Sequence,
                       attack_config_hash: str) -> Path:
    """Write ``texts.jsonl``: one row per prompt with substitutions and divergence."""
    lines = []
    for pid, r in zip(prompt_ids, results):
        lines.append(json.dumps({
            "prompt_id": pid,
            "adversarial_text": " ".join(r.adversarial_input),
            "substitutions": [list(s) for s in r.substitutions],
            "divergence": r.objective_trace[-1],
            "attack_config_hash": attack_config_hash,
        }, sort_keys=True))
    path = Path(out_dir) / "texts.jsonl"
    atomic_write(path, lambda fh: fh.write("\n".join(lines) + "\n"), mode="w")
    return path
