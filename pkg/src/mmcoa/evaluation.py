"""Evaluation protocols: robust/clean accuracy, zero-shot transfer, weight
interpolation sweeps, clean-vs-adversarial feature similarity and retrieval
recall under attack.

Attacks are always generated against the model being evaluated (white-box).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from ._util import TOOL_VERSION, atomic_write, stable_hash, write_json, write_text
from .attacks import (
    AdversarialBudget,
    CandidateProvider,
    attack_prompt_set,
    co_attack,
    pgd_image_attack,
)
from .data import ClassificationDataset, RetrievalCorpus
from .encoders import DEFAULT_TEMPLATE, DualEncoder, PromptSet, build_prompts, embed_images, embed_texts
from .losses import predict_from_embeddings

ATTACK_TYPES = ("clean", "image", "text", "multimodal", "co-attack")
RECALL_KS = (1, 5, 10)


class ProtocolError(ValueError):
    pass


class MissingPromptSetError(ProtocolError):
    pass


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRow:
    dataset: str
    attack: str
    accuracy: float
    n: int
    seed: int
    budget: dict


@dataclass
class EvalReport:
    protocol: str
    rows: list[EvalRow]
    config_hash: str = ""
    metadata: dict = field(default_factory=dict)

    def accuracy(self, dataset: str, attack: str) -> float:
        for r in self.rows:
            if r.dataset == dataset and r.attack == attack:
                return r.accuracy
        raise KeyError((dataset, attack))

    def datasets(self) -> list[str]:
        return list(dict.fromkeys(r.dataset for r in self.rows))

    def attacks(self) -> list[str]:
        return list(dict.fromkeys(r.attack for r in self.rows))

    def average(self, attack: str) -> float:
        """Unweighted mean over every dataset row (source included) for one attack."""
        vals = [r.accuracy for r in self.rows if r.attack == attack]
        return sum(vals) / len(vals)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "config_hash": self.config_hash,
            "tool_version": TOOL_VERSION,
            "metadata": self.metadata,
            "rows": [asdict(r) for r in self.rows],
            "average": {a: self.average(a) for a in self.attacks()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalReport":
        return cls(payload["protocol"], [EvalRow(**r) for r in payload["rows"]], payload.get("config_hash", ""),
                   payload.get("metadata", {}))

    def save(self, path: str | os.PathLike) -> Path:
        return write_json(path, self.to_dict())


def _check_prompts(dataset: ClassificationDataset, prompts: PromptSet) -> None:
    if len(prompts) != dataset.num_classes or tuple(prompts.class_names) != tuple(dataset.class_names):
        raise ProtocolError(
            f"prompt set classes {list(prompts.class_names)} do not match dataset {dataset.name!r} "
            f"classes {list(dataset.class_names)}"
        )


@torch.no_grad()
def _predict(model, images, text_embeds, batch_size):
    preds = []
    for start in range(0, images.shape[0], batch_size):
        emb = embed_images(model, images[start:start + batch_size])
        preds.append(predict_from_embeddings(emb, text_embeds, model.temperature)[0])
    return torch.cat(preds)


def adversarial_images(model, dataset, prompts, budget, *, seed=0, batch_size=256) -> torch.Tensor:
    out = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        ids = list(range(start, min(start + batch_size, len(dataset))))
        out.append(pgd_image_attack(model, dataset.images[sl], prompts, dataset.labels[sl], budget,
                                    seed=seed, example_ids=ids).adversarial)
    return torch.cat(out)


def evaluate(model: DualEncoder, dataset: ClassificationDataset, prompts: PromptSet, attack_types: Sequence[str],
             budget: AdversarialBudget, candidates: CandidateProvider | None = None, *, seed: int = 0,
             batch_size: int = 256, widen: bool = False) -> list[EvalRow]:
    """Accuracy rows for several attack types, sharing the image attack between
    the image and multimodal rows (the two attacks are independent)."""
    _check_prompts(dataset, prompts)
    for a in attack_types:
        if a not in ATTACK_TYPES:
            raise ProtocolError(f"unknown attack type {a!r}")
    needs_text = {"text", "multimodal", "co-attack"} & set(attack_types)
    if needs_text and budget.text_budget > 0 and candidates is None:
        raise ProtocolError("text attacks need a candidate provider")
    model.eval()
    with torch.no_grad():
        clean_text = embed_texts(model, prompts)
    adv_images = adv_text = None
    if {"image", "multimodal"} & set(attack_types) and budget.epsilon > 0:
        adv_images = adversarial_images(model, dataset, prompts, budget, seed=seed, batch_size=batch_size)
    if {"text", "multimodal"} & set(attack_types) and budget.text_budget > 0:
        adv_prompts, _ = attack_prompt_set(model, prompts, budget, candidates, widen=widen)
        with torch.no_grad():
            adv_text = embed_texts(model, adv_prompts)
    images = dataset.images.to(model.dtype)
    labels = dataset.labels
    rows = []
    for attack in attack_types:
        if attack == "clean":
            x, t, used = images, clean_text, AdversarialBudget.zero()
        elif attack == "image":
            x, t, used = (adv_images if adv_images is not None else images), clean_text, budget.image_only()
        elif attack == "text":
            x, t, used = images, (adv_text if adv_text is not None else clean_text), budget.text_only()
        elif attack == "multimodal":
            x = adv_images if adv_images is not None else images
            t, used = (adv_text if adv_text is not None else clean_text), budget
        else:
            preds = []
            for start in range(0, len(dataset), batch_size):
                sl = slice(start, start + batch_size)
                ids = list(range(start, min(start + batch_size, len(dataset))))
                res = co_attack(model, images[sl], prompts, labels[sl], budget, candidates, seed=seed,
                                example_ids=ids, widen=widen)
                with torch.no_grad():
                    t_adv = embed_texts(model, res.adversarial_prompts)
                preds.append(_predict(model, res.image.adversarial, t_adv, batch_size))
            acc = float((torch.cat(preds) == labels).double().mean() * 100)
            rows.append(EvalRow(dataset.name, attack, acc, len(dataset), seed, budget.to_dict()))
            continue
        acc = float((_predict(model, x, t, batch_size) == labels).double().mean() * 100)
        rows.append(EvalRow(dataset.name, attack, acc, len(dataset), seed, used.to_dict()))
    return rows


def eval_robust_accuracy(model, dataset, prompts, attack_type: str, budget: AdversarialBudget,
                         candidates: CandidateProvider | None = None, *, seed: int = 0,
                         batch_size: int = 256) -> EvalRow:
    return evaluate(model, dataset, prompts, [attack_type], budget, candidates, seed=seed, batch_size=batch_size)[0]


def eval_in_distribution(model, dataset, prompts, attack_types, budget, candidates=None, *, seed=0,
                         config_hash: str = "", batch_size: int = 256) -> EvalReport:
    rows = evaluate(model, dataset, prompts, attack_types, budget, candidates, seed=seed, batch_size=batch_size)
    return EvalReport("in-distribution", rows, config_hash, {"budget": budget.to_dict()})


def eval_zero_shot_protocol(model, source: ClassificationDataset, targets: Sequence[ClassificationDataset],
                            attack_types: Sequence[str] | str, budget: AdversarialBudget,
                            candidates: CandidateProvider | None = None, *,
                            prompt_sets: Mapping[str, PromptSet] | None = None, template: str = DEFAULT_TEMPLATE,
                            seed: int = 0, config_hash: str = "", batch_size: int = 256) -> EvalReport:
    """Source row first, then one row per target, each with its own prompt set.

    Without ``prompt_sets`` every dataset's prompts are built from its class
    names and ``template``; with it, every dataset must have an entry.
    """
    if isinstance(attack_types, str):
        attack_types = [attack_types]
    rows = []
    for ds in [source, *targets]:
        if prompt_sets is None:
            prompts = build_prompts(ds.class_names, template)
        elif ds.name in prompt_sets:
            prompts = prompt_sets[ds.name]
        else:
            raise MissingPromptSetError(f"no prompt set supplied for dataset {ds.name!r}")
        rows.extend(evaluate(model, ds, prompts, attack_types, budget, candidates, seed=seed, batch_size=batch_size))
    meta = {
        "source": source.name,
        "targets": [t.name for t in targets],
        "average_definition": "unweighted mean over all rows, source dataset included",
        "budget": budget.to_dict(),
    }
    return EvalReport("zero-shot", rows, config_hash, meta)


# ---------------------------------------------------------------------------
# Weight interpolation


def interpolate_weights(model_base: DualEncoder, model_ft: DualEncoder, lam: float) -> DualEncoder:
    """Element-wise ``(1 - lam) * base + lam * ft`` over every state entry, temperature included."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("interpolation weight must lie in [0, 1]")
    a, b = model_base.state_dict(), model_ft.state_dict()
    missing = sorted(set(a) ^ set(b))
    shape_bad = sorted(k for k in set(a) & set(b) if a[k].shape != b[k].shape)
    if missing or shape_bad:
        raise StructureError(f"parameter keys differ: {missing}; shapes differ: {shape_bad}")
    out = copy.deepcopy(model_base)
    mixed = {}
    for k, v in a.items():
        if v.is_floating_point():
            mixed[k] = (1.0 - lam) * v + lam * b[k]
        elif not torch.equal(v, b[k]):
            raise StructureError(f"non-float entry {k!r} differs between models")
        else:
            mixed[k] = v.clone()
    out.load_state_dict(mixed)
    return out.eval()


@dataclass
class InterpolationSweep:
    lambdas: list[float]
    robust: dict[str, list[float]]  # attack type -> accuracy per lambda
    clean: list[float]
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {"lambdas": self.lambdas, "robust": self.robust, "clean": self.clean,
                "config_hash": self.config_hash, "tool_version": TOOL_VERSION}

    def save(self, path) -> Path:
        return write_json(path, self.to_dict())


def interpolation_sweep(model_base, model_ft, grid: Sequence[float], dataset, prompts, attack_types,
                        budget: AdversarialBudget, candidates=None, *, seed=0, config_hash="",
                        batch_size=256) -> InterpolationSweep:
    lambdas = sorted({0.0, 1.0, *map(float, grid)})
    robust_types = [a for a in attack_types if a != "clean"]
    robust = {a: [] for a in robust_types}
    clean = []
    for lam in lambdas:
        model = interpolate_weights(model_base, model_ft, lam)
        rows = evaluate(model, dataset, prompts, ["clean", *robust_types], budget, candidates, seed=seed,
                        batch_size=batch_size)
        clean.append(rows[0].accuracy)
        for r in rows[1:]:
            robust[r.attack].append(r.accuracy)
    return InterpolationSweep(lambdas, robust, clean, config_hash)


# ---------------------------------------------------------------------------
# Feature similarity


@dataclass
class FeatureDiagnostic:
    mean_similarity: float
    per_example: torch.Tensor
    clean_features: torch.Tensor
    adversarial_features: torch.Tensor
    ids: list[str]

    def export(self, out_dir: str | os.PathLike, config_hash: str = "") -> Path:
        """Flat float32 arrays plus a JSON manifest keyed by example id."""
        out = Path(out_dir)
        for name, arr in (("clean_features.npy", self.clean_features), ("adv_features.npy", self.adversarial_features),
                          ("cosine.npy", self.per_example)):
            data = arr.detach().cpu().to(torch.float32).numpy()
            atomic_write(out / name, lambda fh, d=data: np.save(fh, d))
        write_json(out / "features_manifest.json", {
            "ids": self.ids, "mean_similarity": self.mean_similarity, "config_hash": config_hash,
            "tool_version": TOOL_VERSION, "arrays": ["clean_features.npy", "adv_features.npy", "cosine.npy"],
        })
        return out


def feature_similarity_diagnostic(model, dataset: ClassificationDataset, budget: AdversarialBudget,
                                  prompts: PromptSet | None = None, *, seed=0, batch_size=256) -> FeatureDiagnostic:
    """Cosine similarity between each image's clean and PGD-attacked embedding."""
    prompts = prompts if prompts is not None else dataset.prompts()
    adv = adversarial_images(model, dataset, prompts, budget, seed=seed, batch_size=batch_size) \
        if budget.epsilon > 0 else dataset.images.to(model.dtype)
    with torch.no_grad():
        clean_f = torch.cat([embed_images(model, dataset.images[s:s + batch_size])
                             for s in range(0, len(dataset), batch_size)])
        adv_f = torch.cat([embed_images(model, adv[s:s + batch_size]) for s in range(0, len(dataset), batch_size)])
    cos = (clean_f * adv_f).sum(dim=1).clamp(-1.0, 1.0)
    return FeatureDiagnostic(float(cos.mean()), cos, clean_f, adv_f, list(dataset.ids))


# ---------------------------------------------------------------------------
# Retrieval


@dataclass(frozen=True)
class RetrievalReport:
    direction: str  # image-to-text | text-to-image
    recall: dict  # {1: %, 5: %, 10: %}
    attack: str
    budget: dict
    n: int

    @property
    def r1(self) -> float:
        return self.recall[1]

    @property
    def r5(self) -> float:
        return self.recall[5]

    @property
    def r10(self) -> float:
        return self.recall[10]

    def to_dict(self) -> dict:
        return {"direction": self.direction, "recall": {f"R@{k}": v for k, v in self.recall.items()},
                "attack": self.attack, "budget": self.budget, "n": self.n}


def recall_at_k(similarity: torch.Tensor, ks: Sequence[int] = RECALL_KS) -> dict[int, float]:
    """Query ``i``'s correct item is column ``i``; ties rank the lower column first."""
    order = torch.sort(similarity, dim=1, descending=True, stable=True).indices
    target = torch.arange(similarity.shape[0])[:, None]
    rank = (order == target).float().argmax(dim=1)
    return {k: float((rank < k).double().mean() * 100) for k in ks}


def eval_retrieval(model: DualEncoder, corpus: RetrievalCorpus, attack: str, budget: AdversarialBudget,
                   candidates: CandidateProvider | None = None, *, seed: int = 0) -> tuple[RetrievalReport, RetrievalReport]:
    """Image-to-text and text-to-image R@{1,5,10}, optionally under Co-Attack.

    Under Co-Attack the whole caption list is the text universe for the
    divergence distributions and every caption is attacked.
    """
    if attack not in ("clean", "co-attack"):
        raise ProtocolError(f"retrieval supports 'clean' or 'co-attack', not {attack!r}")
    images, captions = corpus.images.to(model.dtype), corpus.captions
    used = AdversarialBudget.zero()
    if attack == "co-attack":
        res = co_attack(model, images, captions, torch.arange(len(corpus)), budget, candidates, seed=seed)
        images, captions, used = res.image.adversarial, res.adversarial_prompts, budget
    with torch.no_grad():
        sim = embed_images(model, images) @ embed_texts(model, captions).T
    i2t = RetrievalReport("image-to-text", recall_at_k(sim), attack, used.to_dict(), len(corpus))
    t2i = RetrievalReport("text-to-image", recall_at_k(sim.T), attack, used.to_dict(), len(corpus))
    return i2t, t2i


# ---------------------------------------------------------------------------
# Rendering


def render_eval_table(reports: Mapping[str, EvalReport], attack: str | None = None) -> str:
    """Methods as rows, datasets as columns plus Average, one block per attack."""
    if not reports:
        return ""
    first = next(iter(reports.values()))
    attacks = [attack] if attack else first.attacks()
    datasets = first.datasets()
    lines = []
    for a in attacks:
        header = ["Method", *datasets, "Average"]
        lines.append(f"[{first.protocol}] attack: {a}")
        lines.append(" | ".join(f"{h:>12s}" for h in header))
        lines.append("-" * (15 * len(header)))
        for name, rep in reports.items():
            vals = [rep.accuracy(d, a) for d in datasets]
            lines.append(" | ".join([f"{name:>12s}", *(f"{v:12.2f}" for v in vals), f"{rep.average(a):12.2f}"]))
        lines.append("")
    return "\n".join(lines)


def render_retrieval_table(reports: Mapping[str, Sequence[RetrievalReport]]) -> str:
    lines = [" | ".join(f"{h:>10s}" for h in ("Method", "TR R@1", "TR R@5", "TR R@10", "IR R@1", "IR R@5", "IR R@10"))]
    for name, (i2t, t2i) in reports.items():
        vals = [i2t.r1, i2t.r5, i2t.r10, t2i.r1, t2i.r5, t2i.r10]
        lines.append(" | ".join([f"{name:>10s}", *(f"{v:10.2f}" for v in vals)]))
    return "\n".join(lines) + "\n"


def save_retrieval(path, reports: Sequence[RetrievalReport], config_hash: str = "") -> Path:
    return write_json(path, {"reports": [r.to_dict() for r in reports], "config_hash": config_hash,
                             "tool_version": TOOL_VERSION})
