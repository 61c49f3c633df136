"""Adversarial fine-tuning: MMCoA and the TeCoA / FT-standard baselines.

All three methods share one loop. Per minibatch the loop (1) regenerates the
adversarial inputs the method needs against the *current* parameters, (2)
takes one optimizer step on the method's objective and (3) appends a log
record. Labels are class indices into the fixed prompt set.
"""

from __future__ import annotations

import copy
import hashlib
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal, Union

import torch

from ._util import stable_hash
from .attacks import TRAIN_BUDGET, AdversarialBudget, CandidateProvider, attack_prompt_set, pgd_image_attack
from .data import ClassificationDataset
from .encoders import DualEncoder, PromptSet, embed_images, embed_texts
from .losses import LossWeights, loss_image_adv_text_clean, loss_text_adv_image_clean, total_loss
from .seeding import derive_seed, numpy_rng, torch_generator

METHODS = ("mmcoa", "tecoa", "ft-standard")
SHOTS = (1, 5, 50, "full")
Shots = Union[int, Literal["full"]]


class TrainingError(RuntimeError):
    pass


class FewShotError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    name: Literal["adamw", "adam"] = "adamw"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.2


@dataclass(frozen=True)
class TrainConfig:
    method: str = "mmcoa"
    loss_weights: LossWeights = LossWeights()
    budget: AdversarialBudget = TRAIN_BUDGET
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = 2
    batch_size: int = 128
    shots: Shots = "full"
    seed: int = 0
    scope: Literal["full", "image-encoder-only"] = "full"
    cache_text_attacks: bool = False
    widen_text_positions: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.shots not in SHOTS:
            raise ValueError(f"shots must be one of {SHOTS}, got {self.shots!r}")
        if self.scope not in ("full", "image-encoder-only"):
            raise ValueError(f"unknown fine-tune scope {self.scope!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return stable_hash(self.to_dict())


@dataclass(frozen=True)
class FewShotSample:
    per_class: tuple[tuple[int, ...], ...]
    shots: Shots
    seed: int

    @property
    def indices(self) -> list[int]:
        return sorted(i for rows in self.per_class for i in rows)


def sample_few_shot(dataset: ClassificationDataset, shots: Shots, seed: int) -> FewShotSample:
    """Uniform per-class sample without replacement; ``"full"`` keeps everything."""
    labels = dataset.labels.tolist()
    members = [[i for i, y in enumerate(labels) if y == c] for c in range(dataset.num_classes)]
    if shots == "full":
        return FewShotSample(tuple(tuple(m) for m in members), shots, seed)
    if not isinstance(shots, int) or shots < 1:
        raise FewShotError(f"shots must be a positive integer or 'full', got {shots!r}")
    picked = []
    for c, rows in enumerate(members):
        if len(rows) < shots:
            raise FewShotError(
                f"class {dataset.class_names[c]!r} has {len(rows)} examples, fewer than the {shots} requested"
            )
        rng = numpy_rng(seed, "few-shot", c)
        picked.append(tuple(sorted(int(rows[j]) for j in rng.choice(len(rows), size=shots, replace=False))))
    return FewShotSample(tuple(picked), shots, seed)


def make_optimizer(params, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    kwargs = dict(lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    if cfg.name == "adamw":
        return torch.optim.AdamW(params, **kwargs)
    if cfg.name == "adam":
        return torch.optim.Adam(params, **kwargs)
    raise ValueError(f"unknown optimizer {cfg.name!r}")


def _fingerprint(t: torch.Tensor) -> str:
    return hashlib.sha1(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()[:16]


@dataclass
class TrainResult:
    model: DualEncoder
    log: list[dict] = field(default_factory=list)
    config_hash: str = ""

    def epoch_losses(self) -> list[float]:
        """Mean total loss per epoch."""
        by_epoch: dict[int, list[float]] = {}
        for rec in self.log:
            by_epoch.setdefault(rec["epoch"], []).append(rec["loss"])
        return [sum(v) / len(v) for _, v in sorted(by_epoch.items())]


StepCallback = Callable[[dict, DualEncoder], None]
EpochCallback = Callable[[int, DualEncoder], None]


def method_objective(method: str, model: DualEncoder, x: torch.Tensor, x_adv: torch.Tensor, y: torch.Tensor,
                     prompts: PromptSet, adv_prompts: PromptSet | None, weights: LossWeights):
    """Scalar training objective and its logged components."""
    text = embed_texts(model, prompts)
    tau = model.temperature
    if method == "ft-standard":
        clean = loss_image_adv_text_clean(embed_images(model, x), text, y, tau)
        return clean, {"clean": clean.item()}
    image_adv = loss_image_adv_text_clean(embed_images(model, x_adv), text, y, tau)
    if method == "tecoa":
        return image_adv, {"image_adv": image_adv.item()}
    adv_text = embed_texts(model, adv_prompts if adv_prompts is not None else prompts)
    text_adv = loss_text_adv_image_clean(embed_images(model, x), adv_text, y, tau)
    loss = total_loss(image_adv, text_adv, weights)
    return loss, {"image_adv": image_adv.item(), "text_adv": text_adv.item()}


def train(model: DualEncoder, dataset: ClassificationDataset, prompts: PromptSet, config: TrainConfig,
          candidates: CandidateProvider | None = None, *, on_step: StepCallback | None = None,
          on_epoch: EpochCallback | None = None, copy_model: bool = True) -> TrainResult:
    """Run ``config.method`` on ``dataset``; the input model is left untouched unless ``copy_model=False``."""
    if len(prompts) != dataset.num_classes:
        raise ValueError(f"{len(prompts)} prompts for a {dataset.num_classes}-class dataset")
    method = config.method
    if method == "mmcoa" and config.budget.text_budget > 0 and candidates is None:
        raise ValueError("MMCoA with a text budget needs a candidate provider")
    model = copy.deepcopy(model) if copy_model else model
    config_hash = config.hash()

    trainable = model.image_parameters() if config.scope == "image-encoder-only" else list(model.parameters())
    trainable_ids = {id(p) for p in trainable}
    saved_flags = [(p, p.requires_grad) for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable_ids)
    optimizer = make_optimizer(trainable, config.optimizer)

    sample = sample_few_shot(dataset, config.shots, config.seed)
    data = dataset.subset(sample.indices)
    n = len(data)
    budget = config.budget
    attack_images = method in ("tecoa", "mmcoa")
    attack_texts = method == "mmcoa" and budget.text_budget > 0
    log: list[dict] = []
    step = 0
    try:
        for epoch in range(config.epochs):
            order = torch.randperm(n, generator=torch_generator(config.seed, "epoch", epoch))
            epoch_prompts = None
            for start in range(0, n, config.batch_size):
                t0 = time.perf_counter()
                idx = order[start:start + config.batch_size]
                x, y = data.images[idx].to(model.dtype), data.labels[idx]
                model.eval()
                norms = torch.zeros(len(idx))
                x_adv = x
                if attack_images:
                    attack = pgd_image_attack(model, x, prompts, y, budget,
                                              seed=derive_seed(config.seed, "train-pgd", step),
                                              example_ids=idx.tolist())
                    x_adv, norms = attack.adversarial, attack.perturbation_norm
                adv_prompts, edits = None, 0
                if attack_texts:
                    if epoch_prompts is None or not config.cache_text_attacks:
                        epoch_prompts, results = attack_prompt_set(model, prompts, budget, candidates,
                                                                   widen=config.widen_text_positions)
                        edits = sum(int(r.perturbation_norm) for r in results)
                    adv_prompts = epoch_prompts
                model.train()
                loss, parts = method_objective(method, model, x, x_adv, y, prompts, adv_prompts,
                                               config.loss_weights)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at step {step} (config {config_hash})")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                record = {
                    "step": step,
                    "epoch": epoch,
                    "loss": loss.item(),
                    **parts,
                    "max_linf": float(norms.max()) if len(norms) else 0.0,
                    "text_edits": edits,
                    "adv_fingerprint": _fingerprint(x_adv) if attack_images else None,
                    "wall_time": time.perf_counter() - t0,
                }
                log.append(record)
                if on_step is not None:
                    on_step(record, model)
                step += 1
            model.eval()
            if on_epoch is not None:
                on_epoch(epoch, model)
    finally:
        for p, flag in saved_flags:
            p.requires_grad_(flag)
    model.eval()
    return TrainResult(model, log, config_hash)


def train_mmcoa(model, dataset, prompts, config: TrainConfig, candidates, **kwargs) -> TrainResult:
    if config.method != "mmcoa":
        raise ValueError("train_mmcoa expects config.method == 'mmcoa'")
    return train(model, dataset, prompts, config, candidates, **kwargs)


def train_tecoa(model, dataset, prompts, config: TrainConfig, **kwargs) -> TrainResult:
    if config.method != "tecoa":
        raise ValueError("train_tecoa expects config.method == 'tecoa'")
    return train(model, dataset, prompts, config, None, **kwargs)


def train_ft_standard(model, dataset, prompts, config: TrainConfig, **kwargs) -> TrainResult:
    if config.method != "ft-standard":
        raise ValueError("train_ft_standard expects config.method == 'ft-standard'")
    return train(model, dataset, prompts, config, None, **kwargs)


def assert_finite_params(model: DualEncoder) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise TrainingError(f"parameter {name} became non-finite")
