"""Experiment configuration: one YAML file, validated into dataclasses.

Schema (``*`` marks required keys)::

    seed*: int                      root seed; every random stream derives from it
    output_dir: path                default runs/<config hash>
    device: cpu
    template: "This is a photo of a [CLS]"
    model*:
      kind*: toy | clip             clip needs `pretrained: <hf model name>`
      embed_dim, width, hidden, text_width, temperature
    dataset*:
      name*: registered dataset     see `mmcoa datasets list`
      train_split: train
      eval_split: test
      eval_per_class: int | null    first N test images per class
      targets: [names]              zero-shot targets
      cache_dir: path | null
    pretrain:                       optional clean training of a toy model from scratch
      epochs, batch_size, lr, weight_decay
    train*:
      method*: mmcoa | tecoa | ft-standard
      epochs, batch_size, shots (1|5|50|full), scope (full|image-encoder-only)
      loss_weights: {image_adv, text_adv}
      optimizer: {name, lr, beta1, beta2, weight_decay}
      budget: {epsilon, alpha, steps, text_budget, candidate_list_length}
      eval_every_epoch: bool
    eval:
      protocol: in-distribution | zero-shot
      attacks: [clean, image, text, multimodal, co-attack]
      budget: {...}
      retrieval: bool               R@K on a per-class retrieval corpus, clean and Co-Attack
      retrieval_budget: {...}
      features: bool                export clean/adversarial image features
    interpolate:
      grid: [floats]

Budget values accept fractions such as ``"1/255"``. Only paths and the device
may be overridden from the environment (``MMCOA_OUTPUT_DIR``,
``MMCOA_CACHE_DIR``, ``MMCOA_DEVICE``).
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any

import yaml

from ._util import stable_hash
from .attacks import RETRIEVAL_BUDGET, TEST_BUDGET, TRAIN_BUDGET, AdversarialBudget
from .data import REGISTRY
from .encoders import DEFAULT_TEMPERATURE, DEFAULT_TEMPLATE
from .evaluation import ATTACK_TYPES
from .losses import LossWeights
from .training import METHODS, SHOTS, OptimizerConfig, TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "toy"
    embed_dim: int = 32
    width: int = 8
    hidden: int = 64
    text_width: int = 32
    temperature: float = DEFAULT_TEMPERATURE
    pretrained: str | None = None


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    train_split: str = "train"
    eval_split: str = "test"
    eval_per_class: int | None = None
    targets: tuple[str, ...] = ()
    cache_dir: str | None = None


@dataclass(frozen=True)
class PretrainSpec:
    epochs: int = 15
    batch_size: int = 128
    lr: float = 2e-3
    weight_decay: float = 0.0


@dataclass(frozen=True)
class EvalSpec:
    protocol: str = "in-distribution"
    attacks: tuple[str, ...] = ("clean", "image", "text", "multimodal")
    budget: AdversarialBudget = TEST_BUDGET
    retrieval: bool = False
    retrieval_budget: AdversarialBudget = RETRIEVAL_BUDGET
    features: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    model: ModelSpec
    dataset: DatasetSpec
    train: TrainConfig
    eval: EvalSpec = EvalSpec()
    pretrain: PretrainSpec | None = None
    interpolate_grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    eval_every_epoch: bool = False
    template: str = DEFAULT_TEMPLATE
    output_dir: str | None = None
    device: str = "cpu"

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Identity of the experiment; paths and device are excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("device")
        d["dataset"].pop("cache_dir")
        return stable_hash(d)

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir or f"runs/{self.hash()}")


# ---------------------------------------------------------------------------
# Parsing


class _Locator:
    """Maps a dotted field path to the line where it appears in the YAML source."""

    def __init__(self, text: str):
        try:
            self.root = yaml.compose(text)
        except yaml.YAMLError:
            self.root = None

    def line(self, path: str) -> int | None:
        node = self.root
        line = None
        for part in path.split("."):
            if not isinstance(node, yaml.MappingNode):
                break
            for key, value in node.value:
                if key.value == part:
                    line = key.start_mark.line + 1
                    node = value
                    break
            else:
                break
        return line


class _Parser:
    def __init__(self, source: str, locator: _Locator):
        self.source = source
        self.locator = locator

    def fail(self, path: str, message: str):
        line = self.locator.line(path)
        where = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{where}: {path}: {message}")

    def mapping(self, raw: Any, path: str, allowed: set[str], required: set[str] = frozenset()) -> dict:
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            self.fail(path, "expected a mapping")
        for key in raw:
            if key not in allowed:
                self.fail(f"{path}.{key}" if path else key, f"unknown field (allowed: {', '.join(sorted(allowed))})")
        for key in sorted(required):
            if key not in raw or raw[key] is None:
                self.fail(f"{path}.{key}" if path else key, "missing required field")
        return raw

    def number(self, value: Any, path: str, kind=float, minimum=None):
        try:
            if isinstance(value, bool):
                raise ValueError
            if kind is int:
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError
                out = int(value)
            else:
                out = float(Fraction(value)) if isinstance(value, str) else float(value)
        except (TypeError, ValueError, ZeroDivisionError):
            self.fail(path, f"expected {'an integer' if kind is int else 'a number'}, got {value!r}")
        if minimum is not None and out < minimum:
            self.fail(path, f"must be >= {minimum}, got {out}")
        return out

    def choice(self, value: Any, path: str, options) -> Any:
        if value not in options:
            self.fail(path, f"must be one of {list(options)}, got {value!r}")
        return value

    def typed(self, raw: dict, path: str, cls, overrides: dict | None = None):
        """Build dataclass ``cls`` from ``raw``, coercing numeric fields."""
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw[f.name]
            p = f"{path}.{f.name}"
            default = f.default
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    self.fail(p, f"expected true/false, got {value!r}")
            elif isinstance(default, int):
                value = self.number(value, p, int)
            elif isinstance(default, float):
                value = self.number(value, p, float)
            kwargs[f.name] = value
        kwargs.update(overrides or {})
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            self.fail(path, str(exc))

    def budget(self, raw: Any, path: str, default: AdversarialBudget) -> AdversarialBudget:
        raw = self.mapping(raw, path, {f.name for f in fields(AdversarialBudget)})
        merged = {**asdict(default), **raw}
        return self.typed(merged, path, AdversarialBudget)


def parse_config(data: dict, source: str = "<config>", text: str | None = None) -> ExperimentConfig:
    p = _Parser(source, _Locator(text or ""))
    top = p.mapping(data, "", {"seed", "model", "dataset", "train", "eval", "pretrain", "interpolate", "template",
                               "output_dir", "device"}, {"seed", "model", "dataset", "train"})
    top = {k: v for k, v in top.items()}
    seed = p.number(top["seed"], "seed", int, minimum=0)

    m = p.mapping(top["model"], "model", {f.name for f in fields(ModelSpec)}, {"kind"})
    p.choice(m["kind"], "model.kind", ("toy", "clip"))
    if m["kind"] == "clip" and not m.get("pretrained"):
        p.fail("model.pretrained", "missing required field for kind 'clip'")
    model = p.typed(m, "model", ModelSpec)

    d = p.mapping(top["dataset"], "dataset", {f.name for f in fields(DatasetSpec)}, {"name"})
    p.choice(d["name"], "dataset.name", sorted(REGISTRY))
    targets = d.get("targets") or []
    if not isinstance(targets, list):
        p.fail("dataset.targets", "expected a list of dataset names")
    for i, t in enumerate(targets):
        p.choice(t, f"dataset.targets.{i}", sorted(REGISTRY))
    per_class = d.get("eval_per_class")
    dataset = DatasetSpec(
        name=d["name"],
        train_split=d.get("train_split", "train"),
        eval_split=d.get("eval_split", "test"),
        eval_per_class=None if per_class is None else p.number(per_class, "dataset.eval_per_class", int, 1),
        targets=tuple(targets),
        cache_dir=os.environ.get("MMCOA_CACHE_DIR", d.get("cache_dir")),
    )

    pretrain = None
    if top.get("pretrain") is not None:
        pr = p.mapping(top["pretrain"], "pretrain", {f.name for f in fields(PretrainSpec)})
        pretrain = p.typed(pr, "pretrain", PretrainSpec)

    t = p.mapping(top["train"], "train",
                  {f.name for f in fields(TrainConfig)} - {"seed"} | {"eval_every_epoch"}, {"method"})
    p.choice(t["method"], "train.method", METHODS)
    shots = t.get("shots", "full")
    p.choice(shots, "train.shots", SHOTS)
    weights_raw = p.mapping(t.get("loss_weights"), "train.loss_weights", {"image_adv", "text_adv"})
    weights = p.typed({**asdict(LossWeights()), **weights_raw}, "train.loss_weights", LossWeights)
    opt_raw = p.mapping(t.get("optimizer"), "train.optimizer", {f.name for f in fields(OptimizerConfig)})
    if "name" in opt_raw:
        p.choice(opt_raw["name"], "train.optimizer.name", ("adamw", "adam"))
    optimizer = p.typed(opt_raw, "train.optimizer", OptimizerConfig)
    if t["method"] == "ft-standard" and t.get("budget") is not None:
        log.warning("train.budget is ignored for method 'ft-standard' (no attacks in the training loop)")
    budget = p.budget(t.get("budget"), "train.budget", TRAIN_BUDGET)
    eval_every_epoch = t.get("eval_every_epoch", False)
    if not isinstance(eval_every_epoch, bool):
        p.fail("train.eval_every_epoch", "expected true/false")
    if "scope" in t:
        p.choice(t["scope"], "train.scope", ("full", "image-encoder-only"))
    rest = {k: v for k, v in t.items() if k in ("epochs", "batch_size", "scope", "cache_text_attacks",
                                                  "widen_text_positions")}
    train = p.typed({**rest, "method": t["method"]}, "train", TrainConfig,
                    {"shots": shots, "loss_weights": weights, "optimizer": optimizer, "budget": budget, "seed": seed})

    e = p.mapping(top.get("eval"), "eval", {f.name for f in fields(EvalSpec)})
    protocol = p.choice(e.get("protocol", "in-distribution"), "eval.protocol", ("in-distribution", "zero-shot"))
    attacks = e.get("attacks", list(EvalSpec.attacks))
    if not isinstance(attacks, list) or not attacks:
        p.fail("eval.attacks", "expected a non-empty list")
    for i, a in enumerate(attacks):
        p.choice(a, f"eval.attacks.{i}", ATTACK_TYPES)
    for flag in ("retrieval", "features"):
        if not isinstance(e.get(flag, False), bool):
            p.fail(f"eval.{flag}", "expected true/false")
    if protocol == "zero-shot" and not dataset.targets:
        p.fail("dataset.targets", "the zero-shot protocol needs at least one target dataset")
    evaluation = EvalSpec(protocol, tuple(attacks), p.budget(e.get("budget"), "eval.budget", TEST_BUDGET),
                          e.get("retrieval", False),
                          p.budget(e.get("retrieval_budget"), "eval.retrieval_budget", RETRIEVAL_BUDGET),
                          e.get("features", False))

    interp = p.mapping(top.get("interpolate"), "interpolate", {"grid"})
    grid = interp.get("grid", list(ExperimentConfig.interpolate_grid))
    if not isinstance(grid, list):
        p.fail("interpolate.grid", "expected a list of numbers in [0, 1]")
    grid = tuple(p.number(g, f"interpolate.grid.{i}") for i, g in enumerate(grid))
    if any(not 0 <= g <= 1 for g in grid):
        p.fail("interpolate.grid", "values must lie in [0, 1]")

    template = top.get("template", DEFAULT_TEMPLATE)
    if not isinstance(template, str) or ("[CLS]" not in template and "{}" not in template):
        p.fail("template", "must be a string containing [CLS]")

    return ExperimentConfig(
        seed=seed, model=model, dataset=dataset, train=train, eval=evaluation, pretrain=pretrain,
        interpolate_grid=grid, eval_every_epoch=eval_every_epoch, template=template,
        output_dir=os.environ.get("MMCOA_OUTPUT_DIR", top.get("output_dir")),
        device=os.environ.get("MMCOA_DEVICE", top.get("device", "cpu")),
    )


def load_config(path: str | os.PathLike, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror or exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from exc
    if seed is not None:
        data = {**(data or {}), "seed": seed}
    cfg = parse_config(data, str(path), text)
    if output_dir is not None:
        cfg = replace(cfg, output_dir=output_dir)
    return cfg


def config_to_yaml(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    out = {
        "seed": d["seed"],
        "output_dir": d["output_dir"],
        "device": d["device"],
        "template": d["template"],
        "model": d["model"],
        "dataset": {**d["dataset"], "targets": list(d["dataset"]["targets"])},
        "pretrain": d["pretrain"],
        "train": {**{k: v for k, v in d["train"].items() if k != "seed"}, "eval_every_epoch": d["eval_every_epoch"]},
        "eval": {**d["eval"], "attacks": list(d["eval"]["attacks"])},
        "interpolate": {"grid": list(d["interpolate_grid"])},
    }
    return yaml.safe_dump(out, sort_keys=False)
