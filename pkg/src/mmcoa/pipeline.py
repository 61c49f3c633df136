"""Config-driven orchestration shared by the CLI and the end-to-end tests."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .attacks import SubstitutionTable
from .config import ExperimentConfig
from .data import ClassificationDataset, RetrievalCorpus, build_vocabulary, class_words, load_dataset, \
    retrieval_corpus_from
from .encoders import ClipAdapter, DualEncoder, PromptSet, ToyDualEncoder, Vocabulary, build_prompts, template_words
from .evaluation import EvalReport, RetrievalReport, eval_in_distribution, eval_retrieval, eval_zero_shot_protocol
from .seeding import derive_seed
from .training import OptimizerConfig, TrainConfig, TrainResult, train


@dataclass
class Workspace:
    train_set: ClassificationDataset
    eval_set: ClassificationDataset
    targets: list[ClassificationDataset]
    prompts: PromptSet
    vocab: Vocabulary
    candidates: SubstitutionTable


def prepare(cfg: ExperimentConfig) -> Workspace:
    """Load datasets and build the shared vocabulary and substitution table.

    The vocabulary covers the source and every target so that one toy model
    can be evaluated zero-shot on all of them.
    """
    ds = cfg.dataset
    train_set = load_dataset(ds.name, ds.train_split, seed=cfg.seed, cache_dir=ds.cache_dir)
    eval_set = load_dataset(ds.name, ds.eval_split, seed=cfg.seed, cache_dir=ds.cache_dir)
    targets = [load_dataset(t, ds.eval_split, seed=cfg.seed, cache_dir=ds.cache_dir) for t in ds.targets]
    if ds.eval_per_class is not None:
        eval_set = eval_set.first_per_class(ds.eval_per_class)
        targets = [t.first_per_class(ds.eval_per_class) for t in targets]
    name_sets = [train_set.class_names, *(t.class_names for t in targets)]
    table = SubstitutionTable.default(class_words(name_sets), template_words(cfg.template),
                                      length=cfg.train.budget.candidate_list_length)
    vocab = build_vocabulary(name_sets, cfg.template, extra_words=table.words())
    return Workspace(train_set, eval_set, targets, build_prompts(train_set.class_names, cfg.template), vocab,
                     table.with_vocab(vocab))


def candidates_for(ws: Workspace, model: DualEncoder) -> SubstitutionTable:
    """Substitution table filtered by what ``model`` can represent."""
    return ws.candidates if isinstance(model, ToyDualEncoder) else ws.candidates.with_vocab(model.vocab)


def initial_model(cfg: ExperimentConfig, ws: Workspace) -> DualEncoder:
    """Seeded toy model, clean-pretrained when ``cfg.pretrain`` is set, or a pretrained CLIP adapter."""
    spec = cfg.model
    if spec.kind == "clip":
        return ClipAdapter.from_pretrained(spec.pretrained).eval()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, "model-init"))
        model = ToyDualEncoder(ws.vocab, image_shape=tuple(ws.train_set.images.shape[1:]), embed_dim=spec.embed_dim,
                               width=spec.width, hidden=spec.hidden, text_width=spec.text_width,
                               temperature=spec.temperature)
    if cfg.pretrain is not None and cfg.pretrain.epochs > 0:
        p = cfg.pretrain
        pre = TrainConfig(method="ft-standard", epochs=p.epochs, batch_size=p.batch_size,
                          seed=derive_seed(cfg.seed, "pretrain"), optimizer=OptimizerConfig(lr=p.lr, weight_decay=p.weight_decay))
        model = train(model, ws.train_set, ws.prompts, pre, copy_model=False).model
    return model.eval()


def train_stage(cfg: ExperimentConfig, ws: Workspace, model: DualEncoder, **callbacks) -> TrainResult:
    return train(model, ws.train_set, ws.prompts, cfg.train, candidates_for(ws, model), **callbacks)


def eval_stage(cfg: ExperimentConfig, ws: Workspace, model: DualEncoder, attacks=None) -> EvalReport:
    attacks = list(attacks or cfg.eval.attacks)
    cands = candidates_for(ws, model)
    if cfg.eval.protocol == "zero-shot":
        return eval_zero_shot_protocol(model, ws.eval_set, ws.targets, attacks, cfg.eval.budget, cands,
                                       template=cfg.template, seed=cfg.seed, config_hash=cfg.hash())
    return eval_in_distribution(model, ws.eval_set, ws.prompts, attacks, cfg.eval.budget, cands, seed=cfg.seed,
                                config_hash=cfg.hash())


def retrieval_corpus(cfg: ExperimentConfig, ws: Workspace) -> RetrievalCorpus:
    return retrieval_corpus_from(ws.eval_set, template=cfg.template)


def retrieval_stage(cfg: ExperimentConfig, ws: Workspace, model: DualEncoder) -> list[RetrievalReport]:
    corpus = retrieval_corpus(cfg, ws)
    out = []
    for attack in ("clean", "co-attack"):
        out.extend(eval_retrieval(model, corpus, attack, cfg.eval.retrieval_budget, candidates_for(ws, model),
                                  seed=cfg.seed))
    return out
