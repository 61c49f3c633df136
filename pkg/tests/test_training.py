import pytest
import torch

import mmcoa.training as T
from helpers import random_images, toy_model, toy_workspace
from mmcoa.attacks import AdversarialBudget, attack_prompt_set
from mmcoa.data import ClassificationDataset
from mmcoa.encoders import embed_images, embed_texts
from mmcoa.losses import LossWeights, loss_image_adv_text_clean, loss_text_adv_image_clean
from mmcoa.training import (
    FewShotError,
    OptimizerConfig,
    TrainConfig,
    TrainingError,
    method_objective,
    sample_few_shot,
    train,
)

BUDGET = AdversarialBudget(epsilon=1 / 255, alpha=1 / 255, steps=2)


def _dataset(per_class=6, classes=5, seed=0):
    labels = torch.arange(classes).repeat_interleave(per_class)
    _, prompts, _ = toy_workspace()
    return ClassificationDataset("tiny", random_images(len(labels), seed=seed), labels, prompts.class_names[:classes])


def _cfg(method, **kw):
    base = dict(method=method, budget=BUDGET, epochs=1, batch_size=10, optimizer=OptimizerConfig(lr=1e-3))
    return TrainConfig(**{**base, **kw})


def test_few_shot_sampling_is_exact_and_seeded():
    ds = _dataset(per_class=8)
    s = sample_few_shot(ds, 5, seed=2)
    assert [len(rows) for rows in s.per_class] == [5] * 5
    assert all(ds.labels[i] == c for c, rows in enumerate(s.per_class) for i in rows)
    assert s.indices == sample_few_shot(ds, 5, seed=2).indices
    assert s.indices != sample_few_shot(ds, 5, seed=3).indices
    assert len(sample_few_shot(ds, "full", 0).indices) == len(ds)


def test_few_shot_error_names_the_class():
    labels = torch.tensor([0, 0, 1])
    ds = ClassificationDataset("x", random_images(3), labels, ("circle", "square"))
    with pytest.raises(FewShotError, match="square"):
        sample_few_shot(ds, 2, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="pgd-at")
    with pytest.raises(ValueError):
        TrainConfig(shots=3)
    with pytest.raises(ValueError):
        TrainConfig(scope="text-only")
    assert TrainConfig().optimizer == OptimizerConfig("adamw", 1e-4, 0.9, 0.98, 0.2)


def test_log_has_one_record_per_minibatch():
    vocab, prompts, table = toy_workspace()
    result = train(toy_model(0, vocab), _dataset(), prompts, _cfg("mmcoa", epochs=2), table)
    assert len(result.log) == 6
    keys = {"step", "epoch", "loss", "image_adv", "text_adv", "max_linf", "text_edits", "adv_fingerprint", "wall_time"}
    assert keys <= set(result.log[0])
    assert [r["step"] for r in result.log] == list(range(6))
    assert all(r["max_linf"] <= 1 / 255 + 1e-6 for r in result.log)
    assert len(result.epoch_losses()) == 2


def test_adversarial_examples_are_regenerated_against_current_weights(monkeypatch):
    vocab, prompts, table = toy_workspace()
    seen = []
    real = T.pgd_image_attack

    def spy(model, *a, **k):
        seen.append(float(sum(p.detach().double().sum() for p in model.parameters())))
        return real(model, *a, **k)

    monkeypatch.setattr(T, "pgd_image_attack", spy)
    ds = _dataset()
    result = train(toy_model(0, vocab), ds, prompts, _cfg("tecoa", batch_size=30, epochs=3), table)
    assert len(seen) == 3 and len(set(seen)) == 3
    assert len({r["adv_fingerprint"] for r in result.log}) == 3


def test_ft_standard_runs_no_attack(monkeypatch):
    vocab, prompts, _ = toy_workspace()
    monkeypatch.setattr(T, "pgd_image_attack", lambda *a, **k: pytest.fail("attack called"))
    result = train(toy_model(0, vocab), _dataset(), prompts, _cfg("ft-standard"))
    assert all(r["adv_fingerprint"] is None for r in result.log)


def test_input_model_is_untouched_and_training_is_deterministic():
    vocab, prompts, table = toy_workspace()
    model = toy_model(0, vocab)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    a = train(model, _dataset(), prompts, _cfg("mmcoa"), table).model
    b = train(model, _dataset(), prompts, _cfg("mmcoa"), table).model
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert all(torch.equal(v, b.state_dict()[k]) for k, v in a.state_dict().items())
    assert any(not torch.equal(before[k], v) for k, v in a.state_dict().items())


def test_image_encoder_only_scope_freezes_text_tower():
    vocab, prompts, table = toy_workspace()
    model = toy_model(0, vocab)
    out = train(model, _dataset(), prompts, _cfg("mmcoa", scope="image-encoder-only"), table).model
    for p, q in zip(model.text_parameters(), out.text_parameters()):
        assert torch.equal(p, q)
    assert any(not torch.equal(p, q) for p, q in zip(model.image_parameters(), out.image_parameters()))
    assert all(p.requires_grad for p in out.parameters())


def test_mmcoa_needs_candidates():
    _, prompts, _ = toy_workspace()
    with pytest.raises(ValueError):
        train(toy_model(), _dataset(), prompts, _cfg("mmcoa"))


def test_non_finite_loss_raises(monkeypatch):
    vocab, prompts, _ = toy_workspace()
    monkeypatch.setattr(T, "method_objective", lambda *a, **k: (torch.tensor(float("nan"), requires_grad=True), {}))
    with pytest.raises(TrainingError, match="step 0"):
        train(toy_model(0, vocab), _dataset(), prompts, _cfg("ft-standard"))


@torch.no_grad()
def test_weight_reductions_recover_single_objectives():
    vocab, prompts, table = toy_workspace()
    model = toy_model(0, vocab, dtype=torch.float64)
    x = random_images(5, dtype=torch.float64)
    x_adv = (x + 1 / 255).clamp(0, 1)
    y = torch.arange(5)
    adv_prompts, _ = attack_prompt_set(model, prompts, BUDGET, table)
    tecoa, _ = method_objective("tecoa", model, x, x_adv, y, prompts, None, LossWeights())
    img_only, _ = method_objective("mmcoa", model, x, x_adv, y, prompts, adv_prompts, LossWeights(1, 0))
    txt_only, _ = method_objective("mmcoa", model, x, x_adv, y, prompts, adv_prompts, LossWeights(0, 1))
    tau = model.temperature
    assert float(img_only) == float(tecoa)
    assert float(txt_only) == float(loss_text_adv_image_clean(embed_images(model, x), embed_texts(model, adv_prompts),
                                                              y, tau))
    both, parts = method_objective("mmcoa", model, x, x_adv, y, prompts, adv_prompts, LossWeights())
    assert float(both) == pytest.approx(0.5 * parts["image_adv"] + 0.5 * parts["text_adv"], abs=1e-12)
    clean, _ = method_objective("ft-standard", model, x, x_adv, y, prompts, None, LossWeights())
    assert float(clean) == float(loss_image_adv_text_clean(embed_images(model, x), embed_texts(model, prompts), y, tau))


def test_assert_finite_params():
    model = toy_model()
    T.assert_finite_params(model)
    with torch.no_grad():
        next(model.parameters())[0] = float("inf")
    with pytest.raises(TrainingError):
        T.assert_finite_params(model)
