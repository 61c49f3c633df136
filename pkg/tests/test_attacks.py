import itertools
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import linear_model, np_linear_pgd_step, random_images, toy_model, toy_workspace
from mmcoa import attacks as A
from mmcoa.attacks import (
    AdversarialBudget,
    AttackError,
    MaskedLMCandidates,
    SubstitutionTable,
    attack_prompt_set,
    co_attack,
    co_attack_objective,
    confusables,
    export_image_corpus,
    export_text_corpus,
    multimodal_attack,
    pgd_image_attack,
    project_linf,
    run_pgd,
    text_attack,
)
from mmcoa.encoders import embed_texts

EPS = 1 / 255


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), eps=st.sampled_from([0.0, 1 / 255, 4 / 255, 0.3]))
def test_projection_lands_in_box(seed, eps):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 4, 4, generator=g)
    x_adv = x + (torch.rand(x.shape, generator=g) - 0.5)
    p = project_linf(x_adv, x, eps)
    assert ((p - x).abs() <= eps + 1e-7).all() and p.min() >= 0 and p.max() <= 1


def test_budget_validation():
    with pytest.raises(ValueError):
        AdversarialBudget(epsilon=1 / 255, alpha=2 / 255)
    with pytest.raises(ValueError):
        AdversarialBudget(steps=0)
    with pytest.raises(ValueError):
        AdversarialBudget(text_budget=-1)
    assert AdversarialBudget.zero().epsilon == 0
    assert AdversarialBudget().image_only().text_budget == 0
    assert AdversarialBudget().text_only().epsilon == 0


def test_default_budgets():
    assert (A.TRAIN_BUDGET.steps, A.TEST_BUDGET.steps, A.RETRIEVAL_BUDGET.steps) == (10, 100, 10)
    assert A.TRAIN_BUDGET.epsilon == A.TRAIN_BUDGET.alpha == 1 / 255
    assert A.RETRIEVAL_BUDGET.epsilon == 2 / 255
    assert A.TEST_BUDGET.text_budget == 1 and A.TEST_BUDGET.candidate_list_length == 10


def test_one_step_pgd_matches_closed_form_on_linear_encoder():
    vocab, prompts, _ = toy_workspace()
    for seed in range(5):
        model = linear_model(seed, vocab)
        x = random_images(4, size=8, seed=seed, dtype=torch.float64)
        y = torch.tensor([0, 1, 2, 3])
        budget = AdversarialBudget(epsilon=EPS, alpha=EPS, steps=1)
        got = pgd_image_attack(model, x, prompts, y, budget).adversarial
        W = model.image_tower[1].weight.detach().numpy()
        b = model.image_tower[1].bias.detach().numpy()
        T = embed_texts(model, prompts).detach().numpy()
        for i in range(4):
            want, _ = np_linear_pgd_step(W, b, T, x[i].reshape(-1).numpy(), int(y[i]), 0.01, EPS, EPS)
            assert np.abs(got[i].reshape(-1).numpy() - want).max() <= 1e-12


def test_pgd_trace_and_bounds():
    model = toy_model()
    _, prompts, _ = toy_workspace()
    x = random_images(6)
    res = pgd_image_attack(model, x, prompts, torch.arange(6) % 5, AdversarialBudget(epsilon=EPS, alpha=EPS / 4,
                                                                                     steps=7))
    assert res.objective_trace.shape == (8, 6)
    assert ((res.adversarial - x).abs().amax(dim=(1, 2, 3)) <= EPS + 1e-6).all()
    assert torch.equal(res.perturbation_norm, (res.adversarial - x).abs().flatten(1).max(dim=1).values)
    assert res.objective_trace[-1].mean() > res.objective_trace[0].mean()
    single = res[2]
    assert len(single.objective_trace) == 8 and single.perturbation_norm == float(res.perturbation_norm[2])


def test_zero_step_size_leaves_images_unchanged():
    model = toy_model()
    _, prompts, _ = toy_workspace()
    x = random_images(3)
    out = pgd_image_attack(model, x, prompts, [0, 1, 2], AdversarialBudget(epsilon=0.0, alpha=0.0, steps=3))
    assert torch.equal(out.adversarial, x)


def test_random_start_depends_on_example_id_not_batch_position():
    model = toy_model()
    _, prompts, _ = toy_workspace()
    x = random_images(4)
    budget = AdversarialBudget(epsilon=4 / 255, alpha=1 / 255, steps=1, random_start=True)
    full = pgd_image_attack(model, x, prompts, [0, 1, 2, 3], budget, seed=5, example_ids=[10, 11, 12, 13])
    part = pgd_image_attack(model, x[2:], prompts, [2, 3], budget, seed=5, example_ids=[12, 13])
    assert torch.equal(full.adversarial[2:], part.adversarial)
    other = pgd_image_attack(model, x, prompts, [0, 1, 2, 3], budget, seed=6, example_ids=[10, 11, 12, 13])
    assert not torch.equal(full.adversarial, other.adversarial)


def test_l2_is_a_declared_stub():
    with pytest.raises(NotImplementedError):
        run_pgd(toy_model(), random_images(1), lambda x: x.sum((1, 2, 3)), AdversarialBudget(norm="l2"))


def test_non_finite_gradient_raises_with_step():
    with pytest.raises(AttackError) as err:
        run_pgd(toy_model(), random_images(1), lambda x: (x * float("nan")).sum((1, 2, 3)),
                AdversarialBudget(steps=2))
    assert err.value.step == 0


# ---------------------------------------------------------------------------
# Text


def test_confusables_are_deterministic_and_exclude_word():
    c = confusables("circle")
    assert c == confusables("circle") and "circle" not in c and len(c) <= 12
    assert c[0] == "circles"


def test_substitution_table_filters_by_vocab_and_caps_length():
    table = SubstitutionTable({"dog": ["dogs", "cat", "zzz", "puppy"]}, length=2, vocab={"dogs", "puppy", "cat"})
    assert table.candidates(("a", "dog"), 1) == ["dogs", "cat"]
    assert table.candidates(("a", "dog"), 0) == []


def test_default_table_keeps_class_words_apart():
    table = SubstitutionTable.default(["ring", "rings"], ["a"])
    assert "rings" not in table.table["ring"]
    assert table.table["a"][0] == "picture"


@torch.no_grad()
def _brute_force(model, prompt, positions, table, length):
    clean = embed_texts(model, [prompt])[0]
    best, best_val = None, -1.0
    for pos in positions:
        for cand in table.candidates(prompt, pos)[:length]:
            t = prompt[:pos] + (cand,) + prompt[pos + 1:]
            d = float((embed_texts(model, [t])[0] - clean).norm())
            if d > best_val:
                best, best_val = (pos, prompt[pos], cand), d
    return best


def test_single_edit_matches_brute_force():
    vocab, prompts, table = toy_workspace()
    model = toy_model(0, vocab, dtype=torch.float64)
    budget = AdversarialBudget(text_budget=1)
    for i, p in enumerate(prompts.prompts):
        for widen in (False, True):
            res = text_attack(model, p, None, budget, table, span=prompts.class_token_spans[i], widen=widen)
            positions = range(len(p)) if widen else range(*prompts.class_token_spans[i])
            assert res.substitutions == [_brute_force(model, p, positions, table, 10)]


@pytest.mark.parametrize("eps_t", [0, 1, 2, 3])
def test_text_attack_respects_budget_and_is_monotone(eps_t):
    vocab, prompts, table = toy_workspace()
    model = toy_model(1, vocab)
    res = text_attack(model, prompts.prompts[0], None, AdversarialBudget(text_budget=eps_t), table, widen=True)
    assert res.perturbation_norm <= eps_t
    assert len({s[0] for s in res.substitutions}) == len(res.substitutions)
    assert all(b >= a for a, b in zip(res.objective_trace, res.objective_trace[1:]))
    changed = sum(a != b for a, b in zip(prompts.prompts[0], res.adversarial_input))
    assert changed == res.perturbation_norm


def test_text_attack_without_candidates_is_identity():
    vocab, prompts, _ = toy_workspace()
    res = text_attack(toy_model(0, vocab), prompts.prompts[0], None, AdversarialBudget(), SubstitutionTable({}))
    assert res.adversarial_input == prompts.prompts[0] and res.perturbation_norm == 0


def test_attack_prompt_set_zero_budget_returns_clean_prompts():
    vocab, prompts, table = toy_workspace()
    adv, results = attack_prompt_set(toy_model(0, vocab), prompts, AdversarialBudget(text_budget=0), table)
    assert adv == prompts and all(r.perturbation_norm == 0 for r in results)


def test_masked_lm_candidates_with_stub_pipeline():
    def fill_mask(text, top_k):
        assert "[MASK]" in text
        return [{"token_str": w} for w in ("dog", "cat", "##x", "cat", "bird", "fish")]

    provider = MaskedLMCandidates(fill_mask, length=2, vocab={"cat", "bird", "fish"})
    assert provider.candidates(("a", "dog"), 1) == ["cat", "bird"]


# ---------------------------------------------------------------------------
# Multimodal and Co-Attack


def test_multimodal_attack_is_two_independent_attacks():
    vocab, prompts, table = toy_workspace()
    model = toy_model(0, vocab)
    x, y = random_images(5), torch.arange(5)
    budget = AdversarialBudget(epsilon=EPS, alpha=EPS, steps=3)
    mm = multimodal_attack(model, x, prompts, y, budget, table)
    assert torch.equal(mm.image.adversarial, pgd_image_attack(model, x, prompts, y, budget).adversarial)
    assert mm.adversarial_prompts == attack_prompt_set(model, prompts, budget, table)[0]


def test_co_attack_runs_text_stage_first(monkeypatch):
    vocab, prompts, table = toy_workspace()
    model = toy_model(0, vocab)
    calls = []
    real_text, real_pgd = A.attack_prompt_set, A.run_pgd
    monkeypatch.setattr(A, "attack_prompt_set", lambda *a, **k: calls.append("text") or real_text(*a, **k))
    monkeypatch.setattr(A, "run_pgd", lambda *a, **k: calls.append("image") or real_pgd(*a, **k))
    res = co_attack(model, random_images(3), prompts, [0, 1, 2], AdversarialBudget(steps=2), table)
    assert calls == ["text", "image"] and res.stage_order == ("text", "image")


def test_co_attack_objective_vanishes_at_clean_image():
    vocab, prompts, table = toy_workspace()
    model = toy_model(0, vocab, dtype=torch.float64)
    x = random_images(2, dtype=torch.float64)
    adv_prompts, _ = attack_prompt_set(model, prompts, AdversarialBudget(), table)
    obj = co_attack_objective(model, x, embed_texts(model, prompts), embed_texts(model, adv_prompts))
    assert obj(x).abs().max() < 1e-12


def test_co_attack_respects_budget_and_is_seeded():
    vocab, prompts, table = toy_workspace()
    model = toy_model(0, vocab)
    x = random_images(4)
    budget = A.RETRIEVAL_BUDGET
    a = co_attack(model, x, prompts, [0, 1, 2, 3], budget, table, seed=1)
    b = co_attack(model, x, prompts, [0, 1, 2, 3], budget, table, seed=1)
    assert torch.equal(a.image.adversarial, b.image.adversarial)
    assert ((a.image.adversarial - x).abs().max() <= budget.epsilon + 1e-6)
    assert all(r.perturbation_norm <= budget.text_budget for r in a.text)


# ---------------------------------------------------------------------------
# Export


def test_corpus_export_is_reproducible(tmp_path):
    vocab, prompts, table = toy_workspace()
    model = toy_model(0, vocab)
    x = random_images(3)
    budget = AdversarialBudget(steps=2)
    for name in ("a", "b"):
        batch = pgd_image_attack(model, x, prompts, [0, 1, 2], budget)
        export_image_corpus(tmp_path / name, batch, ["i0", "i1", "i2"], budget.hash())
        _, results = attack_prompt_set(model, prompts, budget, table)
        export_text_corpus(tmp_path / name, results, list(prompts.class_names), budget.hash())
    for f in ("images.npy", "manifest.json", "texts.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert [e["clean_id"] for e in manifest["entries"]] == ["i0", "i1", "i2"]
    assert all(e["linf"] <= budget.epsilon + 1e-6 for e in manifest["entries"])
    stored = np.load(tmp_path / "a" / "images.npy")
    assert stored.shape == (3, 3, 16, 16) and stored.dtype == np.float32
    rows = [json.loads(line) for line in (tmp_path / "a" / "texts.jsonl").read_text().splitlines()]
    assert len(rows) == len(prompts) and all(len(r["substitutions"]) <= 1 for r in rows)


def test_candidate_lists_never_exceed_length():
    _, prompts, table = toy_workspace()
    for p, pos in itertools.product(prompts.prompts, range(7)):
        assert len(table.candidates(p, pos)) <= 10
