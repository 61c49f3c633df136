import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import np_contrastive_ce, np_normalize, toy_model, toy_workspace, random_images
from mmcoa.losses import (
    ContrastiveLabels,
    EmptyPromptError,
    LossWeights,
    loss_image_adv_text_clean,
    loss_text_adv_image_clean,
    predict_from_embeddings,
    stable_log_softmax,
    total_loss,
    zero_shot_predict,
)


def _instance(seed, b, k, d=8):
    rng = np.random.default_rng(seed)
    img = np_normalize(rng.normal(size=(b, d)))
    txt = np_normalize(rng.normal(size=(k, d)))
    y = rng.integers(0, k, size=b)
    return img, txt, y


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), b=st.integers(1, 16), k=st.integers(1, 20),
       tau=st.sampled_from([0.01, 0.07, 1.0]))
def test_losses_match_numpy_oracle(seed, b, k, tau):
    img, txt, y = _instance(seed, b, k)
    want = np_contrastive_ce(img, txt, y, tau)
    t = lambda a: torch.from_numpy(a)  # noqa: E731
    got7 = loss_image_adv_text_clean(t(img), t(txt), t(y), tau)
    got8 = loss_text_adv_image_clean(t(img), t(txt), t(y), tau)
    assert abs(float(got7) - want) <= 1e-6 * max(1.0, abs(want))
    assert abs(float(got8) - want) <= 1e-6 * max(1.0, abs(want))


def test_stable_log_softmax_survives_huge_logits():
    z = torch.tensor([[1e4, 0.0, -1e4], [3.0, 3.0, 3.0]], dtype=torch.float64)
    out = stable_log_softmax(z)
    assert torch.isfinite(out).all()
    assert torch.allclose(out[1], torch.full((3,), -np.log(3.0), dtype=torch.float64))
    assert out[0, 0] == 0.0


def test_loss_is_finite_at_small_temperature_with_float32():
    img, txt, y = _instance(0, 8, 10)
    loss = loss_image_adv_text_clean(torch.tensor(img, dtype=torch.float32), torch.tensor(txt, dtype=torch.float32),
                                     torch.tensor(y), 1e-4)
    assert torch.isfinite(loss)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0, 5), b=st.floats(0, 5), l1=st.floats(0, 50), l2=st.floats(0, 50))
def test_total_loss_is_exact_weighted_sum(a, b, l1, l2):
    if a + b == 0:
        with pytest.raises(ValueError):
            LossWeights(a, b)
        return
    out = total_loss(torch.tensor(l1, dtype=torch.float64), torch.tensor(l2, dtype=torch.float64), LossWeights(a, b))
    assert float(out) == a * l1 + b * l2


def test_default_weights_are_equal_halves():
    assert LossWeights() == LossWeights(0.5, 0.5)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 1.0)


def test_labels_validate_range_and_shape():
    with pytest.raises(ValueError):
        ContrastiveLabels(torch.tensor([0, 3]), 3)
    with pytest.raises(ValueError):
        ContrastiveLabels(torch.tensor([[0]]), 3)
    with pytest.raises(EmptyPromptError):
        ContrastiveLabels(torch.tensor([], dtype=torch.long), 0)
    assert ContrastiveLabels(torch.tensor([1, 0]), 3).label_matrix.tolist() == [[0, 1, 0], [1, 0, 0]]


def test_repeated_classes_in_a_batch_are_well_defined():
    img, txt, _ = _instance(1, 6, 3)
    y = np.array([2, 2, 2, 0, 0, 1])
    got = loss_image_adv_text_clean(torch.from_numpy(img), torch.from_numpy(txt), torch.from_numpy(y), 0.1)
    assert float(got) == pytest.approx(np_contrastive_ce(img, txt, y, 0.1), abs=1e-12)


def test_empty_text_side_raises():
    with pytest.raises(EmptyPromptError):
        loss_text_adv_image_clean(torch.zeros(2, 4), torch.zeros(0, 4), torch.tensor([0, 0]), 0.01)


def test_argmax_ties_go_to_lowest_index():
    img = torch.tensor([[1.0, 0.0]])
    txt = torch.tensor([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    pred, probs = predict_from_embeddings(img, txt, 0.01)
    assert pred.item() == 1
    assert torch.allclose(probs.sum(dim=1), torch.ones(1))


def test_zero_shot_predict_probabilities_sum_to_one():
    model = toy_model()
    _, prompts, _ = toy_workspace()
    pred, probs = zero_shot_predict(model, random_images(4), prompts)
    assert pred.shape == (4,) and probs.shape == (4, len(prompts))
    assert torch.allclose(probs.sum(dim=1), torch.ones(4), atol=1e-5)
