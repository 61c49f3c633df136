import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import CLASSES, linear_model, random_images, toy_model, toy_workspace
from mmcoa.encoders import (
    CHECKPOINT_FORMAT_VERSION,
    CheckpointVersionError,
    PromptSet,
    ShapeError,
    ToyDualEncoder,
    VocabularyError,
    Vocabulary,
    build_prompts,
    embed_images,
    embed_texts,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    template_words,
)


def test_build_prompts_spans_point_at_class_words():
    prompts = build_prompts(["red circle", "ring"])
    assert prompts.prompts[0] == ("this", "is", "a", "photo", "of", "a", "red", "circle")
    assert prompts.class_token_spans == ((6, 8), (6, 7))
    assert template_words() == ["this", "is", "a", "photo", "of", "a"]


def test_build_prompts_accepts_brace_placeholder():
    assert build_prompts(["dog"], "a {} in the wild").prompts[0] == ("a", "dog", "in", "the", "wild")


def test_prompt_set_rejects_bad_span_and_length_change():
    with pytest.raises(ValueError):
        PromptSet(("a",), (("x",),), ((0, 2),))
    with pytest.raises(ValueError):
        build_prompts(["dog"]).replace_prompt(0, ["too", "short"])


def test_vocabulary_reserves_pad_and_unk():
    v = Vocabulary(["Dog", "cat", "dog"])
    assert v.id("dog") == 2 and v.id("CAT") == 3 and v.id("zebra") == 1
    assert "dog" in v and "zebra" not in v and "<pad>" not in v
    assert len(v) == 4


@settings(max_examples=25, deadline=None)
@given(batch=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_image_embeddings_have_unit_norm(batch, seed):
    model = toy_model(seed % 3)
    emb = embed_images(model, random_images(batch, seed=seed))
    assert emb.shape == (batch, model.embed_dim)
    assert torch.allclose(emb.norm(dim=1), torch.ones(batch), atol=1e-6)


def test_text_embeddings_have_unit_norm_and_accept_ids():
    model = toy_model()
    vocab, prompts, _ = toy_workspace()
    emb = embed_texts(model, prompts)
    assert torch.allclose(emb.norm(dim=1), torch.ones(len(prompts)), atol=1e-6)
    ids, mask = model.token_ids(prompts.prompts)
    assert torch.equal(embed_texts(model, (ids, mask)), emb)


def test_empty_prompt_list_gives_empty_matrix():
    model = toy_model()
    assert embed_texts(model, []).shape == (0, model.embed_dim)


def test_out_of_vocabulary_id_raises():
    model = toy_model()
    with pytest.raises(VocabularyError):
        embed_texts(model, torch.tensor([[2, len(model.vocab)]]))


def test_unknown_words_map_to_unk():
    model = toy_model()
    ids, _ = model.token_ids([["zebra", "circle"]])
    assert ids[0, 0].item() == 1


def test_image_shape_and_range_are_checked():
    model = toy_model()
    with pytest.raises(ShapeError):
        embed_images(model, torch.rand(2, 3, 8, 8))
    with pytest.raises(ValueError):
        embed_images(model, torch.full((1, 3, 16, 16), 1.5))


def test_toy_tower_rejects_odd_sizes():
    with pytest.raises(ShapeError):
        ToyDualEncoder(["a"], image_shape=(3, 10, 10))


def test_seeded_init_is_deterministic():
    a, b = toy_model(3), toy_model(3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_temperature_is_a_buffer_not_a_parameter():
    model = toy_model()
    assert "temperature" in model.state_dict()
    assert all(name != "temperature" for name, _ in model.named_parameters())
    assert float(model.temperature) == pytest.approx(0.01)


def test_image_and_text_parameter_groups_partition_parameters():
    model = toy_model()
    ids = {id(p) for p in model.image_parameters()} | {id(p) for p in model.text_parameters()}
    assert ids == {id(p) for p in model.parameters()}
    assert not {id(p) for p in model.image_parameters()} & {id(p) for p in model.text_parameters()}


@pytest.mark.parametrize("make", [toy_model, linear_model])
def test_checkpoint_round_trip(tmp_path, make):
    model = make(1)
    images = random_images(3, size=model.image_shape[1], dtype=model.dtype)
    _, prompts, _ = toy_workspace()
    save_checkpoint(model, tmp_path / "m.pt", "abc123")
    loaded = load_checkpoint(tmp_path / "m.pt")
    assert loaded.checkpoint_hash == "abc123" and loaded.dtype == model.dtype
    assert torch.equal(embed_images(loaded, images), embed_images(model, images))
    assert torch.equal(embed_texts(loaded, prompts), embed_texts(model, prompts))


def test_checkpoint_bytes_are_deterministic(tmp_path):
    save_checkpoint(toy_model(2), tmp_path / "a.pt", "h")
    save_checkpoint(toy_model(2), tmp_path / "b.pt", "h")
    assert (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()


def test_checkpoint_version_mismatch(tmp_path):
    save_checkpoint(toy_model(), tmp_path / "m.pt")
    payload = read_checkpoint(tmp_path / "m.pt")
    payload["format_version"] = CHECKPOINT_FORMAT_VERSION + 1
    torch.save(payload, tmp_path / "future.pt")
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "future.pt")


def test_workspace_classes_are_in_vocab():
    vocab, _, _ = toy_workspace()
    assert all(c in vocab for c in CLASSES)
