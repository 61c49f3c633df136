"""Zero-shot classification and the image/text adversarial contrastive losses.

Label model: in classification mode the text side is always the fixed set of
K class prompts, and image ``i``'s positive is the prompt of its class. Labels
are therefore class indices into the prompt set, never batch positions, which
keeps the loss well defined when a minibatch repeats a class.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .encoders import DualEncoder, PromptSet, embed_images, embed_texts


class EmptyPromptError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveLabels:
    target_index: torch.Tensor
    num_classes: int

    def __post_init__(self):
        t = self.target_index
        if t.dim() != 1 or t.dtype not in (torch.int64, torch.int32):
            raise ValueError("target_index must be a 1-D integer tensor")
        if self.num_classes <= 0:
            raise EmptyPromptError("contrastive labels need at least one class prompt")
        if t.numel() and (t.min() < 0 or t.max() >= self.num_classes):
            raise ValueError(f"target index outside [0, {self.num_classes})")

    @property
    def label_matrix(self) -> torch.Tensor:
        """K-hot matrix ``y`` with ``y[i, j] = 1`` iff image i belongs to class j."""
        return F.one_hot(self.target_index.long(), self.num_classes)


@dataclass(frozen=True)
class LossWeights:
    image_adv: float = 0.5  # weight on the adversarial-image / clean-text loss
    text_adv: float = 0.5  # weight on the clean-image / adversarial-text loss

    def __post_init__(self):
        if self.image_adv < 0 or self.text_adv < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.image_adv + self.text_adv <= 0:
            raise ValueError("at least one loss weight must be positive")


def _as_labels(labels, num_classes: int) -> ContrastiveLabels:
    if isinstance(labels, ContrastiveLabels):
        if labels.num_classes != num_classes:
            raise ValueError(f"labels index {labels.num_classes} classes but {num_classes} texts were given")
        return labels
    return ContrastiveLabels(torch.as_tensor(labels, dtype=torch.long).reshape(-1), num_classes)


def similarity_logits(image_embeds: torch.Tensor, text_embeds: torch.Tensor, temperature) -> torch.Tensor:
    return image_embeds @ text_embeds.T / temperature


def stable_log_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise log-softmax with the row max subtracted before exponentiation."""
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    return shifted - shifted.exp().sum(dim=-1, keepdim=True).log()


def _contrastive_ce(image_embeds, text_embeds, labels, temperature) -> torch.Tensor:
    if text_embeds.shape[0] == 0:
        raise EmptyPromptError("contrastive loss needs at least one text embedding")
    labels = _as_labels(labels, text_embeds.shape[0])
    if labels.target_index.shape[0] != image_embeds.shape[0]:
        raise ValueError("one label per image is required")
    log_p = stable_log_softmax(similarity_logits(image_embeds, text_embeds, temperature))
    y = labels.label_matrix.to(log_p.dtype)
    return -(y * log_p).sum(dim=1).mean()


def loss_image_adv_text_clean(adv_image_embeds, clean_text_embeds, labels, temperature) -> torch.Tensor:
    """Cross-entropy of adversarial image embeddings against clean class prompts."""
    return _contrastive_ce(adv_image_embeds, clean_text_embeds, labels, temperature)


def loss_text_adv_image_clean(clean_image_embeds, adv_text_embeds, labels, temperature) -> torch.Tensor:
    """Cross-entropy of clean image embeddings against adversarial class prompts.

    For each image the softmax runs over the adversarial text index, exactly
    mirroring :func:`loss_image_adv_text_clean`; no symmetric text-axis term.
    """
    return _contrastive_ce(clean_image_embeds, adv_text_embeds, labels, temperature)


def total_loss(image_adv_loss, text_adv_loss, weights: LossWeights):
    return weights.image_adv * image_adv_loss + weights.text_adv * text_adv_loss


def predict_from_embeddings(image_embeds, text_embeds, temperature) -> tuple[torch.Tensor, torch.Tensor]:
    if text_embeds.shape[0] == 0:
        raise EmptyPromptError("zero-shot prediction needs at least one prompt")
    probs = stable_log_softmax(similarity_logits(image_embeds, text_embeds, temperature)).exp()
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    return probs.argmax(dim=-1), probs


@torch.no_grad()
def zero_shot_predict(model: DualEncoder, images: torch.Tensor, prompts: PromptSet) -> tuple[torch.Tensor, torch.Tensor]:
    """Predicted class index and class probabilities for each image."""
    if len(prompts) == 0:
        raise EmptyPromptError("zero-shot prediction needs at least one prompt")
    return predict_from_embeddings(embed_images(model, images), embed_texts(model, prompts), model.temperature)
