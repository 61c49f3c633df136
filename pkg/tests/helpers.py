"""Shared builders and independent numpy oracles for the test suite."""

from __future__ import annotations

import numpy as np
import torch

from mmcoa.attacks import SubstitutionTable
from mmcoa.data import build_vocabulary, class_words
from mmcoa.encoders import LinearDualEncoder, ToyDualEncoder, build_prompts, template_words

CLASSES = ("circle", "square", "triangle", "ring", "plus")


def toy_workspace(classes=CLASSES):
    """(vocab, prompts, candidate table) for a small class set."""
    table = SubstitutionTable.default(class_words([classes]), template_words())
    vocab = build_vocabulary([classes], extra_words=table.words())
    return vocab, build_prompts(classes), table.with_vocab(vocab)


def seeded(cls, seed: int, *args, dtype=torch.float32, **kwargs):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = cls(*args, **kwargs)
    return model.to(dtype).eval()


def toy_model(seed: int = 0, vocab=None, image_size: int = 16, dtype=torch.float32, **kwargs) -> ToyDualEncoder:
    vocab = vocab if vocab is not None else toy_workspace()[0]
    return seeded(ToyDualEncoder, seed, vocab, image_shape=(3, image_size, image_size), dtype=dtype, **kwargs)


def linear_model(seed: int = 0, vocab=None, dtype=torch.float64, **kwargs) -> LinearDualEncoder:
    vocab = vocab if vocab is not None else toy_workspace()[0]
    return seeded(LinearDualEncoder, seed, vocab, dtype=dtype, **kwargs)


def random_images(n: int, size: int = 16, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g, dtype=dtype)


# ---------------------------------------------------------------------------
# numpy oracles, written without reference to the package implementation


def np_normalize(v: np.ndarray) -> np.ndarray:
    return v / np.sqrt((v * v).sum(axis=-1, keepdims=True))


def np_log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def np_contrastive_ce(img: np.ndarray, txt: np.ndarray, labels: np.ndarray, tau: float) -> float:
    """-(1/B) sum_i log softmax_j(<I_i, T_j>/tau)[y_i] for unit-norm rows."""
    logits = img @ txt.T / tau
    return float(-np_log_softmax(logits)[np.arange(len(labels)), labels].mean())


def np_linear_pgd_step(W, b, T, x, y, tau, alpha, eps):
    """One signed-gradient step on -log p_y for u = normalize(W x + b).

    dL/ds = p - e_y, dL/du = T^T (p - e_y) / tau,
    du/dz = (I - u u^T) / |z|, dL/dx = W^T du/dz^T dL/du.
    """
    z = W @ x + b
    nz = np.linalg.norm(z)
    u = z / nz
    s = T @ u / tau
    p = np.exp(np_log_softmax(s))
    e = np.zeros_like(p)
    e[y] = 1.0
    g_u = T.T @ (p - e) / tau
    g_z = (g_u - u * (u @ g_u)) / nz
    g_x = W.T @ g_z
    step = x + alpha * np.sign(g_x)
    return np.clip(np.clip(step, x - eps, x + eps), 0.0, 1.0), g_x
