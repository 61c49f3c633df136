"""Root-seed splitting.

Every random draw in the toolkit comes from a generator seeded by
``derive_seed(root, label, index)``: the SHA-256 of ``"{root}/{label}/{index}"``
truncated to 63 bits. Labels name the consumer ("epoch", "pgd-init",
"few-shot", ...) and the index separates repeated draws (epoch number,
example id). Two consumers never share a stream, and adding a new consumer
does not shift the streams of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, label: str, index: int = 0) -> int:
    digest = hashlib.sha256(f"{int(root)}/{label}/{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def torch_generator(root: int, label: str, index: int = 0) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(root, label, index))
    return gen


def numpy_rng(root: int, label: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label, index))
