"""Seed splitting: every stage draws from its own labeled substream of one root seed.

``derive_seed(root, "lora/stripes")`` hashes the label with SHA-256 and mixes it
with the root through :class:`numpy.random.SeedSequence`, so substreams are
independent of each other and of the order in which stages run.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF, *words])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(root: int, label: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root, label))


def numpy_rng(root: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label))
