"""Deterministic derivation of per-purpose random streams from one master seed.

Every stochastic component draws from a stream named by a string label, so
sub-seeds stay stable when unrelated features are added or reordered.
"""

import hashlib

import numpy as np
import torch


def derive_seed(master: int, label: str) -> int:
    """64-bit seed for the stream named ``label``, a pure function of its inputs."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))


def derive_torch_generator(master: int, label: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(master, label) & 0x7FFF_FFFF_FFFF_FFFF)
    return gen
