"""
Splittable seed derivation.

Every random stream in pychangen is keyed by a root seed plus a path of
integer or string keys (sample index, step index, purpose), so work can be
sharded across processes in any order and still reproduce bit-for-bit.
"""

import hashlib
from typing import Union

import numpy as np
import torch

Key = Union[int, str]

_SEED_MASK = (1 << 63) - 1


def derive_seed(root_seed: int, *keys: Key) -> int:
    """
    Hash a root seed and a key path into a 63-bit seed.

    Args:
        root_seed: Run-level seed
        *keys: Path identifying the stream (e.g. sample index, "events", step)

    Returns:
        Non-negative integer seed
    """
    text = ":".join([str(int(root_seed))] + [str(k) for k in keys])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & _SEED_MASK


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed) & _SEED_MASK)
    return gen
