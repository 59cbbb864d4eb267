"""Named deterministic random streams.

All randomness in the package flows from a single root seed. Consumers
never share a generator object; instead each stochastic event derives a
child stream keyed by a string name, e.g. ``substream(seed, "data/120")``
for the batch drawn at step 120. Derivation is stateless, so resuming a
run at step t reproduces the exact stream a fresh run would have used,
and adding a new consumer under a new name never perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def stream_seed(root_seed: int, name: str) -> int:
    """Derive a 63-bit child seed from (root seed, stream name)."""
    payload = f"{root_seed}/{name}".encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") & _MASK63


def torch_stream(root_seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stream_seed(root_seed, name))
    return gen


def numpy_stream(root_seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(root_seed, name)))
