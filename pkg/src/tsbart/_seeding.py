"""Seed derivation.

Every random stream is derived from one master seed and a component
name: the name is hashed (SHA-256, first 8 bytes) into a stream id and
combined with the master seed through :class:`numpy.random.SeedSequence`.
Streams for different components are therefore independent, and the
derivation does not depend on process layout or execution order.
"""

import hashlib

import numpy as np


def stream_id(component: str) -> int:
    digest = hashlib.sha256(component.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(master: int, component: str) -> int:
    """Return a 63-bit integer seed for ``component`` under ``master``."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, stream_id(component)])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(master: int, component: str | None = None) -> np.random.Generator:
    if component is None:
        return np.random.default_rng(int(master))
    return np.random.default_rng(derive_seed(master, component))
