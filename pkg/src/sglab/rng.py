"""Labelled random streams.

Every random draw in the package comes from ``stream(seed, *labels)``: a Philox
generator whose key is derived from the root seed and a tuple of labels
(module/purpose strings and integer indices).  Streams never share state, so the
result of an experiment does not depend on evaluation order or worker count.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_word(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer stream labels must be non-negative")
        return int(label)
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream_key(*labels) -> tuple[int, ...]:
    return tuple(_label_word(lab) for lab in labels)


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, labels...)``."""
    if seed is None:
        raise ValueError("an explicit seed is required")
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=stream_key(*labels))
    return np.random.Generator(np.random.Philox(seq))
