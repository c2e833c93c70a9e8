"""Deterministic random streams shared by every stochastic operation.

All randomness in the package flows through counter-based Philox streams
keyed by label tuples, so any experiment cell can be replayed bit-for-bit
without running the cells before it.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtri

__all__ = ["stream_seed", "philox_stream", "uniform_open", "standard_normal"]

_SEP = "\x1f"


def _digest(labels) -> bytes:
    text = _SEP.join(str(lab) for lab in labels)
    return hashlib.sha256(text.encode("utf-8")).digest()


def stream_seed(*labels) -> int:
    """Collapse a label tuple into a stable non-negative 63-bit integer.

    Depends only on the string form of the labels, never on platform,
    process layout, or call order, so it is safe to persist in result
    files and reuse to reconstruct the stream.
    """
    return int.from_bytes(_digest(labels)[:8], "little") >> 1


def philox_stream(*labels) -> np.random.Generator:
    """Independent generator keyed by a label tuple.

    Philox is counter-based, so streams derived from distinct labels never
    overlap and draws do not depend on scheduling order.
    """
    key = np.frombuffer(_digest(labels)[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def uniform_open(rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniform draws on the open interval (0, 1).

    Built from 53-bit integers offset by half a step, so 0.0 and 1.0 are
    never returned and inverse-CDF transforms stay finite.
    """
    ints = rng.integers(0, 1 << 53, size=size)
    return (np.asarray(ints, dtype=np.float64) + 0.5) * 2.0**-53


def standard_normal(rng: np.random.Generator, size=None) -> np.ndarray:
    """Standard-normal draws via the inverse CDF of open uniforms."""
    return ndtri(uniform_open(rng, size))
