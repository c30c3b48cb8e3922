"""Small numeric helpers shared across the package."""

from __future__ import annotations

import numpy as np


class NonFiniteError(ValueError):
    """A computation produced NaN or infinity."""


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def sup_norm(v) -> float:
    v = np.asarray(v)
    return float(np.max(np.abs(v))) if v.size else 0.0


def rng_from(*key: int) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of non-negative integers."""
    parts = [int(k) for k in key]
    if any(k < 0 for k in parts):
        raise ValueError("rng keys must be non-negative")
    return np.random.default_rng(np.random.SeedSequence(parts))


def check_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return arr
