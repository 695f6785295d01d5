"""Small dense numeric kernel.

Matrices are plain ``float64`` numpy arrays. Randomness comes from numpy's
``Philox`` counter-based bit generator, which yields the same stream on every
platform for a given key. Seeds for sub-tasks are derived from a root seed
and a namespace path through :class:`numpy.random.SeedSequence`, with string
components hashed by CRC-32 so the mapping does not depend on ``PYTHONHASHSEED``.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from .errors import DegenerateVectorError, NumericDomainError


def _namespace_words(namespace):
    words = []
    for part in namespace:
        if isinstance(part, str):
            words.append(zlib.crc32(part.encode("utf-8")))
        else:
            words.append(int(part))
    return words


def seed_sequence(seed: int, *namespace) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *_namespace_words(namespace)])


def make_rng(seed: int, *namespace) -> np.random.Generator:
    """Return a Philox generator keyed by ``seed`` and an optional namespace path.

    >>> make_rng(7, "stream").standard_normal() == make_rng(7, "stream").standard_normal()
    True
    """
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *namespace)))


def derive_seed(seed: int, *namespace) -> int:
    """Deterministic 63-bit child seed for ``namespace`` under ``seed``."""
    return int(seed_sequence(seed, *namespace).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{what} contains non-finite values")


def softmax(logits):
    """Row-wise softmax with max subtraction. Accepts a vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] < 1:
        raise NumericDomainError("softmax needs at least one logit")
    _check_finite(z, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    _check_finite(z, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(probs):
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    _check_finite(p, "probabilities")
    if np.any(p < 0):
        raise NumericDomainError("probabilities must be non-negative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise NumericDomainError("probabilities must sum to 1")
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def entropy_from_logits(logits):
    """Entropy of softmax(logits), computed via log-softmax for accuracy."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    return -(p * logp).sum(axis=-1)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise NumericDomainError(f"length mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine of a zero-norm vector")
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def cosine_rows(rows, b):
    """Cosine of every row of ``rows`` against ``b``."""
    rows = np.asarray(rows, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    nr = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    nb = math.sqrt(float(np.dot(b, b)))
    if nb == 0.0 or np.any(nr == 0.0):
        raise DegenerateVectorError("cosine of a zero-norm vector")
    return np.clip(rows @ b / (nr * nb), -1.0, 1.0)


def exact_column_mean(rows):
    """Column means via correctly rounded summation, so row order cannot change a bit."""
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    return np.array([math.fsum(rows[:, j]) / n for j in range(rows.shape[1])])
