"""
Counter-based random streams.

Every stream is a numpy ``Philox`` (4x64, 10 rounds) generator keyed by
the run seed and a stage name. The key is the first 128 bits of
``sha256(f"{seed}:{name}")`` so that a given (seed, name) pair maps to the
same stream in any implementation of Philox4x64-10.
"""
import hashlib

import numpy as np
from scipy.special import ndtri


def stream_key(seed: int, name: str) -> np.ndarray:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for stage ``name`` under run ``seed``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))


def exact_binary(rng, n, p):
    """0/1 vector of length ``n`` with exactly ``round(n p)`` ones, shuffled."""
    ones = int(np.floor(n * p + 0.5))
    out = np.zeros(n, dtype=np.int8)
    out[:ones] = 1
    rng.shuffle(out)
    return out


def quota_counts(n, probs):
    """Largest-remainder apportionment of ``n`` items to ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    probs = probs / probs.sum()
    raw = n * probs
    counts = np.floor(raw).astype(np.int64)
    short = n - counts.sum()
    if short:
        # ties resolved by lower index
        order = np.lexsort((np.arange(probs.size), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def exact_categorical(rng, n, probs):
    """Codes ``0..len(probs)-1`` in quota proportions, shuffled."""
    counts = quota_counts(n, probs)
    out = np.repeat(np.arange(counts.size), counts)
    rng.shuffle(out)
    return out


def stratified_uniform(rng, n):
    """One uniform draw per equal-width cell of [0, 1), randomly permuted."""
    if n == 0:
        return np.empty(0)
    return (rng.permutation(n) + rng.random(n)) / n


def stratified_normal(rng, n):
    """Standard normal draws via the inverse CDF of stratified uniforms."""
    return ndtri(stratified_uniform(rng, n))
