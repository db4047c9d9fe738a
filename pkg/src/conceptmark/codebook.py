"""Concept registry: bit-secret codebooks with distance guarantees.

Two construction regimes:

* N <= b (and b admits a Hadamard matrix): codewords are seed-masked,
  column-permuted rows of a Hadamard matrix of order b, so every pair
  differs in exactly b/2 positions.  Balanced distances make the derived
  spatial watermarks mutually near-orthogonal, which a plain random
  codebook cannot guarantee for more than a handful of codewords.
* otherwise: random distinct codewords, rejection-resampled until the
  minimum pairwise Hamming distance reaches max(8, b // 8).  For very
  large N the distance check is a sampled audit (random codewords at
  b >= 128 violate the floor with negligible probability).

Both regimes are deterministic per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import CodecError, Secret

EXHAUSTIVE_AUDIT_LIMIT = 4096  # above this, audit a random sample of pairs
AUDIT_SAMPLE_PAIRS = 1_000_000


class CodebookError(ValueError):
    """Raised when a registry cannot satisfy its distance target."""


@dataclass(frozen=True)
class ConceptRegistry:
    """Bijection concept-id <-> secret, with an audited distance floor."""

    secrets: np.ndarray = field(repr=False)  # (N, b) uint8
    min_hamming: int
    seed: int

    def __post_init__(self):
        self.secrets.setflags(write=False)

    @property
    def n_concepts(self) -> int:
        return int(self.secrets.shape[0])

    @property
    def b(self) -> int:
        return int(self.secrets.shape[1])

    def secret(self, concept: int) -> Secret:
        if not 0 <= concept < self.n_concepts:
            raise CodebookError(f"concept id {concept} out of range [0, {self.n_concepts})")
        return Secret(self.secrets[concept])


def sylvester_hadamard(order: int) -> np.ndarray:
    if order < 1 or order & (order - 1):
        raise CodebookError(f"Sylvester order must be a power of two, got {order}")
    h = np.ones((1, 1))
    while h.shape[0] < order:
        h = np.block([[h, h], [h, -h]])
    return h


def paley_hadamard(q: int) -> np.ndarray:
    """Hadamard matrix of order q + 1 for a prime q with q % 4 == 3."""
    if q % 4 != 3 or not _is_prime(q):
        raise CodebookError(f"Paley construction needs a prime q = 3 (mod 4), got {q}")
    residues = np.zeros(q, dtype=bool)
    residues[[(i * i) % q for i in range(1, q)]] = True
    chi = np.where(residues, 1.0, -1.0)
    chi[0] = 0.0
    idx = (np.arange(q)[None, :] - np.arange(q)[:, None]) % q
    jacobsthal = chi[idx]
    s = np.zeros((q + 1, q + 1))
    s[0, 1:] = 1.0
    s[1:, 0] = -1.0
    s[1:, 1:] = jacobsthal
    h = np.eye(q + 1) + s
    assert np.array_equal(h @ h.T, (q + 1) * np.eye(q + 1))
    return h


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    for p in range(2, int(math.isqrt(n)) + 1):
        if n % p == 0:
            return False
    return True


def hadamard(order: int) -> np.ndarray | None:
    """Hadamard matrix of the given order, or None if we cannot build one.

    Covers Sylvester (powers of two) and Paley-I cores doubled up to the
    target, which includes the default codebook width 160 = 8 * (19 + 1).
    """
    if order == 1:
        return np.ones((1, 1))
    if order % 4 and order != 2:
        return None
    twos = 0
    core = order
    while core % 2 == 0:
        core //= 2
        twos += 1
    if core == 1:
        return sylvester_hadamard(order)
    # try Paley cores core * 2^k for increasing k, doubling the rest
    h = None
    for k in range(twos + 1):
        m = core * (1 << k)
        if m % 4 == 0 and _is_prime(m - 1) and (m - 1) % 4 == 3:
            h = paley_hadamard(m - 1)
            for _ in range(twos - k):
                h = np.kron(np.array([[1.0, 1.0], [1.0, -1.0]]), h)
            break
    return h


def _packed(secrets: np.ndarray) -> np.ndarray:
    return np.packbits(secrets, axis=1)


def _pairwise_min_hamming(packed: np.ndarray, chunk: int = 512) -> int:
    n = packed.shape[0]
    best = packed.shape[1] * 8 + 1
    for i in range(0, n, chunk):
        block = packed[i : i + chunk]
        dists = np.bitwise_count(block[:, None, :] ^ packed[None, i:, :]).sum(axis=2)
        rows = np.arange(block.shape[0])
        dists[rows, rows] = best  # mask self-pairs on the diagonal of this block
        if dists.size:
            best = min(best, int(dists.min()))
    return best


def sampled_min_hamming(secrets: np.ndarray, n_pairs: int, seed: int = 0) -> int:
    """Minimum Hamming distance over a random sample of codeword pairs."""
    n = secrets.shape[0]
    if n < 2:
        raise CodebookError("need at least two codewords to audit")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA0D17]))
    packed = _packed(secrets)
    best = secrets.shape[1] + 1
    for start in range(0, n_pairs, 100_000):
        count = min(100_000, n_pairs - start)
        i = rng.integers(0, n, count)
        j = rng.integers(0, n - 1, count)
        j = np.where(j >= i, j + 1, j)  # distinct pairs
        d = np.bitwise_count(packed[i] ^ packed[j]).sum(axis=1)
        best = min(best, int(d.min()))
    return best


def audit_min_hamming(registry: ConceptRegistry, seed: int = 0) -> int:
    """Exhaustive pairwise minimum for small registries, sampled for large ones."""
    if registry.n_concepts <= EXHAUSTIVE_AUDIT_LIMIT:
        return _pairwise_min_hamming(_packed(registry.secrets))
    return sampled_min_hamming(registry.secrets, AUDIT_SAMPLE_PAIRS, seed=seed)


def distance_floor(b: int) -> int:
    return max(8, b // 8)


def _hadamard_codebook(n: int, b: int, rng: np.random.Generator) -> np.ndarray | None:
    h = hadamard(b)
    if h is None or n > b:
        return None
    rows = rng.permutation(b)[:n]
    cols = rng.permutation(b)
    mask = rng.integers(0, 2, b, dtype=np.uint8)
    bits = (h[rows][:, cols] > 0).astype(np.uint8) ^ mask
    return np.ascontiguousarray(bits)


def _random_codebook(n: int, b: int, floor: int, rng: np.random.Generator) -> np.ndarray:
    secrets = rng.integers(0, 2, (n, b), dtype=np.uint8)
    if n <= EXHAUSTIVE_AUDIT_LIMIT:
        for _ in range(200):
            packed = _packed(secrets)
            dists = np.bitwise_count(packed[:, None, :] ^ packed[None, :, :]).sum(axis=2)
            np.fill_diagonal(dists, b + 1)
            vi, vj = np.where(dists < floor)
            bad = np.unique(vj[vj > vi])  # resample the higher index of each bad pair
            if bad.size == 0:
                return secrets
            secrets[bad] = rng.integers(0, 2, (bad.size, b), dtype=np.uint8)
        raise CodebookError(f"could not reach Hamming floor {floor} for N={n}, b={b}")
    # large N: exact duplicates are resampled, the floor is spot-audited
    for _ in range(200):
        _, first = np.unique(_packed(secrets), axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(n), first)
        if dup.size == 0:
            break
        secrets[dup] = rng.integers(0, 2, (dup.size, b), dtype=np.uint8)
    else:
        raise CodebookError(f"could not draw {n} distinct codewords at b={b}")
    audited = sampled_min_hamming(secrets, AUDIT_SAMPLE_PAIRS, seed=int(rng.integers(2**31)))
    if audited < floor:
        raise CodebookError(f"sampled audit found distance {audited} < floor {floor} (N={n}, b={b})")
    return secrets


def assign_secrets(n_concepts: int, b: int = 160, seed: int = 0) -> ConceptRegistry:
    """Build the codebook for `n_concepts` concepts of `b`-bit secrets."""
    if n_concepts < 1:
        raise CodebookError(f"need at least one concept, got {n_concepts}")
    if b < 16:
        raise CodebookError(f"bit count must be >= 16, got {b}")
    if n_concepts > 2 ** min(b - 4, 40):
        raise CodebookError(f"N={n_concepts} infeasible for b={b}")
    floor = distance_floor(b)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0DE]))
    if n_concepts == 1:
        secrets = rng.integers(0, 2, (1, b), dtype=np.uint8)
        return ConceptRegistry(secrets=secrets, min_hamming=b, seed=int(seed))
    secrets = _hadamard_codebook(n_concepts, b, rng)
    if secrets is not None:
        return ConceptRegistry(secrets=secrets, min_hamming=b // 2, seed=int(seed))
    secrets = _random_codebook(n_concepts, b, floor, rng)
    return ConceptRegistry(secrets=secrets, min_hamming=floor, seed=int(seed))
