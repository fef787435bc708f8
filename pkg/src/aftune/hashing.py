"""Map-reduce chunked hashing of tensors.

Tensors are flattened row-major and serialized as 4-byte little-endian
IEEE-754 bit patterns, partitioned into fixed-size chunks (the final
chunk may be short and is hashed as-is, unpadded), every chunk hashed
independently, and the concatenation of the chunk digests hashed once
more into the commitment. The result is independent of how chunk work
is scheduled across workers.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._blake3 import blake3_digest

DEFAULT_CHUNK_SIZE = 4096  # elements
DEFAULT_ALGO = "blake3"
ELEMENT_BYTES = 4

ALGORITHMS = ("blake3", "sha256")


def _sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()

_HASHERS = {"blake3": blake3_digest, "sha256": _sha256}


@dataclass(frozen=True)
class Digest:
    """32-byte hash value plus the algorithm that produced it."""

    value: bytes
    algo: str = DEFAULT_ALGO

    def __post_init__(self):
        if len(self.value) != 32:
            raise ValueError(f"digest must be 32 bytes, got {len(self.value)}")
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown hash algorithm {self.algo!r}")

    @property
    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def from_hex(cls, s: str, algo: str = DEFAULT_ALGO) -> "Digest":
        return cls(bytes.fromhex(s), algo)

    def __repr__(self):
        return f"Digest({self.algo}:{self.hex[:12]}…)"


def tensor_bytes(arr: np.ndarray) -> bytes:
    """Canonical serialization: row-major little-endian binary32."""
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def chunked_hash(
    data: bytes | np.ndarray,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    algo: str = DEFAULT_ALGO,
    workers: int = 1,
) -> Digest:
    """Hash a tensor (or raw byte string) with the map-reduce scheme.

    ``chunk_size`` is in elements (4 bytes each). ``workers`` only affects
    wall time; the digest is identical for any worker count.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if algo not in _HASHERS:
        raise ValueError(f"unknown hash algorithm {algo!r}")
    if isinstance(data, np.ndarray):
        data = tensor_bytes(data)
    h = _HASHERS[algo]
    chunk_bytes = chunk_size * ELEMENT_BYTES
    m = max(1, -(-len(data) // chunk_bytes))
    chunks = [data[k * chunk_bytes:(k + 1) * chunk_bytes] for k in range(m)]
    if workers > 1 and m > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunk_digests = list(pool.map(h, chunks))
    else:
        chunk_digests = [h(c) for c in chunks]
    return Digest(h(b"".join(chunk_digests)), algo)


def hash_bytes(data: bytes, algo: str = DEFAULT_ALGO) -> Digest:
    """Plain (non-chunked) hash, for manifests and ledger framing."""
    return Digest(_HASHERS[algo](data), algo)
