"""Pure-Python BLAKE3 (hash mode only, 32-byte output).

No binary wheel for BLAKE3 is available in this environment, so the
algorithm is implemented from the public specification. Only the plain
hash mode is provided (no keyed hashing, no key derivation, no XOF
beyond 32 bytes). When numba is importable the per-block compression
runs through a jitted kernel; otherwise a plain-int fallback is used.
Both paths are cross-checked in the test suite.
"""

from __future__ import annotations

import struct

_IV = (
    0x6A09E667, 0xBB67AE85, 0x3C6EF372, 0xA54FF53A,
    0x510E527F, 0x9B05688C, 0x1F83D9AB, 0x5BE0CD19,
)

_PERM = (2, 6, 3, 10, 7, 0, 4, 13, 1, 11, 12, 5, 9, 14, 15, 8)

_CHUNK_LEN = 1024
_BLOCK_LEN = 64

_CHUNK_START = 1
_CHUNK_END = 2
_PARENT = 4
_ROOT = 8

_MASK = 0xFFFFFFFF


def _g(v, a, b, c, d, mx, my):
    v[a] = (v[a] + v[b] + mx) & _MASK
    v[d] ^= v[a]
    v[d] = ((v[d] >> 16) | (v[d] << 16)) & _MASK
    v[c] = (v[c] + v[d]) & _MASK
    v[b] ^= v[c]
    v[b] = ((v[b] >> 12) | (v[b] << 20)) & _MASK
    v[a] = (v[a] + v[b] + my) & _MASK
    v[d] ^= v[a]
    v[d] = ((v[d] >> 8) | (v[d] << 24)) & _MASK
    v[c] = (v[c] + v[d]) & _MASK
    v[b] ^= v[c]
    v[b] = ((v[b] >> 7) | (v[b] << 25)) & _MASK


def _compress_py(cv, block_words, counter, block_len, flags):
    v = [
        cv[0], cv[1], cv[2], cv[3], cv[4], cv[5], cv[6], cv[7],
        _IV[0], _IV[1], _IV[2], _IV[3],
        counter & _MASK, (counter >> 32) & _MASK, block_len, flags,
    ]
    m = list(block_words)
    for r in range(7):
        _g(v, 0, 4, 8, 12, m[0], m[1])
        _g(v, 1, 5, 9, 13, m[2], m[3])
        _g(v, 2, 6, 10, 14, m[4], m[5])
        _g(v, 3, 7, 11, 15, m[6], m[7])
        _g(v, 0, 5, 10, 15, m[8], m[9])
        _g(v, 1, 6, 11, 12, m[10], m[11])
        _g(v, 2, 7, 8, 13, m[12], m[13])
        _g(v, 3, 4, 9, 14, m[14], m[15])
        if r < 6:
            m = [m[p] for p in _PERM]
    return [
        v[0] ^ v[8], v[1] ^ v[9], v[2] ^ v[10], v[3] ^ v[11],
        v[4] ^ v[12], v[5] ^ v[13], v[6] ^ v[14], v[7] ^ v[15],
        v[8] ^ cv[0], v[9] ^ cv[1], v[10] ^ cv[2], v[11] ^ cv[3],
        v[12] ^ cv[4], v[13] ^ cv[5], v[14] ^ cv[6], v[15] ^ cv[7],
    ]


_compress = _compress_py

try:  # pragma: no cover - exercised indirectly
    import numba
    import numpy as _np

    @numba.njit(cache=True)
    def _compress_nb(cv, block_words, counter, block_len, flags):  # pragma: no cover
        iv = _np.empty(8, dtype=_np.uint32)
        iv[0] = 0x6A09E667
        iv[1] = 0xBB67AE85
        iv[2] = 0x3C6EF372
        iv[3] = 0xA54FF53A
        iv[4] = 0x510E527F
        iv[5] = 0x9B05688C
        iv[6] = 0x1F83D9AB
        iv[7] = 0x5BE0CD19
        perm = _np.array((2, 6, 3, 10, 7, 0, 4, 13, 1, 11, 12, 5, 9, 14, 15, 8),
                         dtype=_np.int64)
        cols = _np.array(
            ((0, 4, 8, 12), (1, 5, 9, 13), (2, 6, 10, 14), (3, 7, 11, 15),
             (0, 5, 10, 15), (1, 6, 11, 12), (2, 7, 8, 13), (3, 4, 9, 14)),
            dtype=_np.int64)
        v = _np.empty(16, dtype=_np.uint32)
        for i in range(8):
            v[i] = cv[i]
        for i in range(4):
            v[8 + i] = iv[i]
        v[12] = _np.uint32(counter & 0xFFFFFFFF)
        v[13] = _np.uint32((counter >> 32) & 0xFFFFFFFF)
        v[14] = _np.uint32(block_len)
        v[15] = _np.uint32(flags)
        m = block_words.copy()
        for r in range(7):
            for gi in range(8):
                a, b, c, d = cols[gi]
                mx = m[2 * gi]
                my = m[2 * gi + 1]
                v[a] = v[a] + v[b] + mx
                v[d] ^= v[a]
                v[d] = (v[d] >> 16) | (v[d] << 16)
                v[c] = v[c] + v[d]
                v[b] ^= v[c]
                v[b] = (v[b] >> 12) | (v[b] << 20)
                v[a] = v[a] + v[b] + my
                v[d] ^= v[a]
                v[d] = (v[d] >> 8) | (v[d] << 24)
                v[c] = v[c] + v[d]
                v[b] ^= v[c]
                v[b] = (v[b] >> 7) | (v[b] << 25)
            if r < 6:
                m2 = _np.empty(16, dtype=_np.uint32)
                for i in range(16):
                    m2[i] = m[perm[i]]
                m = m2
        out = _np.empty(16, dtype=_np.uint32)
        for i in range(8):
            out[i] = v[i] ^ v[8 + i]
            out[8 + i] = v[8 + i] ^ cv[i]
        return out

    def _compress_fast(cv, block_words, counter, block_len, flags):
        out = _compress_nb(
            _np.asarray(cv, dtype=_np.uint32),
            _np.asarray(block_words, dtype=_np.uint32),
            counter, block_len, flags,
        )
        return [int(x) for x in out]

    _compress = _compress_fast
except ImportError:  # pragma: no cover
    pass


def _words(block: bytes) -> list[int]:
    if len(block) < _BLOCK_LEN:
        block = block + b"\x00" * (_BLOCK_LEN - len(block))
    return list(struct.unpack("<16I", block))


class _Output:
    """Pending compression: finalized either as a chaining value or the root."""

    __slots__ = ("cv", "block_words", "counter", "block_len", "flags")

    def __init__(self, cv, block_words, counter, block_len, flags):
        self.cv = cv
        self.block_words = block_words
        self.counter = counter
        self.block_len = block_len
        self.flags = flags

    def chaining_value(self):
        return _compress(self.cv, self.block_words, self.counter,
                         self.block_len, self.flags)[:8]

    def root_digest(self) -> bytes:
        out = _compress(self.cv, self.block_words, 0,
                        self.block_len, self.flags | _ROOT)
        return struct.pack("<8I", *out[:8])


def _chunk_output(chunk: bytes, chunk_index: int) -> _Output:
    cv = list(_IV)
    n_blocks = max(1, (len(chunk) + _BLOCK_LEN - 1) // _BLOCK_LEN)
    for b in range(n_blocks):
        block = chunk[b * _BLOCK_LEN:(b + 1) * _BLOCK_LEN]
        flags = 0
        if b == 0:
            flags |= _CHUNK_START
        if b == n_blocks - 1:
            flags |= _CHUNK_END
            return _Output(cv, _words(block), chunk_index, len(block), flags)
        cv = _compress(cv, _words(block), chunk_index, _BLOCK_LEN, flags)[:8]
    raise AssertionError("unreachable")


def _parent_output(left_cv, right_cv) -> _Output:
    return _Output(list(_IV), list(left_cv) + list(right_cv), 0, _BLOCK_LEN, _PARENT)


def _left_len(n_chunks: int) -> int:
    # largest power of two strictly less than n_chunks
    p = 1
    while p * 2 < n_chunks:
        p *= 2
    return p


def _subtree(data: bytes, chunk_index: int, n_chunks: int) -> _Output:
    if n_chunks == 1:
        return _chunk_output(data, chunk_index)
    split = _left_len(n_chunks)
    left = _subtree(data[:split * _CHUNK_LEN], chunk_index, split)
    right = _subtree(data[split * _CHUNK_LEN:], chunk_index + split,
                     n_chunks - split)
    return _parent_output(left.chaining_value(), right.chaining_value())


def blake3_digest(data: bytes) -> bytes:
    """32-byte BLAKE3 hash of ``data``."""
    n_chunks = max(1, (len(data) + _CHUNK_LEN - 1) // _CHUNK_LEN)
    return _subtree(data, 0, n_chunks).root_digest()
