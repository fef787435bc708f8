"""Map-reduce hashing: reference composition oracle, known digests,
schedule independence, and the dual BLAKE3 compression paths."""

from __future__ import annotations

import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aftune import _blake3
from aftune._blake3 import blake3_digest
from aftune.hashing import (ALGORITHMS, Digest, chunked_hash, hash_bytes,
                            tensor_bytes)

# Published digests for the plain hash mode (empty input and b"abc").
BLAKE3_EMPTY = "af1349b9f5f9a1a6a0404dea36dcc9499bcb25c9adc112b7cc9a93cae41f3262"
BLAKE3_ABC = "6437b3ac38465133ffb63b75273a8db548c558465d79db03fd359c6cd5bd9d85"


def reference_chunked(data: bytes, chunk_size: int, algo: str) -> bytes:
    """Independent composition oracle: split, hash each chunk, hash the
    digest concatenation. Written directly against hashlib/blake3."""
    h = (lambda b: hashlib.sha256(b).digest()) if algo == "sha256" \
        else blake3_digest
    cb = chunk_size * 4
    m = max(1, -(-len(data) // cb))
    return h(b"".join(h(data[k * cb:(k + 1) * cb]) for k in range(m)))


def test_blake3_known_digests():
    assert blake3_digest(b"").hex() == BLAKE3_EMPTY
    assert blake3_digest(b"abc").hex() == BLAKE3_ABC


def test_blake3_python_and_jitted_paths_agree():
    if _blake3._compress is _blake3._compress_py:
        pytest.skip("no jitted compression path available")
    fast = _blake3._compress
    rng = np.random.default_rng(0)
    # lengths straddle the block (64) and chunk (1024) sizes so single-
    # chunk, multi-block, and tree (parent) compression are all exercised
    lengths = [0, 1, 63, 64, 65, 1023, 1024, 1025, 2048, 3072, 5000, 9001]
    try:
        for n in lengths:
            data = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
            _blake3._compress = fast
            got_fast = blake3_digest(data)
            _blake3._compress = _blake3._compress_py
            got_py = blake3_digest(data)
            assert got_fast == got_py, f"path divergence at length {n}"
    finally:
        _blake3._compress = fast
    assert blake3_digest(b"") .hex() == BLAKE3_EMPTY


@pytest.mark.parametrize("algo", ALGORITHMS)
@pytest.mark.parametrize("n_bytes", [0, 4, 100, 4096 * 4 - 4, 4096 * 4,
                                     4096 * 4 + 4, 3 * 4096 * 4 + 40])
def test_matches_reference_composition(algo, n_bytes):
    rng = np.random.default_rng(n_bytes)
    data = rng.integers(0, 256, size=n_bytes, dtype=np.uint8).tobytes()
    got = chunked_hash(data, chunk_size=4096, algo=algo)
    assert got.value == reference_chunked(data, 4096, algo)
    assert got.algo == algo


def test_single_chunk_is_double_hash():
    # m = 1 still applies the reduce step: H(H(chunk))
    data = b"tiny"
    got = chunked_hash(data, chunk_size=4096, algo="sha256")
    assert got.value == hashlib.sha256(hashlib.sha256(data).digest()).digest()


def test_final_short_chunk_is_unpadded():
    # 9 elements with chunk_size 4: chunks of 4, 4, 1 elements
    data = bytes(range(36))
    expect = reference_chunked(data, 4, "sha256")
    assert chunked_hash(data, chunk_size=4, algo="sha256").value == expect
    # padding the tail would change the digest
    padded = hashlib.sha256(
        hashlib.sha256(data[:16]).digest()
        + hashlib.sha256(data[16:32]).digest()
        + hashlib.sha256(data[32:] + b"\x00" * 12).digest()).digest()
    assert chunked_hash(data, chunk_size=4, algo="sha256").value != padded


def test_tensor_serialization_is_row_major_le_f32():
    arr = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
    assert tensor_bytes(arr) == np.array([1, 2, 3, 4], "<f4").tobytes()
    # Fortran-ordered input is re-serialized row-major
    f_arr = np.asfortranarray(arr)
    assert tensor_bytes(f_arr) == tensor_bytes(arr)
    assert chunked_hash(f_arr).value == chunked_hash(arr).value


def test_array_and_bytes_inputs_agree():
    arr = np.random.default_rng(1).normal(size=(7, 5)).astype(np.float32)
    assert chunked_hash(arr).value == chunked_hash(tensor_bytes(arr)).value


@pytest.mark.parametrize("workers", [2, 4, 8])
@pytest.mark.parametrize("n_elems", [1, 4095, 4096, 4097, 3 * 4096, 3 * 4096 + 1])
def test_worker_count_never_changes_digest(workers, n_elems):
    arr = np.random.default_rng(n_elems).normal(size=n_elems) \
        .astype(np.float32)
    base = chunked_hash(arr, workers=1)
    assert chunked_hash(arr, workers=workers).value == base.value


@settings(max_examples=60, deadline=None)
@given(st.binary(max_size=2000), st.integers(1, 64),
       st.sampled_from(ALGORITHMS))
def test_reference_composition_property(data, chunk_size, algo):
    got = chunked_hash(data, chunk_size=chunk_size, algo=algo)
    assert got.value == reference_chunked(data, chunk_size, algo)


@settings(max_examples=40, deadline=None)
@given(st.binary(min_size=4, max_size=400), st.data())
def test_single_bit_flip_changes_digest(data, draw):
    bit = draw.draw(st.integers(0, len(data) * 8 - 1))
    flipped = bytearray(data)
    flipped[bit // 8] ^= 1 << (bit % 8)
    assert chunked_hash(data, chunk_size=16).value \
        != chunked_hash(bytes(flipped), chunk_size=16).value


def test_chunk_size_changes_digest():
    data = bytes(range(200))
    assert chunked_hash(data, chunk_size=8).value \
        != chunked_hash(data, chunk_size=16).value


def test_digest_validation():
    d = Digest(b"\x00" * 32)
    assert Digest.from_hex(d.hex).value == d.value
    with pytest.raises(ValueError):
        Digest(b"\x00" * 31)
    with pytest.raises(ValueError):
        Digest(b"\x00" * 32, algo="md5")
    with pytest.raises(ValueError):
        chunked_hash(b"x", algo="md5")
    with pytest.raises(ValueError):
        chunked_hash(b"x", chunk_size=0)


def test_hash_bytes_plain():
    assert hash_bytes(b"abc", "sha256").value == hashlib.sha256(b"abc").digest()
    assert hash_bytes(b"abc", "blake3").hex == BLAKE3_ABC
