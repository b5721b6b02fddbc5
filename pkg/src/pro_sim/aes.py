"""Bit-exact AES-128 encryption, vectorized over batches of plaintexts.

The leakage model of the trace synthesizer needs two things per encryption:
the ciphertext and the state entering the final round, because the register
rewrite between them is what couples data into the supply current.  Both come
out of ``encrypt_batch``.

A known-answer self test runs once on first use and raises if the tables or
the round code have been damaged, so every encryption in a process happens
against a checked implementation.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError, InternalError

SBOX = np.array([
    0x63, 0x7C, 0x77, 0x7B, 0xF2, 0x6B, 0x6F, 0xC5, 0x30, 0x01, 0x67, 0x2B, 0xFE, 0xD7, 0xAB, 0x76,
    0xCA, 0x82, 0xC9, 0x7D, 0xFA, 0x59, 0x47, 0xF0, 0xAD, 0xD4, 0xA2, 0xAF, 0x9C, 0xA4, 0x72, 0xC0,
    0xB7, 0xFD, 0x93, 0x26, 0x36, 0x3F, 0xF7, 0xCC, 0x34, 0xA5, 0xE5, 0xF1, 0x71, 0xD8, 0x31, 0x15,
    0x04, 0xC7, 0x23, 0xC3, 0x18, 0x96, 0x05, 0x9A, 0x07, 0x12, 0x80, 0xE2, 0xEB, 0x27, 0xB2, 0x75,
    0x09, 0x83, 0x2C, 0x1A, 0x1B, 0x6E, 0x5A, 0xA0, 0x52, 0x3B, 0xD6, 0xB3, 0x29, 0xE3, 0x2F, 0x84,
    0x53, 0xD1, 0x00, 0xED, 0x20, 0xFC, 0xB1, 0x5B, 0x6A, 0xCB, 0xBE, 0x39, 0x4A, 0x4C, 0x58, 0xCF,
    0xD0, 0xEF, 0xAA, 0xFB, 0x43, 0x4D, 0x33, 0x85, 0x45, 0xF9, 0x02, 0x7F, 0x50, 0x3C, 0x9F, 0xA8,
    0x51, 0xA3, 0x40, 0x8F, 0x92, 0x9D, 0x38, 0xF5, 0xBC, 0xB6, 0xDA, 0x21, 0x10, 0xFF, 0xF3, 0xD2,
    0xCD, 0x0C, 0x13, 0xEC, 0x5F, 0x97, 0x44, 0x17, 0xC4, 0xA7, 0x7E, 0x3D, 0x64, 0x5D, 0x19, 0x73,
    0x60, 0x81, 0x4F, 0xDC, 0x22, 0x2A, 0x90, 0x88, 0x46, 0xEE, 0xB8, 0x14, 0xDE, 0x5E, 0x0B, 0xDB,
    0xE0, 0x32, 0x3A, 0x0A, 0x49, 0x06, 0x24, 0x5C, 0xC2, 0xD3, 0xAC, 0x62, 0x91, 0x95, 0xE4, 0x79,
    0xE7, 0xC8, 0x37, 0x6D, 0x8D, 0xD5, 0x4E, 0xA9, 0x6C, 0x56, 0xF4, 0xEA, 0x65, 0x7A, 0xAE, 0x08,
    0xBA, 0x78, 0x25, 0x2E, 0x1C, 0xA6, 0xB4, 0xC6, 0xE8, 0xDD, 0x74, 0x1F, 0x4B, 0xBD, 0x8B, 0x8A,
    0x70, 0x3E, 0xB5, 0x66, 0x48, 0x03, 0xF6, 0x0E, 0x61, 0x35, 0x57, 0xB9, 0x86, 0xC1, 0x1D, 0x9E,
    0xE1, 0xF8, 0x98, 0x11, 0x69, 0xD9, 0x8E, 0x94, 0x9B, 0x1E, 0x87, 0xE9, 0xCE, 0x55, 0x28, 0xDF,
    0x8C, 0xA1, 0x89, 0x0D, 0xBF, 0xE6, 0x42, 0x68, 0x41, 0x99, 0x2D, 0x0F, 0xB0, 0x54, 0xBB, 0x16,
], dtype=np.uint8)

INV_SBOX = np.zeros(256, dtype=np.uint8)
INV_SBOX[SBOX] = np.arange(256, dtype=np.uint8)

# xtime (multiplication by 2 in the field) and popcount lookup tables
_x = np.arange(256, dtype=np.uint16)
XTIME = (((_x << 1) ^ np.where(_x & 0x80, 0x1B, 0)) & 0xFF).astype(np.uint8)
POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)
del _x

# Flat byte index i sits at state row i % 4, column i // 4.  ShiftRows rotates
# row r left by r, so output position (r, c) reads input (r, c + r mod 4).
SHIFT_ROWS_SRC = np.array(
    [4 * ((i // 4 + i % 4) % 4) + i % 4 for i in range(16)], dtype=np.intp
)

RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)


def key_expansion(key: bytes) -> np.ndarray:
    """Expand a 16-byte key into the 11 round keys, shape (11, 16) uint8."""
    if len(key) != 16:
        raise InputError(f"AES-128 key must be 16 bytes, got {len(key)}")
    words = [list(key[4 * i : 4 * i + 4]) for i in range(4)]
    sbox = SBOX.tolist()
    for i in range(4, 44):
        t = list(words[i - 1])
        if i % 4 == 0:
            t = [sbox[t[1]], sbox[t[2]], sbox[t[3]], sbox[t[0]]]
            t[0] ^= RCON[i // 4 - 1]
        words.append([a ^ b for a, b in zip(words[i - 4], t)])
    out = np.zeros((11, 16), dtype=np.uint8)
    for rnd in range(11):
        for c in range(4):
            out[rnd, 4 * c : 4 * c + 4] = words[4 * rnd + c]
    return out


def _mix_columns(state: np.ndarray) -> np.ndarray:
    # state has shape (n, 16); view columns as the middle axis
    s = state.reshape(-1, 4, 4)
    a0, a1, a2, a3 = s[:, :, 0], s[:, :, 1], s[:, :, 2], s[:, :, 3]
    out = np.empty_like(s)
    out[:, :, 0] = XTIME[a0] ^ XTIME[a1] ^ a1 ^ a2 ^ a3
    out[:, :, 1] = a0 ^ XTIME[a1] ^ XTIME[a2] ^ a2 ^ a3
    out[:, :, 2] = a0 ^ a1 ^ XTIME[a2] ^ XTIME[a3] ^ a3
    out[:, :, 3] = XTIME[a0] ^ a0 ^ a1 ^ a2 ^ XTIME[a3]
    return out.reshape(-1, 16)


_self_tested = False


def self_test() -> None:
    """Known-answer check; raises InternalError if the implementation is off."""
    global _self_tested
    key = bytes(range(16))
    pt = np.frombuffer(bytes.fromhex("00112233445566778899aabbccddeeff"), dtype=np.uint8)
    ct, _ = _encrypt(key, pt[None, :])
    if bytes(ct[0]) != bytes.fromhex("69c4e0d86a7b0430d8cdb78070b4c55a"):
        raise InternalError("AES self test failed: known-answer ciphertext mismatch")
    rks = key_expansion(bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c"))
    if bytes(rks[10]) != bytes.fromhex("d014f9a8c9ee2589e13f0cc8b6630ca6"):
        raise InternalError("AES self test failed: key schedule mismatch")
    _self_tested = True


def _encrypt(key: bytes, plaintexts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rks = key_expansion(key)
    state = plaintexts ^ rks[0]
    for rnd in range(1, 10):
        state = SBOX[state]
        state = state[:, SHIFT_ROWS_SRC]
        state = _mix_columns(state)
        state ^= rks[rnd]
    before_final = state.copy()
    state = SBOX[state]
    state = state[:, SHIFT_ROWS_SRC]
    state ^= rks[10]
    return state, before_final


def encrypt_batch(key: bytes, plaintexts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Encrypt a batch of plaintexts under one key.

    ``plaintexts`` is (n, 16) uint8.  Returns (ciphertexts, state entering the
    final round), both (n, 16) uint8.
    """
    if not _self_tested:
        self_test()
    pts = np.asarray(plaintexts)
    if pts.ndim != 2 or pts.shape[1] != 16 or pts.dtype != np.uint8:
        raise InputError("plaintext batch must be an (n, 16) uint8 array")
    return _encrypt(key, pts)


def hd_last_round(state9: np.ndarray, ciphertexts: np.ndarray) -> np.ndarray:
    """Bit flips in the state register across the final round, per encryption."""
    return POPCOUNT[state9 ^ ciphertexts].sum(axis=1).astype(np.int64)
