"""Minimal pure-Python AES-256 block cipher, used only as a test oracle.

Implemented straight from the standard's algebra: the S-box is derived from
multiplicative inverses in GF(2^8) plus the affine transform rather than
pasted as a table, so this reference shares no code or data with the
production path (which delegates to a C library). Far too slow for real use.
"""
from __future__ import annotations


def _xtime(a: int) -> int:
    a <<= 1
    if a & 0x100:
        a ^= 0x11B
    return a & 0xFF


def _gf_mul(a: int, b: int) -> int:
    out = 0
    while b:
        if b & 1:
            out ^= a
        a = _xtime(a)
        b >>= 1
    return out


def _build_sbox() -> list[int]:
    # exp/log tables over the field generated by 3 = x + 1
    exp = [0] * 255
    log = [0] * 256
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x ^= _xtime(x)  # multiply by 3
    sbox = [0] * 256
    for a in range(256):
        inv = 0 if a == 0 else exp[(255 - log[a]) % 255]
        s = inv
        for shift in range(1, 5):
            s ^= ((inv << shift) | (inv >> (8 - shift))) & 0xFF
        sbox[a] = s ^ 0x63
    return sbox


_SBOX = _build_sbox()
_RCON = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40]


def _expand_key_256(key: bytes) -> list[list[int]]:
    if len(key) != 32:
        raise ValueError("AES-256 key must be 32 bytes")
    nk, nr = 8, 14
    words = [list(key[4 * i : 4 * i + 4]) for i in range(nk)]
    for i in range(nk, 4 * (nr + 1)):
        temp = list(words[i - 1])
        if i % nk == 0:
            temp = temp[1:] + temp[:1]
            temp = [_SBOX[b] for b in temp]
            temp[0] ^= _RCON[i // nk - 1]
        elif i % nk == 4:
            temp = [_SBOX[b] for b in temp]
        words.append([w ^ t for w, t in zip(words[i - nk], temp)])
    # one round key (16 bytes as 4x4 column-major state) per round
    keys = []
    for r in range(nr + 1):
        flat = [b for w in words[4 * r : 4 * r + 4] for b in w]
        keys.append(flat)
    return keys


def _sub_bytes(state: list[int]) -> list[int]:
    return [_SBOX[b] for b in state]


def _shift_rows(state: list[int]) -> list[int]:
    # state is column-major: state[r + 4c]
    out = list(state)
    for r in range(1, 4):
        row = [state[r + 4 * c] for c in range(4)]
        row = row[r:] + row[:r]
        for c in range(4):
            out[r + 4 * c] = row[c]
    return out


def _mix_columns(state: list[int]) -> list[int]:
    out = [0] * 16
    for c in range(4):
        col = state[4 * c : 4 * c + 4]
        out[4 * c + 0] = _gf_mul(col[0], 2) ^ _gf_mul(col[1], 3) ^ col[2] ^ col[3]
        out[4 * c + 1] = col[0] ^ _gf_mul(col[1], 2) ^ _gf_mul(col[2], 3) ^ col[3]
        out[4 * c + 2] = col[0] ^ col[1] ^ _gf_mul(col[2], 2) ^ _gf_mul(col[3], 3)
        out[4 * c + 3] = _gf_mul(col[0], 3) ^ col[1] ^ col[2] ^ _gf_mul(col[3], 2)
    return out


def _add_round_key(state: list[int], rk: list[int]) -> list[int]:
    return [s ^ k for s, k in zip(state, rk)]


def encrypt_block(key: bytes, block: bytes) -> bytes:
    """AES-256 encryption of a single 16-byte block."""
    if len(block) != 16:
        raise ValueError("block must be 16 bytes")
    round_keys = _expand_key_256(key)
    state = _add_round_key(list(block), round_keys[0])
    for r in range(1, 14):
        state = _add_round_key(_mix_columns(_shift_rows(_sub_bytes(state))), round_keys[r])
    state = _add_round_key(_shift_rows(_sub_bytes(state)), round_keys[14])
    return bytes(state)


def ctr_keystream(key: bytes, nonce: bytes, length: int) -> bytes:
    """CTR keystream matching the deployed layout: the 16-byte nonce is the
    initial counter block and only its low 32 bits increment, wrapping."""
    prefix, base = nonce[:12], int.from_bytes(nonce[12:], "big")
    out = bytearray()
    block_index = 0
    while len(out) < length:
        counter = (base + block_index) & 0xFFFFFFFF
        out += encrypt_block(key, prefix + counter.to_bytes(4, "big"))
        block_index += 1
    return bytes(out[:length])
