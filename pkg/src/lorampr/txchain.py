"""Bit-exact LoRa transmit chain.

whitening -> (n_c,4) Hamming encoding -> diagonal interleaving -> inverse
Gray mapping -> CSS modulation -> frame assembly.  The receiver-side inverses
of the bit-level blocks live in decoder.py; the chirp synthesis here is the
single source of truth for every waveform in the package (channel simulation
and symbol reconstruction reuse it), which keeps the coherent receiver exact.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .errors import ConfigError, DomainError
from .params import IqBuffer, LoraParams

# ---------------------------------------------------------------------------
# whitening
# ---------------------------------------------------------------------------
# 8-bit Fibonacci LFSR, polynomial x^8 + x^6 + x^5 + x^4 + 1, seed 0xFF.
# One keystream byte per payload byte, output bit = MSB, packed MSB-first.
# Self-inverse by construction (XOR).

_WHITEN_SEED = 0xFF


def _keystream(n_bytes: int) -> np.ndarray:
    out = np.empty(n_bytes, dtype=np.uint8)
    state = _WHITEN_SEED
    for i in range(n_bytes):
        byte = 0
        for _ in range(8):
            out_bit = (state >> 7) & 1
            byte = (byte << 1) | out_bit
            fb = ((state >> 7) ^ (state >> 5) ^ (state >> 4) ^ (state >> 3)) & 1
            state = ((state << 1) | fb) & 0xFF
        out[i] = byte
    return out


def whiten(data: bytes) -> bytes:
    """XOR data with the whitening keystream; applying it twice is identity."""
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    return bytes(arr ^ _keystream(len(arr)))


def whiten_nibbles(nibbles: np.ndarray) -> np.ndarray:
    """Whiten a nibble stream (high nibble of each keystream byte first)."""
    nib = np.asarray(nibbles, dtype=np.uint8)
    n = len(nib)
    if n % 2:
        nib = np.concatenate([nib, np.zeros(1, dtype=np.uint8)])
    packed = (nib[0::2] << 4) | nib[1::2]
    packed ^= _keystream(len(packed))
    out = np.empty(len(packed) * 2, dtype=np.uint8)
    out[0::2] = packed >> 4
    out[1::2] = packed & 0x0F
    return out[:n]


# ---------------------------------------------------------------------------
# (n_c, 4) Hamming codes
# ---------------------------------------------------------------------------
# Systematic codewords [d1 d2 d3 d4 | parities], bit 0 of the stored word is
# d1 (MSB-first packing).  (7,4): p1=d1^d2^d4, p2=d1^d3^d4, p3=d2^d3^d4.
# (8,4) appends overall even parity, (6,4) punctures p3, (5,4) is a single
# even parity over the data bits.


def _encode_bits(nibble: int, n_c: int) -> list[int]:
    d1 = (nibble >> 3) & 1
    d2 = (nibble >> 2) & 1
    d3 = (nibble >> 1) & 1
    d4 = nibble & 1
    p1 = d1 ^ d2 ^ d4
    p2 = d1 ^ d3 ^ d4
    p3 = d2 ^ d3 ^ d4
    if n_c == 5:
        return [d1, d2, d3, d4, d1 ^ d2 ^ d3 ^ d4]
    if n_c == 6:
        return [d1, d2, d3, d4, p1, p2]
    if n_c == 7:
        return [d1, d2, d3, d4, p1, p2, p3]
    if n_c == 8:
        bits = [d1, d2, d3, d4, p1, p2, p3]
        return bits + [sum(bits) & 1]
    raise ConfigError(f"unsupported Hamming codeword length {n_c}")


def _build_tables(n_c: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    enc_bits = np.array([_encode_bits(nib, n_c) for nib in range(16)], dtype=np.uint8)
    weights = 1 << np.arange(n_c - 1, -1, -1)
    enc_words = (enc_bits * weights).sum(axis=1).astype(np.int64)
    # nearest-codeword hard decision, first minimum wins on ties
    words = np.arange(1 << n_c, dtype=np.int64)
    dist = np.empty((len(words), 16), dtype=np.int64)
    for nib in range(16):
        x = words ^ enc_words[nib]
        cnt = np.zeros(len(words), dtype=np.int64)
        for b in range(n_c):
            cnt += (x >> b) & 1
        dist[:, nib] = cnt
    dec = np.argmin(dist, axis=1).astype(np.uint8)
    return enc_bits, enc_words, dec


_HAMMING: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {
    n: _build_tables(n) for n in (5, 6, 7, 8)
}


def hamming_encode(nibble: int, n_c: int) -> int:
    """Encode a 4-bit value; returns the n_c-bit word, d1 in the MSB."""
    if n_c not in _HAMMING:
        raise ConfigError(f"unsupported Hamming codeword length {n_c}")
    if not 0 <= nibble < 16:
        raise DomainError("nibble must be a 4-bit value")
    return int(_HAMMING[n_c][1][nibble])


def hamming_encode_bits(nibbles: np.ndarray, n_c: int) -> np.ndarray:
    """Vectorized encode: (k,) nibbles -> (k, n_c) bit matrix."""
    return _HAMMING[n_c][0][np.asarray(nibbles, dtype=np.int64)]


def hamming_decode_hard(word: int, n_c: int) -> int:
    """Nearest-codeword hard decision; returns the 4 data bits."""
    return int(_HAMMING[n_c][2][word])


def hamming_decode_hard_bits(bits: np.ndarray, n_c: int) -> np.ndarray:
    """Vectorized hard decode: (k, n_c) bit matrix -> (k,) nibbles."""
    weights = 1 << np.arange(n_c - 1, -1, -1)
    words = (np.asarray(bits, dtype=np.int64) * weights).sum(axis=1)
    return _HAMMING[n_c][2][words]


def hamming_codewords(n_c: int) -> np.ndarray:
    """(16, n_c) bit matrix of all codewords, row index = data nibble."""
    return _HAMMING[n_c][0]


# ---------------------------------------------------------------------------
# interleaver
# ---------------------------------------------------------------------------


def interleave(block: np.ndarray) -> np.ndarray:
    """Diagonal interleaver: (sf, n_c) codeword bits -> (n_c, sf) symbol bits.

    out[j, (i + j) % sf] = in[i, j].  Bijective; a single flipped input bit
    lands in exactly one output symbol.
    """
    block = np.asarray(block)
    sf, n_c = block.shape
    out = np.empty((n_c, sf), dtype=block.dtype)
    i = np.arange(sf)[:, None]
    j = np.arange(n_c)[None, :]
    out[j, (i + j) % sf] = block
    return out


def deinterleave(symbols: np.ndarray) -> np.ndarray:
    """Inverse of :func:`interleave`: (n_c, sf) -> (sf, n_c)."""
    symbols = np.asarray(symbols)
    n_c, sf = symbols.shape
    i = np.arange(sf)[:, None]
    j = np.arange(n_c)[None, :]
    return symbols[j, (i + j) % sf]


# ---------------------------------------------------------------------------
# Gray mapping
# ---------------------------------------------------------------------------
# The receiver maps s -> s' ^ (s' >> 1) with s' = (s - 1) mod N; the
# transmitter applies the inverse so the pair is the identity.


def gray_map_rx(s, n: int):
    sp = (np.asarray(s) - 1) % n
    return sp ^ (sp >> 1)


def gray_inverse(g):
    """Invert v = x ^ (x >> 1) (prefix-XOR decode)."""
    x = np.array(g, copy=True)
    shift = 1
    while shift < 32:
        x ^= x >> shift
        shift <<= 1
    return x


def gray_encode_tx(value, n: int):
    """Symbol to transmit so that gray_map_rx recovers `value`."""
    return (gray_inverse(np.asarray(value) % n) + 1) % n


# ---------------------------------------------------------------------------
# CSS modulation
# ---------------------------------------------------------------------------


def chirp_waveform(s: int, n_chips: int, osr: int) -> np.ndarray:
    """One folded data chirp sampled at osr samples per chip.

    Instantaneous frequency starts at f(s) - BW/2, sweeps up with slope
    k = BW/Ts and folds down by BW once it reaches +BW/2.  Phases are exact
    (not cyclically rolled), so coherent reconstruction matches the
    transmitter sample for sample.
    """
    total = n_chips * osr
    idx = np.arange(total)
    # phase in cycles: k/2 t^2 + (f(s) - BW/2) t, with t = idx / (osr BW)
    cycles = idx * idx / (2.0 * n_chips * osr * osr) + (s / n_chips - 0.5) * idx / osr
    fold = osr * (n_chips - s)
    cycles = cycles - (idx >= fold) * (idx / osr)
    return np.exp(2j * np.pi * np.mod(cycles, 1.0))


_CHIRP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def base_upchirp(params: LoraParams, osr: int) -> np.ndarray:
    key = (params.n_chips, osr)
    if key not in _CHIRP_CACHE:
        _CHIRP_CACHE[key] = chirp_waveform(0, params.n_chips, osr)
    return _CHIRP_CACHE[key]


# Pre-modulated chirps on the reconstruction grid, shared by the transmitter
# and the receiver-side reconstruction (FIFO-capped by memory).
_GAMMA_CACHE: OrderedDict[tuple[int, int, int], np.ndarray] = OrderedDict()
_GAMMA_CACHE_BYTES = 192 << 20


def gamma_chirp(params: LoraParams, s: int) -> np.ndarray:
    key = (params.n_chips, params.osr_rec, int(s))
    hit = _GAMMA_CACHE.get(key)
    if hit is not None:
        return hit
    wave = chirp_waveform(int(s), params.n_chips, params.osr_rec)
    limit = max(4, _GAMMA_CACHE_BYTES // wave.nbytes)
    while len(_GAMMA_CACHE) >= limit:
        _GAMMA_CACHE.popitem(last=False)
    _GAMMA_CACHE[key] = wave
    return wave


def base_downchirp(params: LoraParams, osr: int) -> np.ndarray:
    return np.conj(base_upchirp(params, osr))


def css_modulate(s: int, params: LoraParams, osr: int | None = None) -> IqBuffer:
    """Modulate one symbol value onto a chirp."""
    if osr is None:
        osr = params.osr_rx
    if osr < 1:
        raise DomainError("osr must be >= 1")
    if not 0 <= s < params.n_chips:
        raise DomainError(f"symbol must be in [0, {params.n_chips})")
    return IqBuffer(chirp_waveform(int(s), params.n_chips, osr), osr * params.bw)


# ---------------------------------------------------------------------------
# payload -> symbols -> frame
# ---------------------------------------------------------------------------


def bytes_to_nibbles(data: bytes) -> np.ndarray:
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    out = np.empty(2 * len(arr), dtype=np.uint8)
    out[0::2] = arr >> 4
    out[1::2] = arr & 0x0F
    return out


def nibbles_to_bytes(nibbles: np.ndarray) -> bytes:
    nib = np.asarray(nibbles, dtype=np.uint8)
    if len(nib) % 2:
        raise DomainError("nibble count must be even to pack bytes")
    return bytes((nib[0::2] << 4) | nib[1::2])


def payload_to_symbols(payload: bytes, params: LoraParams) -> np.ndarray:
    """Full coding chain: payload bytes -> array of N_s symbol values."""
    if len(payload) != params.payload_bytes:
        raise DomainError(
            f"payload must be {params.payload_bytes} bytes, got {len(payload)}"
        )
    sf, n_c = params.sf, params.n_c
    nibbles = bytes_to_nibbles(payload)
    blocks = math.ceil(len(nibbles) / sf)
    padded = np.zeros(blocks * sf, dtype=np.uint8)
    padded[: len(nibbles)] = nibbles  # zero padding goes in before whitening
    white = whiten_nibbles(padded)
    cw_bits = hamming_encode_bits(white, n_c)  # (blocks*sf, n_c)
    symbols = np.empty(blocks * n_c, dtype=np.int64)
    weights = 1 << np.arange(sf)  # symbol bit column c carries significance c
    for b in range(blocks):
        sym_bits = interleave(cw_bits[b * sf : (b + 1) * sf])
        values = (sym_bits.astype(np.int64) * weights).sum(axis=1)
        symbols[b * n_c : (b + 1) * n_c] = gray_encode_tx(values, params.n_chips)
    return symbols


def build_frame(payload: bytes, params: LoraParams, osr: int | None = None) -> IqBuffer:
    """Assemble preamble + 2.25-downchirp SFD + encoded data chirps."""
    if osr is None:
        osr = params.osr_rec
    up = base_upchirp(params, osr)
    down = base_downchirp(params, osr)
    quarter = len(down) // 4
    parts = [up] * params.preamble_len + [down, down, down[:quarter]]
    if osr == params.osr_rec:
        parts += [gamma_chirp(params, int(s)) for s in payload_to_symbols(payload, params)]
    else:
        parts += [
            chirp_waveform(int(s), params.n_chips, osr)
            for s in payload_to_symbols(payload, params)
        ]
    return IqBuffer(np.concatenate(parts), osr * params.bw)


def header_frame(params: LoraParams, osr: int | None = None) -> IqBuffer:
    """Preamble + SFD only; enough signal for offset/channel estimation runs."""
    if osr is None:
        osr = params.osr_rec
    up = base_upchirp(params, osr)
    down = base_downchirp(params, osr)
    quarter = len(down) // 4
    parts = [up] * params.preamble_len + [down, down, down[:quarter]]
    return IqBuffer(np.concatenate(parts), osr * params.bw)
