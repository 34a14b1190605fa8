"""Aggregate function over decoded per-node readings.

Payload convention: the first two payload bytes carry the node's sensor
reading as a big-endian signed 16-bit fixed-point value with scale 0.01.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DomainError, NoDataError

READING_SCALE = 0.01
AGG_FUNCTIONS = ("sum", "average", "min", "max")


def encode_reading(value: float, payload_bytes: int, filler: bytes = b"") -> bytes:
    """Pack a reading into the leading payload bytes (before CRC append)."""
    raw = int(round(value / READING_SCALE))
    if not -(1 << 15) <= raw < (1 << 15):
        raise DomainError("reading out of int16 fixed-point range")
    body = struct.pack(">h", raw) + bytes(filler)
    body = body[: payload_bytes - 2]
    return body + bytes(payload_bytes - 2 - len(body))


def parse_reading(payload: bytes) -> float:
    if len(payload) < 2:
        raise DomainError("payload too short for a reading")
    return struct.unpack(">h", bytes(payload[:2]))[0] * READING_SCALE


def aggregate(values, fn: str) -> tuple[float, int]:
    """Aggregate CRC-clean readings; returns (value, contributor count)."""
    if fn not in AGG_FUNCTIONS:
        raise DomainError(f"fn must be one of {AGG_FUNCTIONS}")
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise NoDataError("no contributors passed the CRC check")
    if fn == "sum":
        result = vals.sum()
    elif fn == "average":
        result = vals.mean()
    elif fn == "min":
        result = vals.min()
    else:
        result = vals.max()
    return float(result), int(vals.size)
