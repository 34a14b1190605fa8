"""IQ trace files: interleaved 32-bit little-endian float I/Q pairs with a
JSON metadata sidecar (same path, .json extension)."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import TraceFormatError
from .params import IqBuffer


def _sidecar(path: str) -> str:
    base, _ = os.path.splitext(path)
    return base + ".json"


def write_trace(path: str, buf: IqBuffer, metadata: dict | None = None) -> None:
    """Write samples as float32 LE I/Q pairs plus the JSON sidecar."""
    samples = np.asarray(buf.samples, dtype=np.complex64)
    inter = np.empty(2 * len(samples), dtype="<f4")
    inter[0::2] = samples.real
    inter[1::2] = samples.imag
    inter.tofile(path)
    meta = dict(metadata or {})
    meta["rate"] = buf.rate
    meta["n_samples"] = len(samples)
    with open(_sidecar(path), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def read_trace(path: str) -> tuple[IqBuffer, dict]:
    side = _sidecar(path)
    if not os.path.exists(side):
        raise TraceFormatError(f"missing metadata sidecar {side}")
    try:
        with open(side) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"malformed metadata sidecar {side}: {exc}") from exc
    if "rate" not in meta or "n_samples" not in meta:
        raise TraceFormatError("sidecar must declare rate and n_samples")
    raw = np.fromfile(path, dtype="<f4")
    if len(raw) % 2:
        raise TraceFormatError("trace holds an odd float count (truncated pair)")
    if len(raw) // 2 != meta["n_samples"]:
        raise TraceFormatError(
            f"trace holds {len(raw) // 2} samples, sidecar declares {meta['n_samples']}"
        )
    samples = raw[0::2].astype(np.complex128) + 1j * raw[1::2].astype(np.complex128)
    return IqBuffer(samples, float(meta["rate"])), meta
