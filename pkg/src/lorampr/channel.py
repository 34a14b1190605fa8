"""Synthetic multi-user channel.

Applies per-node gain, CFO and fractional time offset on the fine
reconstruction grid, superimposes the users and adds calibrated AWGN.  The
CFO rotation is phase-continuous over the whole frame and is applied before
the delay, so its phase rides with the signal (zero at the frame start); the
receiver-side reconstruction uses the same convention.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError
from .params import IqBuffer, LoraParams, NodeTxState


def apply_impairments(frame: IqBuffer, node: NodeTxState, params: LoraParams) -> IqBuffer:
    """Impair one frame and bring it down to the receiver grid.

    Expects the frame on the reconstruction grid (osr_rec * bw).  Output is
    on the receiver grid and longer than the input by the delay.
    """
    if node.to < 0:
        raise DomainError("time offset must be >= 0")
    rate = params.rate_rec
    if abs(frame.rate - rate) > 1e-6:
        raise DomainError(f"frame must be sampled at {rate} Hz, got {frame.rate}")
    delay = int(round(node.to * rate))
    step = params.osr_rec // params.osr_rx
    # only every step-th fine-grid sample survives decimation, so the gain,
    # CFO phasor and delay are evaluated at the kept indices directly
    n_out = (len(frame.samples) + delay + step - 1) // step
    out = np.zeros(n_out, dtype=np.complex128)
    kept = np.arange(n_out) * step - delay
    valid = kept >= 0
    src = kept[valid]
    vals = frame.samples[src] * (node.h * 10.0 ** (node.power_db / 20.0))
    if node.cfo != 0.0:
        vals = vals * np.exp(2j * np.pi * node.cfo / rate * src)
    out[valid] = vals
    return IqBuffer(out, params.rate_rx)


def superimpose(frames: list[IqBuffer]) -> IqBuffer:
    """Pointwise complex sum; shorter inputs are zero-extended."""
    if not frames:
        raise DomainError("superimpose needs at least one buffer")
    rate = frames[0].rate
    for f in frames:
        if abs(f.rate - rate) > 1e-9:
            raise DomainError("cannot superimpose buffers with different rates")
    n = max(len(f) for f in frames)
    out = np.zeros(n, dtype=np.complex128)
    for f in frames:
        out[: len(f)] += f.samples
    return IqBuffer(out, rate)


def add_awgn(
    signal: IqBuffer,
    snr_db: float,
    ref_power: float,
    params: LoraParams,
    rng: np.random.Generator | int,
) -> IqBuffer:
    """Add circular complex Gaussian noise.

    The SNR is defined inside the signal bandwidth BW and referenced to
    ref_power (the weakest user's receive power), independent of the
    oversampling: per-sample noise variance is ref_power * osr_rx / SNR.
    """
    if ref_power <= 0:
        raise DomainError("ref_power must be > 0")
    if np.isinf(snr_db):
        return IqBuffer(signal.samples.copy(), signal.rate)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    var = ref_power * params.osr_rx / 10.0 ** (snr_db / 10.0)
    scale = np.sqrt(var / 2.0)
    n = len(signal)
    noise = scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return IqBuffer(signal.samples + noise, signal.rate)


def draw_powers(m: int, rng: np.random.Generator, spacing_db=(1.0, 3.0)) -> np.ndarray:
    """Relative receive powers in dB, strongest first.

    Adjacent sorted powers differ by at least 1 dB so preamble/SFD peaks stay
    separable by amplitude rank; the spacing is uniform in [1, 3] dB.
    """
    gaps = rng.uniform(spacing_db[0], spacing_db[1], size=max(m - 1, 0))
    return np.concatenate([[0.0], -np.cumsum(gaps)])
