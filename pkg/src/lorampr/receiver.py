"""End-to-end multi-packet receiver: estimation, demodulation, decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import hard_path, soft_path
from .demod import (
    TopK,
    WindowScorer,
    default_trunc,
    dechirp_truncated,
    extract_peaks,
    paired_magnitude,
)
from .params import DEFAULT_CFO_MAX_HZ, DEFAULT_TO_MAX_FRAC, IqBuffer, LoraParams
from .syncest import ChannelEstimate, OffsetEstimate, estimate_channels, estimate_offsets


@dataclass
class ReceiveResult:
    offsets: list[OffsetEstimate]
    channels: list[ChannelEstimate]
    topk: list[TopK]
    hard_symbols: np.ndarray  # (M, N_s)
    hard_payloads: list[bytes]
    hard_crc: list[bool]
    soft_payloads: list[bytes] = field(default_factory=list)
    soft_crc: list[bool] = field(default_factory=list)


def decode_superposition(
    signal: IqBuffer,
    m: int,
    params: LoraParams,
    strategy: str = "m-full-peak",
    k: int = 2,
    cfo_max: float = DEFAULT_CFO_MAX_HZ,
    to_max: float | None = None,
    noise_floor: float = 0.0,
    with_soft: bool = True,
    start: int = 0,
) -> ReceiveResult:
    """Decode m superimposed frames whose superposition begins at `start`.

    The number of users is known (the gateway scheduled them).  Estimation
    failures raise EstimationDegenerateError; the caller counts the trial as
    a reception failure.
    """
    if to_max is None:
        to_max = DEFAULT_TO_MAX_FRAC * params.symbol_time
    if start:
        signal = IqBuffer(signal.samples[start:], signal.rate)
    offsets = estimate_offsets(signal, m, params, cfo_max=cfo_max, to_max=to_max)
    channels = estimate_channels(signal, offsets, params)

    trunc = default_trunc(params, to_max)
    scorer = WindowScorer(params, offsets, channels, trunc)
    lp = params.samples_per_symbol
    d0 = params.data_start_sample(params.osr_rx)
    n_s = params.n_payload_symbols
    x = signal.samples
    if len(x) < d0 + n_s * lp:
        x = np.concatenate([x, np.zeros(d0 + n_s * lp - len(x), dtype=complex)])

    topk: list[TopK] = []
    hard_symbols = np.zeros((m, n_s), dtype=np.int64)
    for i in range(n_s):
        spec = dechirp_truncated(x[d0 + i * lp : d0 + (i + 1) * lp], params, trunc)
        peaks = extract_peaks(paired_magnitude(spec, params), strategy, m, noise_floor)
        result = scorer.demod(spec, peaks, i, k, strategy) if peaks.v else TopK()
        topk.append(result)
        if not result.erased:
            hard_symbols[:, i] = result.hard.symbols

    hard_payloads, hard_crc = [], []
    soft_payloads, soft_crc = [], []
    for node in range(m):
        payload, ok = hard_path(hard_symbols[node], params)
        hard_payloads.append(payload)
        hard_crc.append(ok)
        if with_soft:
            payload_s, ok_s = soft_path(topk, node, params)
            soft_payloads.append(payload_s)
            soft_crc.append(ok_s)

    return ReceiveResult(
        offsets, channels, topk, hard_symbols, hard_payloads, hard_crc,
        soft_payloads, soft_crc,
    )
