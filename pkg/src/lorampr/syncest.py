"""Frame detection, per-user CFO/TO estimation and LS channel estimation.

The CFO shifts preamble and SFD peaks the same way while the TO shifts them
in opposite directions, so with f_up from the dechirped preamble and f_down
from the dechirped SFD (both in native bins):

    cfo_bins = (f_up + f_down) / 2        to_bins = (f_down - f_up) / 2

Peaks are refined to fractional bins with a zero-padded FFT plus parabolic
interpolation, and preamble/SFD peaks are paired by descending amplitude
(receive powers are drawn at least 1 dB apart).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EstimationDegenerateError
from .params import (
    DEFAULT_CFO_MAX_HZ,
    DEFAULT_TO_MAX_FRAC,
    IqBuffer,
    LoraParams,
    bin_shifts,
)
from .txchain import base_downchirp, base_upchirp, gamma_chirp

PAD_FACTOR = 16  # zero-padding for fractional-bin refinement
_USED_PREAMBLE = range(1, 9)  # middle 8 of the 10 upchirps


@dataclass
class OffsetEstimate:
    """Per-user offset estimate; f_up/f_down are in fractional native bins."""

    cfo_hat: float
    to_hat: float
    f_up: float
    f_down: float
    amp: float

    def shifts(self, params: LoraParams) -> tuple[float, float]:
        return bin_shifts(params, self.cfo_hat, self.to_hat)


@dataclass
class ChannelEstimate:
    h_hat: complex
    residual: float


# ---------------------------------------------------------------------------
# peak search
# ---------------------------------------------------------------------------


def _paired_padded(window: np.ndarray, ref: np.ndarray, params: LoraParams) -> np.ndarray:
    """|FFT|(dechirped window), tones f and f-BW folded onto [0, BW).

    Output has PAD_FACTOR * N entries spanning the native bin axis.
    """
    n = params.n_chips
    pad = PAD_FACTOR * len(window)
    mag = np.abs(np.fft.fft(window * ref, pad))
    span = PAD_FACTOR * n  # number of padded bins covering one bandwidth
    return mag[:span] + mag[pad - span :]


def _parabolic(vec: np.ndarray, idx: int, spacing: int = PAD_FACTOR // 2) -> float:
    """Three-point parabolic peak refinement around vec[idx].

    The points are spaced half a native bin apart: closer spacing would put
    the fit inside the (noise-correlated) top of the main lobe, where the
    second difference is dominated by noise instead of lobe curvature.
    """
    if idx < spacing or idx >= len(vec) - spacing:
        return float(idx)
    a, b, c = vec[idx - spacing], vec[idx], vec[idx + spacing]
    den = a - 2.0 * b + c
    if den == 0.0:
        return float(idx)
    return idx + spacing * 0.5 * (a - c) / den


def _pick_peaks(
    pm: np.ndarray, m: int, lo: float, hi: float, params: LoraParams
) -> list[tuple[float, float]]:
    """Largest m peaks of a padded paired-magnitude vector.

    Search is restricted to signed native bins [lo, hi]; picked peaks exclude
    a +-2 native-bin guard zone around themselves.  Returns (bin, amp) pairs
    sorted by descending amplitude; fewer than m entries means the window is
    degenerate.
    """
    n = params.n_chips
    span = len(pm)
    centered = np.roll(pm, span // 2)  # index 0 <-> signed bin -N/2
    axis0 = -n / 2.0
    work = centered.copy()
    i_lo = max(0, int(np.ceil((lo - axis0) * PAD_FACTOR)))
    i_hi = min(span - 1, int(np.floor((hi - axis0) * PAD_FACTOR)))
    mask = np.zeros(span, dtype=bool)
    mask[i_lo : i_hi + 1] = True
    work[~mask] = -np.inf
    guard = 2 * PAD_FACTOR
    peaks = []
    for _ in range(m):
        idx = int(np.argmax(work))
        if not np.isfinite(work[idx]):
            break
        frac = _parabolic(centered, idx)
        peaks.append((axis0 + frac / PAD_FACTOR, float(centered[idx])))
        work[max(0, idx - guard) : idx + guard + 1] = -np.inf
    return peaks


# ---------------------------------------------------------------------------
# offset estimation
# ---------------------------------------------------------------------------


def _fine_cfo(
    x: np.ndarray, f_bins: float, cfo_coarse: float, params: LoraParams
) -> float:
    """Refine a CFO estimate from the preamble phase slope.

    The dechirped preamble content repeats every symbol up to the rotation
    exp(j 2 pi cfo Ts), so the window-to-window phase step of the tone at the
    user's peak bin measures the CFO with far better accuracy than the
    magnitude peak; the coarse estimate resolves the +-1/(2 Ts) alias.  This
    keeps the reconstruction phase coherent over the whole packet.
    """
    lp = params.samples_per_symbol
    down = base_downchirp(params, params.osr_rx)
    probe = np.exp(-2j * np.pi * f_bins * np.arange(lp) / lp)
    z = [
        np.dot(x[w * lp : (w + 1) * lp] * down, probe) for w in _USED_PREAMBLE
    ]
    acc = np.sum([z[i + 1] * np.conj(z[i]) for i in range(len(z) - 1)])
    ts = params.symbol_time
    residual = np.angle(acc * np.exp(-2j * np.pi * cfo_coarse * ts))
    return cfo_coarse + residual / (2.0 * np.pi * ts)


def estimate_offsets(
    signal: IqBuffer,
    m: int,
    params: LoraParams,
    cfo_max: float = DEFAULT_CFO_MAX_HZ,
    to_max: float | None = None,
) -> list[OffsetEstimate]:
    """Estimate each user's CFO and TO from the preamble and SFD.

    The demodulation window is assumed aligned with the start of the
    superposition; all users' TOs are >= 0.  Raises
    EstimationDegenerateError when fewer than m peaks are resolvable or an
    estimate falls outside the configured offset limits.
    """
    if m < 1:
        raise DomainError("m must be >= 1")
    if to_max is None:
        to_max = DEFAULT_TO_MAX_FRAC * params.symbol_time
    lp = params.samples_per_symbol
    x = signal.samples
    if len(x) < (params.preamble_len + 2) * lp:
        raise DomainError("signal shorter than preamble plus SFD")
    down = base_downchirp(params, params.osr_rx)
    up = base_upchirp(params, params.osr_rx)

    dmax = params.n_chips * cfo_max / params.bw  # CFO limit in bins
    tmax = to_max * params.bw  # TO limit in bins
    margin = 2.0

    pm_up = np.zeros(PAD_FACTOR * params.n_chips)
    for w in _USED_PREAMBLE:
        pm_up += _paired_padded(x[w * lp : (w + 1) * lp], down, params)
    pm_down = np.zeros_like(pm_up)
    for w in (params.preamble_len, params.preamble_len + 1):
        pm_down += _paired_padded(x[w * lp : (w + 1) * lp], up, params)

    up_peaks = _pick_peaks(pm_up, m, -(dmax + tmax + margin), dmax + margin, params)
    down_peaks = _pick_peaks(pm_down, m, -(dmax + margin), dmax + tmax + margin, params)
    if len(up_peaks) < m or len(down_peaks) < m:
        raise EstimationDegenerateError(
            f"resolved {len(up_peaks)} preamble / {len(down_peaks)} SFD peaks, need {m}"
        )

    orders = list(_pairing_hypotheses(m, [a for _, a in down_peaks]))
    best = None
    for order in orders:
        down_try = [down_peaks[j] for j in order]
        ests = _pair_and_convert(x, up_peaks, down_try, dmax, tmax, params, fine=False)
        if ests is None:
            continue
        if len(orders) == 1:
            best = (0.0, order)
            break
        # a wrong pairing mis-states the CFO by multiple bins, so its
        # window-to-window phase advance decorrelates the 8 stacked preamble
        # windows and the LS fit residual explodes; the fine CFO refinement
        # must wait until after this test because it would re-align the
        # phase slope of every hypothesis (modulo the symbol-rate alias)
        try:
            residual = estimate_channels(signal, ests, params)[0].residual
        except EstimationDegenerateError:
            continue
        if best is None or residual < best[0]:
            best = (residual, order)
    if best is None:
        raise EstimationDegenerateError("no consistent preamble/SFD peak pairing")
    final = _pair_and_convert(
        x, up_peaks, [down_peaks[j] for j in best[1]], dmax, tmax, params, fine=True
    )
    if final is None:
        raise EstimationDegenerateError("no consistent preamble/SFD peak pairing")
    return final


def _pairing_hypotheses(m: int, down_amps: list[float], margin: float = 0.3):
    """Descending-amplitude rank pairing plus adjacent-rank swaps.

    The SFD amplitudes average only two windows; at low SNR neighbouring
    ranks can flip, so adjacent pairs whose amplitudes sit within the noise
    margin are also tried (the LS fit residual arbitrates)."""
    identity = list(range(m))
    yield identity
    for i in range(m - 1):
        if down_amps[i + 1] >= (1.0 - margin) * down_amps[i]:
            swapped = identity.copy()
            swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
            yield swapped


def _pair_and_convert(
    x: np.ndarray,
    up_peaks: list[tuple[float, float]],
    down_peaks: list[tuple[float, float]],
    dmax: float,
    tmax: float,
    params: LoraParams,
    fine: bool = True,
) -> list[OffsetEstimate] | None:
    """Convert paired peaks to offsets; None when any pair is implausible."""
    out = []
    n_up, n_down = len(_USED_PREAMBLE), 2
    for (f_up, amp), (f_down, amp_down) in zip(up_peaks, down_peaks):
        # paired peaks must carry consistent per-window amplitude; a wild
        # mismatch means one of them is spurious (merged peaks)
        ratio = (amp / n_up) / max(amp_down / n_down, 1e-30)
        if not 0.35 <= ratio <= 2.8:
            return None
        cfo_bins = 0.5 * (f_up + f_down)
        to_bins = 0.5 * (f_down - f_up)
        if abs(cfo_bins) > dmax + 1.5 or not -1.5 <= to_bins <= tmax + 1.5:
            return None
        cfo_hat = cfo_bins * params.bw / params.n_chips
        shift = 0.0
        if fine:
            cfo_hat = _fine_cfo(x, f_up, cfo_hat, params)
            shift = cfo_hat * params.n_chips / params.bw - cfo_bins
        to_hat = max(to_bins, 0.0) / params.bw
        out.append(OffsetEstimate(cfo_hat, to_hat, f_up + shift, f_down + shift, amp / n_up))
    return out


# ---------------------------------------------------------------------------
# signal reconstruction (upsample - shift - decimate)
# ---------------------------------------------------------------------------


def reconstruct_symbol(
    s: int, cfo: float, to: float, h: complex, params: LoraParams
) -> IqBuffer:
    """Reconstruct one impaired symbol on the receiver grid.

    The chirp is modulated on the fine grid (osr_rec samples per chip), the
    channel coefficient and the CFO ramp are applied with the sample index
    counted from the symbol start, the result is right-shifted by
    floor(to * rate) fine samples with zero fill on the left and decimated to
    the receiver grid.  CFO phase accumulated over earlier symbols belongs in
    the caller's h argument.
    """
    gamma = params.osr_rec
    rate = params.rate_rec
    x = gamma_chirp(params, s) * h
    if cfo != 0.0:
        x = x * np.exp(2j * np.pi * cfo / rate * np.arange(len(x)))
    shift = int(np.floor(max(to, 0.0) * rate))
    if shift:
        y = np.zeros_like(x)
        if shift < len(x):
            y[shift:] = x[: len(x) - shift]
        x = y
    step = gamma // params.osr_rx
    return IqBuffer(x[::step].copy(), params.rate_rx)


# ---------------------------------------------------------------------------
# LS channel estimation
# ---------------------------------------------------------------------------


def estimate_channels(
    signal: IqBuffer, offsets: list[OffsetEstimate], params: LoraParams
) -> list[ChannelEstimate]:
    """Frequency-domain least squares over the 8 used preamble windows.

    Each user's model column is the dechirped FFT of its reconstructed
    preamble upchirp, advanced per window by the phase-continuous CFO factor
    exp(j 2 pi cfo w Ts).  Solves H = argmin ||E H - F(y)|| (the normal
    equations use the conjugate transpose).
    """
    lp = params.samples_per_symbol
    ts = params.symbol_time
    down = base_downchirp(params, params.osr_rx)
    x = signal.samples
    m = len(offsets)

    cols = []
    for est in offsets:
        rec = reconstruct_symbol(0, est.cfo_hat, est.to_hat, 1.0, params).samples
        cols.append(np.fft.fft(rec * down))
    base = np.stack(cols, axis=1)  # (L, M)

    e_rows = []
    y_rows = []
    for w in _USED_PREAMBLE:
        phases = np.array(
            [np.exp(2j * np.pi * est.cfo_hat * w * ts) for est in offsets]
        )
        e_rows.append(base * phases[None, :])
        y_rows.append(np.fft.fft(x[w * lp : (w + 1) * lp] * down))
    e_mat = np.concatenate(e_rows, axis=0)
    y_vec = np.concatenate(y_rows)

    h, _, rank, _ = np.linalg.lstsq(e_mat, y_vec, rcond=None)
    if rank < m:
        raise EstimationDegenerateError("rank-deficient LS system (identical offsets?)")
    residual = float(np.linalg.norm(e_mat @ h - y_vec))
    return [ChannelEstimate(complex(h[i]), residual) for i in range(m)]


# ---------------------------------------------------------------------------
# preamble detection
# ---------------------------------------------------------------------------


def detect_preamble(signal: IqBuffer, params: LoraParams, min_run: int = 6) -> int | None:
    """Locate the start of the earliest frame; None when nothing is stable.

    Consecutive symbol-length windows must agree on the dechirp-FFT argmax
    bin for at least min_run windows; the bin is then back-solved to a sample
    offset.  The CFO-vs-TO split of the bin is unknown at this stage, so the
    back-solve assumes CFO 0 and is accurate to about one chip.
    """
    lp = params.samples_per_symbol
    n = params.n_chips
    x = signal.samples
    n_win = len(x) // lp
    if n_win < min_run:
        return None
    down = base_downchirp(params, params.osr_rx)

    bins = np.empty(n_win, dtype=np.int64)
    mags = np.empty(n_win)
    for k in range(n_win):
        spec = np.abs(np.fft.fft(x[k * lp : (k + 1) * lp] * down))
        pm = spec[:n] + spec[len(spec) - n :]
        bins[k] = int(np.argmax(pm))
        mags[k] = pm[bins[k]]

    run_start = None
    k = 0
    while k < n_win:
        j = k
        while j + 1 < n_win and bins[j + 1] == bins[k]:
            j += 1
        if j - k + 1 >= min_run:
            run_start = k
            run_end = j
            break
        k = j + 1
    if run_start is None:
        return None

    b = int(bins[run_start])
    b_signed = b if b <= n // 2 else b - n
    r = int((-b_signed * params.osr_rx) % lp)
    base = run_start * lp + (r - lp if r > 0 else 0)
    ref_mag = float(np.median(mags[run_start : run_end + 1]))

    # A window that only partially overlaps the preamble can extend the run
    # one symbol early; probe candidate starts and take the earliest whose
    # aligned window carries full preamble energy.
    for cand in (base, base + lp, base + 2 * lp):
        if cand < 0 or cand + lp > len(x):
            continue
        spec = np.abs(np.fft.fft(x[cand : cand + lp] * down))
        pm = spec[:n] + spec[len(spec) - n :]
        if pm.max() >= 0.75 * ref_mag:
            return int(cand)
    return None
