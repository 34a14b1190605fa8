"""Per-window maximum-likelihood multi-user demodulation.

Pipeline per demodulation window: truncated dechirp, paired-magnitude peak
extraction, candidate-sequence enumeration, likelihood scoring against
reconstructed spectra, hard decision plus top-K soft output.

Scoring uses the expansion |Y - sum T|^2 = |Y|^2 - 2 Re<Y, sum T> + |sum T|^2
over the cached per-(node, peak) spectra, so each candidate costs O(M^2)
scalars after one Gram matrix per window (see _kernels.score_assignments).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ._kernels import score_assignments
from .errors import ConfigError, DomainError
from .params import IqBuffer, LoraParams
from .syncest import ChannelEstimate, OffsetEstimate, reconstruct_symbol
from .txchain import base_downchirp, gamma_chirp

STRATEGIES = ("v-peak", "m-peak", "m-full-peak")
DEFAULT_PEAK_CAP = 8


@dataclass
class WindowPeaks:
    """Spectral peaks of one window, sorted by descending magnitude."""

    bins: np.ndarray  # peak positions in native bins
    mags: np.ndarray

    @property
    def v(self) -> int:
        return len(self.bins)


@dataclass
class CandidateSequence:
    """One hypothesized per-node data assignment with its log-likelihood."""

    assignment: np.ndarray  # per-node peak bin values
    symbols: np.ndarray  # per-node symbol values after offset deduction
    loglik: float


@dataclass
class TopK:
    """K best candidates of a window, log-likelihoods non-increasing."""

    entries: list[CandidateSequence] = field(default_factory=list)

    @property
    def erased(self) -> bool:
        return not self.entries

    @property
    def hard(self) -> CandidateSequence:
        return self.entries[0]

    def node_values(self, node: int) -> np.ndarray:
        return np.array([c.symbols[node] for c in self.entries], dtype=np.int64)

    def logliks(self) -> np.ndarray:
        return np.array([c.loglik for c in self.entries])


def default_trunc(params: LoraParams, to_max: float | None = None) -> int:
    """Samples zeroed at the window head; covers the worst-case TO."""
    if to_max is None:
        to_max = 0.1 * params.symbol_time
    return int(math.ceil(to_max * params.bw * params.osr_rx))


def dechirp_truncated(window, params: LoraParams, trunc: int) -> np.ndarray:
    """Zero the first trunc samples, dechirp the rest, return the FFT.

    Truncation discards the head of the window where delayed users still
    carry their previous symbol, removing inter-symbol interference.
    """
    x = window.samples if isinstance(window, IqBuffer) else np.asarray(window)
    lp = params.samples_per_symbol
    if len(x) != lp:
        raise DomainError(f"window must be {lp} samples, got {len(x)}")
    if not 0 <= trunc < lp:
        raise DomainError("trunc must be in [0, window)")
    y = x * base_downchirp(params, params.osr_rx)
    if trunc:
        y = y.copy()
        y[:trunc] = 0.0
    return np.fft.fft(y)


def paired_magnitude(spectrum: np.ndarray, params: LoraParams) -> np.ndarray:
    """Fold the oversampled spectrum onto native bins.

    out[b] = |S[b]| + |S[b - N]| pairs the dechirped tones at f and f - BW,
    which otherwise split and cancel under fractional time offsets.
    """
    if params.osr_rx < 2:
        raise ConfigError("paired magnitude needs osr_rx >= 2")
    n = params.n_chips
    mag = np.abs(spectrum)
    return mag[:n] + mag[len(mag) - n :]


def extract_peaks(
    pm: np.ndarray,
    strategy: str,
    m: int,
    noise_floor: float = 0.0,
    cap: int = DEFAULT_PEAK_CAP,
) -> WindowPeaks:
    """Select candidate peak bins from a paired-magnitude vector.

    v-peak keeps every local maximum above the noise threshold (up to cap);
    the m-peak and m-full-peak strategies keep the m largest local maxima.
    Raw top-m bins would not do: the frequency fold splits each tone into two
    short segments whose wide main lobes put a strong user's fractional peak
    into several adjacent bins, crowding out weaker users.  An empty result
    marks the window as erased.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}")
    pm = np.asarray(pm)
    is_max = (pm > np.roll(pm, 1)) & (pm >= np.roll(pm, -1))
    if strategy == "v-peak":
        thr = max(noise_floor, 1e-9 * float(pm.max()))
        idx = np.flatnonzero(is_max & (pm > thr))
        if idx.size == 0:
            return WindowPeaks(np.empty(0), np.empty(0))
        order = np.argsort(-pm[idx], kind="stable")[:cap]
        idx = idx[order]
    else:
        idx = np.flatnonzero(is_max)
        if idx.size == 0:
            return WindowPeaks(np.empty(0), np.empty(0))
        order = np.argsort(-pm[idx], kind="stable")[: min(m, idx.size)]
        idx = idx[order]
    # fractional refinement: a tone between two bins must not round through
    # the wrong integer when the peak is deducted to a symbol value
    left = pm[(idx - 1) % len(pm)]
    right = pm[(idx + 1) % len(pm)]
    den = left - 2.0 * pm[idx] + right
    frac = np.where(den != 0.0, 0.5 * (left - right) / np.where(den == 0.0, 1.0, den), 0.0)
    return WindowPeaks((idx + frac) % len(pm), pm[idx].copy())


def measure_noise_floor(
    params: LoraParams,
    noise_var: float,
    rng: np.random.Generator | int,
    trunc: int | None = None,
    n_windows: int = 200,
) -> float:
    """Peak threshold from noise-only windows: mean + 3 std of the
    per-window maximum of the paired-magnitude vector."""
    if noise_var <= 0:
        return 0.0
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if trunc is None:
        trunc = default_trunc(params)
    lp = params.samples_per_symbol
    scale = np.sqrt(noise_var / 2.0)
    maxima = np.empty(n_windows)
    for i in range(n_windows):
        w = scale * (rng.standard_normal(lp) + 1j * rng.standard_normal(lp))
        pm = paired_magnitude(dechirp_truncated(w, params, trunc), params)
        maxima[i] = pm.max()
    return float(maxima.mean() + 3.0 * maxima.std())


# ---------------------------------------------------------------------------
# candidate enumeration
# ---------------------------------------------------------------------------


def full_peak_count(m: int, v: int) -> int:
    """Surjective assignment count f(m, v) via the recurrence
    f(m, v) = f(m-1, v) * v + f(m-1, v-1) * v, f(., 1) = 1, f(v, v) = v!."""
    if v == 1:
        return 1
    if v == m:
        return math.factorial(v)
    if v > m or v < 1:
        return 0
    return full_peak_count(m - 1, v) * v + full_peak_count(m - 1, v - 1) * v


@lru_cache(maxsize=None)
def _all_assignments(m: int, v: int) -> np.ndarray:
    """All v^m functions of m nodes onto v peak indices, shape (v^m, m)."""
    grids = np.meshgrid(*([np.arange(v, dtype=np.int64)] * m), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


@lru_cache(maxsize=None)
def _surjective_assignments(m: int, v: int) -> np.ndarray:
    allv = _all_assignments(m, v)
    used = np.zeros((len(allv), v), dtype=bool)
    np.put_along_axis(used, allv, True, axis=1)
    return allv[used.all(axis=1)]


def enumerate_sequences(peaks: WindowPeaks, m: int, strategy: str) -> np.ndarray:
    """Candidate assignments as (W, m) peak indices into peaks.bins.

    v-peak: all V^m combinations; m-peak: all m^m over the top-m bins;
    m-full-peak: for V' = 1..m, the surjective assignments of the m nodes
    onto the top-V' peaks (sum over V' of f(m, V') candidates).
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}")
    if peaks.v == 0:
        raise DomainError("no peaks to enumerate")
    if strategy == "v-peak":
        return _all_assignments(m, peaks.v)
    if strategy == "m-peak":
        return _all_assignments(m, min(m, peaks.v))
    parts = [_surjective_assignments(m, vp) for vp in range(1, min(m, peaks.v) + 1)]
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# likelihood scoring
# ---------------------------------------------------------------------------


def _round_half_to_zero(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.ceil(np.abs(x) - 0.5)


class WindowScorer:
    """Scores candidate assignments for every window of one packet.

    Holds the per-(node, symbol) reconstruction spectra cache; the CFO phase
    advance to each window is a per-node scalar, so a cached spectrum serves
    the whole packet.
    """

    def __init__(
        self,
        params: LoraParams,
        offsets: list[OffsetEstimate],
        channels: list[ChannelEstimate],
        trunc: int | None = None,
    ):
        if len(offsets) != len(channels):
            raise DomainError("offsets and channels must pair up")
        self.params = params
        self.offsets = offsets
        self.channels = channels
        self.trunc = default_trunc(params) if trunc is None else trunc
        self.m = len(offsets)
        self.n = params.n_chips
        self.shift_bins = np.array(
            [est.shifts(params)[0] - est.shifts(params)[1] for est in offsets]
        )
        self._spec_cache: dict[tuple[int, int], np.ndarray] = {}
        self._data_t0 = params.header_symbols * params.symbol_time
        # per-node gather plan: reconstruction = chirp gathered at the
        # delayed fine-grid indices times a fixed phasor (CFO ramp, channel
        # coefficient, dechirp, truncation mask), one multiply + FFT per
        # (node, symbol)
        rate = params.rate_rec
        step = params.osr_rec // params.osr_rx
        lp = params.samples_per_symbol
        down = base_downchirp(params, params.osr_rx)
        self._gather = []
        for est, ch in zip(offsets, channels):
            shift = int(np.floor(max(est.to_hat, 0.0) * rate))
            src = np.arange(lp) * step - shift
            valid = src >= 0
            src = src[valid]
            phasor = ch.h_hat * np.exp(2j * np.pi * est.cfo_hat / rate * src)
            phasor = phasor * down[valid]
            keep = valid.copy()
            keep[: self.trunc] = False
            self._gather.append((src[keep[valid]], np.where(keep)[0], phasor[keep[valid]]))

    def _spectrum(self, node: int, symbol: int) -> np.ndarray:
        key = (node, symbol)
        hit = self._spec_cache.get(key)
        if hit is None:
            src, dst, phasor = self._gather[node]
            buf = np.zeros(self.params.samples_per_symbol, dtype=np.complex128)
            buf[dst] = gamma_chirp(self.params, symbol)[src] * phasor
            hit = np.fft.fft(buf)
            self._spec_cache[key] = hit
        return hit

    def _window_phases(self, index: int) -> np.ndarray:
        t = self._data_t0 + index * self.params.symbol_time
        return np.exp(
            2j * np.pi * np.array([est.cfo_hat for est in self.offsets]) * t
        )

    def symbols_for(self, bins: np.ndarray) -> np.ndarray:
        """Peak bins -> per-node symbol values, (M, len(bins))."""
        raw = bins[None, :] - self.shift_bins[:, None]
        return (_round_half_to_zero(raw).astype(np.int64)) % self.n

    def score_window(self, spectrum: np.ndarray, peaks: WindowPeaks, index: int, k: int) -> TopK:
        if peaks.v == 0:
            return TopK()
        strategy = getattr(self, "strategy", "m-full-peak")
        return self._score(spectrum, peaks, index, k, strategy)

    def demod(
        self, spectrum: np.ndarray, peaks: WindowPeaks, index: int, k: int, strategy: str
    ) -> TopK:
        if peaks.v == 0:
            return TopK()
        return self._score(spectrum, peaks, index, k, strategy)

    def _score(self, spectrum, peaks, index, k, strategy) -> TopK:
        assign = enumerate_sequences(peaks, self.m, strategy)
        sym_map = self.symbols_for(peaks.bins)  # (M, V)
        v = peaks.v
        mv = self.m * v
        tmat = np.empty((mv, len(spectrum)), dtype=np.complex128)
        for node in range(self.m):
            for pk in range(v):
                tmat[node * v + pk] = self._spectrum(node, int(sym_map[node, pk]))
        phases = self._window_phases(index)
        phase_vec = np.repeat(phases, v)
        cross = np.conj(phase_vec) * (np.conj(tmat) @ spectrum)
        gram = (tmat @ np.conj(tmat.T)) * (phase_vec[:, None] * np.conj(phase_vec)[None, :])
        energy = float(np.vdot(spectrum, spectrum).real)
        logliks = score_assignments(assign, cross.real, np.ascontiguousarray(gram.real), energy)

        k_eff = min(k, len(logliks))
        top = np.argpartition(-logliks, k_eff - 1)[:k_eff]
        top = top[np.argsort(-logliks[top], kind="stable")]
        entries = [
            CandidateSequence(
                assignment=peaks.bins[assign[i]].copy(),
                symbols=sym_map[np.arange(self.m), assign[i]].copy(),
                loglik=float(logliks[i]),
            )
            for i in top
        ]
        return TopK(entries)


def sequence_loglik(
    spectrum: np.ndarray,
    assignment_bins: np.ndarray,
    offsets: list[OffsetEstimate],
    channels: list[ChannelEstimate],
    symbol_index: int,
    params: LoraParams,
    trunc: int | None = None,
) -> float:
    """Reference -sum |Y - Y_tilde|^2 for one assignment (direct form).

    Reconstructs every node's hypothesized symbol with the CFO phase advanced
    to the window start, applies the same truncated dechirp as the receive
    path and returns the negative squared distance over all FFT bins.
    """
    if trunc is None:
        trunc = default_trunc(params)
    ts = params.symbol_time
    t0 = params.header_symbols * ts + symbol_index * ts
    n = params.n_chips
    total = np.zeros(params.samples_per_symbol, dtype=np.complex128)
    for est, ch, p in zip(offsets, channels, assignment_bins):
        d_cfo, d_to = est.shifts(params)
        s = int(_round_half_to_zero(np.asarray(p - (d_cfo - d_to)))) % n
        phase = np.exp(2j * np.pi * est.cfo_hat * t0)
        total += reconstruct_symbol(s, est.cfo_hat, est.to_hat, ch.h_hat * phase, params).samples
    y_tilde = dechirp_truncated(total, params, trunc)
    return -float(np.sum(np.abs(spectrum - y_tilde) ** 2))


def demod_window(
    spectrum: np.ndarray,
    peaks: WindowPeaks,
    offsets: list[OffsetEstimate],
    channels: list[ChannelEstimate],
    symbol_index: int,
    k: int,
    params: LoraParams,
    strategy: str = "m-full-peak",
    trunc: int | None = None,
) -> TopK:
    """Score every enumerated assignment and return the K best."""
    if k < 1:
        raise DomainError("k must be >= 1")
    scorer = WindowScorer(params, offsets, channels, trunc)
    if peaks.v == 0:
        return TopK()
    return scorer.demod(spectrum, peaks, symbol_index, k, strategy)
