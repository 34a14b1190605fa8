"""Air-interface configuration, unit conversions and frame geometry.

Everything downstream (transmitter, channel, estimator, demodulator) derives
its constants from :class:`LoraParams`, so the chips-per-symbol count, symbol
duration and chirp slope are defined exactly once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

VALID_BW_HZ = (125e3, 250e3, 500e3)
VALID_SF = tuple(range(6, 13))
VALID_NC = (5, 6, 7, 8)

# Worst-case impairments the receiver is dimensioned for.  5 kHz covers the
# oscillator spread measured over fleets of COTS nodes; the time offset of a
# coordinated uplink stays below a tenth of a symbol.
DEFAULT_CFO_MAX_HZ = 5000.0
DEFAULT_TO_MAX_FRAC = 0.1


@dataclass(frozen=True)
class LoraParams:
    """Static CSS link configuration shared by every module.

    n_c is the codeword length of the (n_c, 4) Hamming code, i.e. the coding
    rate is 4/n_c.  osr_rx is the receiver oversampling (samples per chip);
    osr_rec is the finer reconstruction grid used for fractional time shifts
    and must be an integer multiple of osr_rx.
    """

    sf: int = 10
    bw: float = 125e3
    n_c: int = 8
    osr_rx: int = 2
    osr_rec: int = 10
    preamble_len: int = 10
    sfd_len: float = 2.25
    payload_bytes: int = 12

    def __post_init__(self):
        if self.sf not in VALID_SF:
            raise ConfigError(f"sf must be in {VALID_SF}, got {self.sf}")
        if float(self.bw) not in VALID_BW_HZ:
            raise ConfigError(f"bw must be one of {VALID_BW_HZ}, got {self.bw}")
        if self.n_c not in VALID_NC:
            raise ConfigError(f"n_c must be in {VALID_NC}, got {self.n_c}")
        if self.osr_rx < 2:
            raise ConfigError("osr_rx must be an integer >= 2")
        if self.osr_rec % self.osr_rx != 0:
            raise ConfigError("osr_rec must be an integer multiple of osr_rx")
        if self.preamble_len < 8:
            raise ConfigError("preamble_len must be >= 8 (estimator uses 8 windows)")
        if self.sfd_len != 2.25:
            raise ConfigError("sfd_len is fixed at 2.25 downchirps")
        if self.payload_bytes < 3:
            raise ConfigError("payload_bytes must be >= 3 (2 bytes are CRC)")

    # ---- derived constants -------------------------------------------------

    @property
    def n_chips(self) -> int:
        """Chips per symbol, N = 2^sf."""
        return 1 << self.sf

    @property
    def symbol_time(self) -> float:
        """Symbol duration Ts = N / BW in seconds."""
        return self.n_chips / self.bw

    @property
    def chirp_slope(self) -> float:
        """Frequency sweep gradient k = BW / Ts in Hz/s."""
        return self.bw / self.symbol_time

    @property
    def cr(self) -> tuple[int, int]:
        return (4, self.n_c)

    @property
    def rate_rx(self) -> float:
        return self.osr_rx * self.bw

    @property
    def rate_rec(self) -> float:
        return self.osr_rec * self.bw

    @property
    def samples_per_symbol(self) -> int:
        """Receiver-grid samples in one symbol."""
        return self.n_chips * self.osr_rx

    @property
    def n_payload_symbols(self) -> int:
        return symbol_count(self)

    @property
    def header_symbols(self) -> float:
        """Preamble plus SFD length in symbols (non-integer: 2.25 SFD)."""
        return self.preamble_len + self.sfd_len

    @property
    def frame_symbols(self) -> float:
        return self.header_symbols + self.n_payload_symbols

    def frame_samples(self, osr: int) -> int:
        return int(round(self.frame_symbols * self.n_chips * osr))

    def data_start_sample(self, osr: int) -> int:
        """First sample of the first data symbol at the given oversampling."""
        return int(round(self.header_symbols * self.n_chips * osr))

    @property
    def frame_time(self) -> float:
        return self.frame_symbols * self.symbol_time


@dataclass
class IqBuffer:
    """Complex baseband samples together with their sample rate."""

    samples: np.ndarray
    rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.rate <= 0:
            raise ConfigError("sample rate must be positive")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class NodeTxState:
    """Ground-truth channel triple (h, cfo, to) plus payload of one node."""

    h: complex = 1.0 + 0.0j
    cfo: float = 0.0
    to: float = 0.0
    power_db: float = 0.0
    payload: bytes = b""

    def __post_init__(self):
        if self.to < 0:
            raise DomainError("time offset must be >= 0 (window aligned to first arrival)")

    @property
    def amplitude(self) -> float:
        """Linear receive amplitude including the relative power term."""
        return abs(self.h) * 10.0 ** (self.power_db / 20.0)

    @property
    def rx_power(self) -> float:
        return self.amplitude**2


def bin_shifts(params: LoraParams, cfo: float, to: float) -> tuple[float, float]:
    """Convert a CFO in Hz and a TO in seconds to fractional FFT bin shifts.

    Both offsets act as frequency shifts of the dechirped tone: the CFO moves
    it by N*cfo/BW bins and the TO by to*BW bins, at native (non-oversampled)
    bin resolution BW/N.
    """
    delta_cfo = params.n_chips * cfo / params.bw
    delta_to = to * params.bw
    return delta_cfo, delta_to


def symbol_count(params: LoraParams) -> int:
    """Number of encoded data symbols, including interleaver-block padding.

    2 nibbles per payload byte, sf codewords per interleaver block, n_c
    symbols out of each block.
    """
    nibbles = 2 * params.payload_bytes
    blocks = math.ceil(nibbles / params.sf)
    return blocks * params.n_c


def params_from_dict(cfg: dict) -> LoraParams:
    """Build LoraParams from a config mapping, ignoring unknown keys."""
    fields = {f for f in LoraParams.__dataclass_fields__}
    kwargs = {k: v for k, v in cfg.items() if k in fields}
    if "cr" in cfg and "n_c" not in kwargs:
        kwargs["n_c"] = _parse_cr(cfg["cr"])
    return LoraParams(**kwargs)


def _parse_cr(value) -> int:
    """Accept a coding rate given as 8, '8', '4/8' or (4, 8)."""
    if isinstance(value, (tuple, list)):
        if len(value) != 2 or value[0] != 4:
            raise ConfigError(f"coding rate must be (4, n_c), got {value!r}")
        return int(value[1])
    text = str(value)
    if "/" in text:
        num, _, den = text.partition("/")
        if int(num) != 4:
            raise ConfigError(f"coding rate numerator must be 4, got {text!r}")
        return int(den)
    return int(text)
