"""LoRa CSS multi-packet-reception link laboratory.

Simulates coordinated concurrent transmissions with small time offsets and
decodes them with a maximum-likelihood multi-user receiver (hard and soft
variants), from chirp synthesis down to CRC-checked payloads and aggregate
readings.
"""

from ._kernels import backend
from .aggregate import aggregate, encode_reading, parse_reading
from .channel import add_awgn, apply_impairments, draw_powers, superimpose
from .decoder import (
    append_crc,
    check_crc,
    crc16,
    hard_path,
    soft_gray_shift,
    soft_gray_xor,
    soft_hamming_decode,
    soft_path,
    symbol_to_bit_probs,
)
from .demod import (
    CandidateSequence,
    TopK,
    WindowPeaks,
    WindowScorer,
    dechirp_truncated,
    default_trunc,
    demod_window,
    enumerate_sequences,
    extract_peaks,
    full_peak_count,
    measure_noise_floor,
    paired_magnitude,
    sequence_loglik,
)
from .errors import (
    ConfigError,
    DomainError,
    EstimationDegenerateError,
    NoDataError,
    TraceFormatError,
)
from .harness import (
    CSV_HEADER,
    ExperimentConfig,
    MetricsRow,
    run_colocated_study,
    run_estimation_study,
    run_ideal_mapping_study,
    run_net_sim,
    run_phy,
    write_csv,
)
from .params import (
    IqBuffer,
    LoraParams,
    NodeTxState,
    bin_shifts,
    params_from_dict,
    symbol_count,
)
from .receiver import ReceiveResult, decode_superposition
from .syncest import (
    ChannelEstimate,
    OffsetEstimate,
    detect_preamble,
    estimate_channels,
    estimate_offsets,
    reconstruct_symbol,
)
from .traceio import read_trace, write_trace
from .txchain import (
    base_downchirp,
    base_upchirp,
    build_frame,
    css_modulate,
    chirp_waveform,
    deinterleave,
    gray_encode_tx,
    gray_map_rx,
    hamming_decode_hard,
    hamming_encode,
    header_frame,
    interleave,
    payload_to_symbols,
    whiten,
)

__version__ = "0.1.0"
