"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid static configuration (SF, BW, coding rate, oversampling...)."""


class DomainError(ValueError):
    """Operation called with arguments outside its documented domain."""


class EstimationDegenerateError(RuntimeError):
    """Preamble/SFD peaks could not be resolved or the LS system is rank
    deficient; the trial should be counted as a reception failure."""


class TraceFormatError(RuntimeError):
    """IQ trace file or its JSON sidecar is missing, truncated or malformed."""


class NoDataError(RuntimeError):
    """Aggregate requested over an empty contributor set."""
