"""Exception types shared across the package."""

from __future__ import annotations


class FedAMCError(Exception):
    """Base class for every error raised by fedamc."""


class ConfigurationError(FedAMCError, ValueError):
    pass


class LengthError(FedAMCError, ValueError):
    pass


class DimensionError(FedAMCError, ValueError):
    pass


class LabelError(FedAMCError, ValueError):
    pass


class DegenerateInputError(FedAMCError, ValueError):
    """Input has zero power / zero norm where a positive value is required."""


class InfiniteSNRError(FedAMCError, ZeroDivisionError):
    """Noise power is exactly zero, so the SNR is unbounded."""


class EmptyInputError(FedAMCError, ValueError):
    pass


class DivergenceUndefinedError(FedAMCError, ValueError):
    """KL(p||q) with p_i > 0 where q_i == 0."""


class StratificationError(FedAMCError, ValueError):
    """A sampling pool is missing a required (class, SNR) stratum."""


class SpecificationError(FedAMCError, ValueError):
    def __init__(self, message: str, layer_index: int | None = None):
        super().__init__(message)
        self.layer_index = layer_index


class AggregationError(FedAMCError, ValueError):
    def __init__(self, message: str, layer_index: int | None = None):
        super().__init__(message)
        self.layer_index = layer_index


class FormatError(FedAMCError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
