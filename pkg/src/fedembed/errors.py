class FedEmbedError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FedEmbedError):
    """Inconsistent architecture, dataset or experiment configuration."""


class UsageError(FedEmbedError):
    """An API was called with arguments that violate its contract."""


class NumericError(FedEmbedError):
    """A tensor contains NaN or Inf."""


class IngestionError(FedEmbedError):
    """A data file could not be parsed."""


class ProtocolError(FedEmbedError):
    """Client/server messages disagree on shape or structure."""


class ExperimentError(FedEmbedError):
    """Wraps a failure inside a run with the round and phase it happened in."""

    def __init__(self, message, round_index=None, phase=None):
        self.round_index = round_index
        self.phase = phase
        where = []
        if round_index is not None:
            where.append(f"round {round_index}")
        if phase is not None:
            where.append(f"phase {phase!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + str(message))
