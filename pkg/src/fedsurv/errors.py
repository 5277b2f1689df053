"""Exception hierarchy shared across the package."""


class FedSurvError(Exception):
    """Base class for all package errors."""


class DomainError(FedSurvError, ValueError):
    """An argument lies outside the domain of an operation."""


class ProtocolError(FedSurvError, RuntimeError):
    """A federated exchange violated the message protocol."""


class TrainingError(FedSurvError, RuntimeError):
    """Optimization produced non-finite values."""


class IngestionError(DomainError):
    """A data file could not be parsed into survival records."""


class UndefinedMetricError(DomainError):
    """A metric has no comparable pairs or too few evaluation points."""
