"""Shared error taxonomy.

Every failure surfaced across module boundaries carries a stable,
machine-readable ``code`` (the class attribute) so the HTTP layer and the
CLI can report it uniformly.
"""


class ServiceError(Exception):
    """Base class for all errors raised by this package."""

    code = "ServiceError"
    http_status = 500

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class EmptyInput(ServiceError):
    code = "EmptyInput"
    http_status = 400


class UndecodableImage(ServiceError):
    code = "UndecodableImage"
    http_status = 400


class DimensionMismatch(ServiceError):
    code = "DimensionMismatch"
    http_status = 400


class ZeroVector(ServiceError):
    code = "ZeroVector"
    http_status = 400


class InvalidEmbedding(ServiceError):
    """Provider returned a vector with non-finite values."""

    code = "InvalidEmbedding"
    http_status = 502


class ProviderUnreachable(ServiceError):
    code = "ProviderUnreachable"
    http_status = 502


class ProviderTimeout(ServiceError):
    code = "Timeout"
    http_status = 504


class ProviderRefusal(ServiceError):
    """Chat provider returned an empty completion."""

    code = "ProviderRefusal"
    http_status = 502


class InvalidEvent(ServiceError):
    code = "InvalidEvent"
    http_status = 400


class StorageFailure(ServiceError):
    code = "StorageFailure"
    http_status = 500


class NotFound(ServiceError):
    code = "NotFound"
    http_status = 404


class InvalidState(ServiceError):
    code = "InvalidState"
    http_status = 409


class SessionBusy(ServiceError):
    """A message for this session is already in flight."""

    code = "SessionBusy"
    http_status = 409


class LocalizationFailure(ServiceError):
    code = "LocalizationFailure"
    http_status = 502


class ParseFailure(ServiceError):
    code = "ParseFailure"
    http_status = 502


class DegenerateCrop(ServiceError):
    code = "DegenerateCrop"
    http_status = 400


class TrainerUnreachable(ServiceError):
    code = "TrainerUnreachable"
    http_status = 502


class JobFailed(ServiceError):
    code = "JobFailed"
    http_status = 502


class ThresholdNotReached(ServiceError):
    code = "ThresholdNotReached"
    http_status = 409


class NothingToExport(ServiceError):
    code = "NothingToExport"
    http_status = 409


class ConfigInvalid(ServiceError):
    code = "ConfigInvalid"
    http_status = 400


class ScriptInvalid(ServiceError):
    code = "ScriptInvalid"
    http_status = 400
