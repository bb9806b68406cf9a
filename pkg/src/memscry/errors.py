"""Exception hierarchy shared by every stage of the pipeline."""


class MemscryError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(MemscryError, ValueError):
    pass


class InvalidInputError(MemscryError, ValueError):
    pass


class EmptyInputError(InvalidInputError):
    pass


class ManifestError(MemscryError, ValueError):
    pass


# -- capture ingest -----------------------------------------------------------

class IngestError(MemscryError):
    """Anything that prevents a capture from becoming an SshSessionCapture."""


class CaptureFormatError(IngestError):
    pass


class NoSessionError(IngestError):
    pass


class AmbiguousSessionError(IngestError):
    pass


class IncompleteStreamError(IngestError):
    def __init__(self, message, gaps=()):
        super().__init__(message)
        #: list of (direction, start, end) stream byte ranges that are missing
        self.gaps = list(gaps)


class VersionParseError(IngestError):
    pass


class UnsupportedCipherError(IngestError):
    pass


class HandshakeIncompleteError(IngestError):
    pass


class PacketParseError(MemscryError, ValueError):
    def __init__(self, message, ordinal=None):
        if ordinal is not None:
            message = f"{message} (packet {ordinal})"
        super().__init__(message)
        self.ordinal = ordinal


class CiphertextAlignmentError(MemscryError, ValueError):
    pass


# -- memory analysis ----------------------------------------------------------

class NoCommonRegionsError(MemscryError):
    pass


class DegenerateDeltaError(MemscryError, ValueError):
    pass


# -- decryption ---------------------------------------------------------------

class NoValidCombinationError(MemscryError):
    def __init__(self, message, tried_combinations=0):
        super().__init__(message)
        self.tried_combinations = tried_combinations


class StreamDesyncError(MemscryError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} at stream offset {offset}"
        super().__init__(message)
        self.offset = offset


class TruncatedStreamError(MemscryError):
    pass
