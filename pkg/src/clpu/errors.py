class CLPUError(Exception):
    pass


class ShapeError(CLPUError, ValueError):
    pass


class DivergedError(CLPUError, FloatingPointError):
    pass


class ProtocolError(CLPUError, ValueError):
    """An invalid request for the current task-status dictionary."""


class FormatError(CLPUError, ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass
