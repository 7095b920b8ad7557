"""Exception types raised across the package."""


class TspError(Exception):
    pass


class InvalidArgument(TspError, ValueError):
    pass


class InvalidTour(TspError, ValueError):
    pass


class ShapeError(TspError, ValueError):
    pass


class EmptySupportError(TspError, ValueError):
    """Every entry along the normalized axis was masked out."""


class DegenerateStatistics(TspError, ValueError):
    pass


class DegenerateInstance(TspError, ValueError):
    pass


class UnsupportedFormat(TspError, ValueError):
    pass


class TsplibParseError(TspError, ValueError):
    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class InstanceTooSmall(TspError, ValueError):
    pass


class InstanceTooLarge(TspError, ValueError):
    pass


class DecodeComplete(TspError, RuntimeError):
    """Raised when a decoder step is requested after every node is visited."""


class CheckpointError(TspError, ValueError):
    pass
