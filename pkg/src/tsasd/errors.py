"""Exception types raised across the package."""


class TsasdError(Exception):
    """Base class for all package errors."""


class ShortInput(TsasdError, ValueError):
    pass


class InvalidAudio(TsasdError, ValueError):
    pass


class EmptyTrack(TsasdError, ValueError):
    pass


class AlignmentError(TsasdError, ValueError):
    pass


class ConfigError(TsasdError, ValueError):
    pass


class ShortEnrollment(TsasdError, ValueError):
    pass


class ParseError(TsasdError, ValueError):
    def __init__(self, message: str, line: int | None = None, track_id: str | None = None):
        self.line = line
        self.track_id = track_id
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if track_id is not None:
            prefix.append(f"track {track_id!r}")
        super().__init__(f"{', '.join(prefix)}: {message}" if prefix else message)


class MissingAsset(TsasdError, FileNotFoundError):
    pass


class IoError(TsasdError, OSError):
    pass


class UndefinedMetric(TsasdError, ValueError):
    pass
