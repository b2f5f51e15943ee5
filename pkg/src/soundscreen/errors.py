"""Exception hierarchy shared across the pipeline."""


class SoundScreenError(Exception):
    """Base class for all pipeline errors."""


# audio_io
class DecodeError(SoundScreenError):
    pass


class UnsupportedFormat(SoundScreenError):
    pass


# features
class TooShort(SoundScreenError):
    pass


class DegenerateBand(SoundScreenError):
    pass


class ShapeMismatch(SoundScreenError):
    pass


# net
class NoModality(SoundScreenError):
    pass


class EmptySplit(SoundScreenError):
    pass


# cohort
class SchemaError(SoundScreenError):
    def __init__(self, line: int, field: str, message: str = ""):
        self.line = line
        self.field = field
        detail = f": {message}" if message else ""
        super().__init__(f"line {line}, field '{field}'{detail}")


class ConsistencyError(SoundScreenError):
    pass


class DuplicateKey(SoundScreenError):
    pass


class InsufficientCohort(SoundScreenError):
    pass


class Unmatchable(SoundScreenError):
    pass


# eval
class OneClassOnly(SoundScreenError):
    pass


class TooDegenerate(SoundScreenError):
    pass


# progression
class DuplicateTimestamp(SoundScreenError):
    pass


# synthkit
class SpecError(SoundScreenError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


# cli / config
class ConfigError(SoundScreenError):
    pass
