"""Exception types shared across the package."""


class SplatError(Exception):
    """Base class for every error raised by guidedsplat."""


class IoError(SplatError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class FormatError(SplatError):
    pass


class MissingInput(SplatError):
    def __init__(self, name):
        super().__init__(f"missing input file: {name}")
        self.name = name


class ValidationError(SplatError):
    pass


class ShapeError(SplatError, ValueError):
    pass


class ConfigError(SplatError):
    pass


class StateError(SplatError):
    pass


class UsageError(SplatError):
    pass


class TrainingError(SplatError):
    pass


class Culled(Exception):
    """Signal raised when a primitive falls outside the (near, far) depth range.

    Not a failure: callers that project single primitives catch it and skip.
    """
