"""Exception types raised across the toolkit."""


class CERError(Exception):
    """Base class for toolkit errors."""


class ManifestError(CERError, ValueError):
    """A manifest file is malformed or fails validation."""


class ConfigError(CERError, ValueError):
    """Invalid configuration; carries every problem found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ShapeError(CERError, ValueError):
    pass


class NumericError(CERError, ArithmeticError):
    pass


class CheckpointFormatError(CERError, ValueError):
    pass


class ImageLoadError(CERError, OSError):
    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"cannot decode image {self.path}: {reason}")
