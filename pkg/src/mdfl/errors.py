"""Exception hierarchy shared by all toolkit modules."""


class MdflError(Exception):
    """Base class for toolkit errors."""


class ShapeError(MdflError):
    """Raised when tensor shapes do not conform to an operation's contract."""

    def __init__(self, op: str, shape_a, shape_b, detail: str = ""):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        msg = f"{op}: incompatible shapes {self.shape_a} vs {self.shape_b}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConfigError(MdflError):
    """Bad configuration file, unknown key, or invalid flag combination."""


class DataError(MdflError):
    """Malformed data file: bad magic, truncation, or dimension mismatch."""


class NumericError(MdflError):
    """Non-finite value encountered where the pipeline requires finite math."""
