"""Exception hierarchy shared by every module.

The CLI maps these onto its exit-code contract: ``ConfigError`` -> 1,
``NumericError`` -> 2, ``DataFormatError``/``CheckpointError`` -> 3.
"""


class IdalError(Exception):
    """Base class for all library errors."""


class ShapeError(IdalError, ValueError):
    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(IdalError, ArithmeticError):
    """Non-finite values, out-of-domain inputs, or a diverged training step."""

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})


class ConfigError(IdalError, ValueError):
    pass


class DataFormatError(IdalError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class CheckpointError(IdalError):
    pass
