"""Exception hierarchy. CLI exit codes hang off these classes."""


class MitoshiftError(Exception):
    exit_code = 1


class ConfigError(MitoshiftError, ValueError):
    exit_code = 2


class DataError(MitoshiftError, ValueError):
    exit_code = 3

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class NumericError(MitoshiftError, ArithmeticError):
    exit_code = 4


class ShapeError(NumericError, ValueError):
    def __init__(self, primitive: str, shape_a, shape_b):
        self.primitive = primitive
        self.shapes = (tuple(shape_a), tuple(shape_b))
        super().__init__(f"{primitive}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")


class InsufficientTissueError(NumericError):
    def __init__(self, n_found: int, n_required: int):
        self.n_found = n_found
        super().__init__(f"insufficient tissue: {n_found} pixels above threshold, need {n_required}")


class DegenerateStainPlaneError(NumericError):
    pass


class UndefinedMetricError(NumericError):
    pass
