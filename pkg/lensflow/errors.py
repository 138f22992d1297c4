class GeometryError(ValueError):
    """A point or parameter lies outside the domain of a chart or map."""


class ConfigError(ValueError):
    """
    Experiment config could not be parsed.
    `line` is 1-based and points at the offending key when it can be located.
    """

    def __init__(self, message: str, line: int = 1):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonFiniteError(ArithmeticError):
    pass


class TrainingAborted(RuntimeError):
    pass
