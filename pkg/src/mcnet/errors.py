"""Exception hierarchy.  The CLI prints the class name as the machine-readable error tag."""


class McnetError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigError(McnetError, ValueError):
    pass


class ContractError(McnetError, ValueError):
    """A caller broke a documented precondition (shapes, scalar loss, call order)."""


class ParseError(McnetError, ValueError):
    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.field = field


class SchemaError(McnetError, ValueError):
    pass


class SplitError(McnetError, ValueError):
    pass


class RolloutError(McnetError, ValueError):
    pass


class MetricError(McnetError, ValueError):
    """A metric is undefined for the given input (e.g. AUC with one class)."""


class DivergenceError(McnetError, FloatingPointError):
    pass
