"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericError -> 3, InfeasibleError -> 4.
"""


class MediError(Exception):
    """Base class for all package errors."""


class ConfigError(MediError, ValueError):
    """Invalid configuration, malformed input, or violated precondition."""


class NumericError(MediError, ArithmeticError):
    """Non-finite values encountered where finite arithmetic is required."""


class InfeasibleError(MediError, RuntimeError):
    """A sampling/evaluation protocol cannot be satisfied by the data."""


class InsufficientClassError(InfeasibleError):
    """A class does not hold enough examples for the requested episode."""

    def __init__(self, class_label, have, need):
        self.class_label = class_label
        self.have = have
        self.need = need
        super().__init__(
            f"insufficient class population: class {class_label} has {have} "
            f"examples, episode needs {need}"
        )


class CataInfeasibleError(InfeasibleError):
    """No view can support the requested episode shape."""

    def __init__(self, way, m, k, diagnostics):
        self.way = way
        self.m = m
        self.k = k
        self.diagnostics = diagnostics
        lines = ", ".join(
            f"view {v}: size={d['size']}, eligible_classes={d['eligible_classes']}"
            for v, d in sorted(diagnostics.items())
        )
        super().__init__(
            f"CATA infeasible for way={way}, m={m}, k={k} ({lines})"
        )
