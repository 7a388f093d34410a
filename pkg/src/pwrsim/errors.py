"""Exception hierarchy shared across the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


class NetlistError(SimError):
    """Malformed netlist text or an unresolvable hierarchy.

    ``line`` and ``column`` are 1-based when known.
    """

    def __init__(self, message, line=None, column=None, source=None):
        self.line = line
        self.column = column
        self.source = source
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"col {column}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.message = message


class ElementError(SimError):
    """An element cannot be evaluated with its parameters."""

    def __init__(self, instance, message):
        self.instance = instance
        super().__init__(f"{instance}: {message}")


class SingularMatrixError(SimError):
    """The MNA Jacobian has no usable pivot in some column."""

    def __init__(self, slot, index, hint=None):
        self.slot = slot
        self.index = index
        msg = f"singular matrix: no usable pivot for unknown {slot} (index {index})"
        if hint:
            msg += f"; {hint}"
        super().__init__(msg)


class ConvergenceError(SimError):
    """Newton-Raphson failed to converge."""

    def __init__(self, message, time=None, iterations=None):
        self.time = time
        self.iterations = iterations
        if time is not None:
            message = f"t={time:.9e}: {message}"
        super().__init__(message)


class SSWError(SimError):
    """Periodic steady-state (shooting) solve failed."""

    def __init__(self, message, residual=None, step=None):
        self.residual = residual
        self.step = step
        super().__init__(message)
