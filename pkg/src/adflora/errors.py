"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class PreconditionError(ValueError):
    """An operation was called outside its documented domain."""


class ConvergenceError(ArithmeticError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class NumericError(ArithmeticError):
    """A non-finite value appeared during training."""

    def __init__(self, message, client=None, step=None):
        where = []
        if client is not None:
            where.append(f"client={client}")
        if step is not None:
            where.append(f"step={step}")
        suffix = f" [{', '.join(where)}]" if where else ""
        super().__init__(message + suffix)
        self.client = client
        self.step = step


class ConfigError(ValueError):
    """Experiment config failed validation; carries every violation."""

    def __init__(self, issues):
        self.issues = list(issues)
        lines = "\n".join(f"  {path}: {msg}" for path, msg in self.issues)
        super().__init__(f"{len(self.issues)} config error(s):\n{lines}")
