"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GeometryError(ValueError):
    """A spatial configuration (window, patch, stride, padding) does not tile the map."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class FormatError(ValueError):
    """A file on disk does not have the expected layout."""


class TruncatedFileError(FormatError, OSError):
    """A file ends part way through a record; the message carries the byte offset."""


class ConfigError(ValueError):
    """A run configuration names an unknown field or holds an invalid value."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, lr: float, grad_norm: float, loss: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        self.loss = loss
        super().__init__(
            f"non-finite value at step {step}: loss={loss!r}, lr={lr:.6g}, grad_norm={grad_norm!r}"
        )
