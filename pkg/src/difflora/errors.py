"""Exception hierarchy shared across the package."""


class DiffLoRAError(Exception):
    """Base class for all package errors."""


class ShapeError(DiffLoRAError, ValueError):
    pass


class ConfigError(DiffLoRAError, ValueError):
    pass


class StateError(DiffLoRAError, RuntimeError):
    pass


class InputError(DiffLoRAError, ValueError):
    pass


class FormatError(DiffLoRAError, ValueError):
    """Malformed checkpoint file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateBatchError(DiffLoRAError, ValueError):
    pass


class DivergenceError(DiffLoRAError, RuntimeError):
    def __init__(self, step: int, loss: float, lambdas: dict[str, float]):
        lam = ", ".join(f"{k}={v:.6g}" for k, v in lambdas.items()) or "n/a"
        super().__init__(f"non-finite loss {loss} at step {step}; lambda: {lam}")
        self.step = step
        self.loss = loss
        self.lambdas = lambdas


class AnnotationError(DiffLoRAError, ValueError):
    pass


class ComparisonError(DiffLoRAError, ValueError):
    pass
