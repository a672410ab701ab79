"""Exception types raised across the engine."""


class VoxPruneError(Exception):
    """Base class for all engine errors."""


class InvalidInput(VoxPruneError, ValueError):
    pass


class EmptyScene(VoxPruneError):
    """No points survive spatial filtering."""


class ShapeError(VoxPruneError, ValueError):
    pass


class ConfigError(VoxPruneError, ValueError):
    pass


class OracleLimit(VoxPruneError):
    """Dense reference requested on a grid too large to materialize."""


class EmptyBatch(VoxPruneError, ValueError):
    pass


class DivergedError(VoxPruneError, ArithmeticError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class LayerError(VoxPruneError):
    """Wraps a component failure with the pipeline layer it happened in."""

    def __init__(self, layer: str, cause: Exception):
        super().__init__(f"layer {layer}: {cause}")
        self.layer = layer
        self.cause = cause
