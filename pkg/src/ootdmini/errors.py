"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class RangeError(ValueError):
    pass


class InputError(ValueError):
    pass


class FusionError(ValueError):
    """Garment/body feature maps cannot be fused at a self-attention layer."""

    def __init__(self, message: str, layer: int | None = None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class FormatError(ValueError):
    pass


class CorruptionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass
