"""Exception types shared across the package."""


class BinaryViTError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(BinaryViTError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(BinaryViTError):
    """A model or layer configuration violates an invariant."""


class ParameterError(BinaryViTError):
    """A parameter value is outside its legal range."""


class WeightFormatError(BinaryViTError):
    """A weight container file is malformed or incompatible."""


class ImageFormatError(BinaryViTError):
    """An input image file is malformed or does not fit the model."""


class TrainingDiverged(BinaryViTError):
    """Loss became non-finite during training."""

    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
