"""
Exception hierarchy shared by every module of the echo canceller
"""

from typing import Optional, Sequence


class AecError(Exception):
    """Base class for all errors raised by this package"""


class ShapeError(AecError, ValueError):
    """Tensor dimension mismatch"""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message} (shapes: {', '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes]


class ContractError(AecError, ValueError):
    """Pre-condition of an operation was violated"""


class ConfigError(AecError, ValueError):
    """Unknown key, bad value or inconsistent configuration"""


class WavFormatError(AecError):
    """Unsupported or corrupted WAV file"""


class CheckpointError(AecError):
    """Base class for checkpoint format problems"""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    pass


class CheckpointDtypeError(CheckpointError):
    pass


class TransferShapeError(AecError):
    """A name-matched tensor has a different shape in the source checkpoint"""

    def __init__(self, name: str, target_shape: Sequence[int], source_shape: Sequence[int]):
        super().__init__(
            f"Shape conflict for '{name}': target {tuple(target_shape)} vs source {tuple(source_shape)}"
        )
        self.name = name
        self.target_shape = tuple(target_shape)
        self.source_shape = tuple(source_shape)


class TrainingDivergedError(AecError):
    """Loss became non-finite during training"""

    def __init__(self, step: int, term: str, value: Optional[float] = None):
        super().__init__(f"Non-finite loss at step {step}: term '{term}' = {value}")
        self.step = step
        self.term = term
        self.value = value
