"""Exception hierarchy shared across the package."""


class IseatError(Exception):
    pass


class ShapeError(IseatError, ValueError):
    """Operands or structures do not line up."""


class NumericalError(IseatError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(IseatError, ValueError):
    pass


class IdxFormatError(IseatError, ValueError):
    """Base class for IDX ingestion failures. ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    def __init__(self, n_images: int, n_labels: int):
        super().__init__(
            f"image count {n_images} does not match label count {n_labels}", 4
        )
        self.n_images = n_images
        self.n_labels = n_labels


class CheckpointError(IseatError, ValueError):
    pass
