"""Exception types shared across the package."""


class UnmappableCharacter(ValueError):
    """A character outside the supported character set; carries its position."""

    def __init__(self, char: str, position: int):
        super().__init__(f"unmappable character {char!r} at position {position}")
        self.char = char
        self.position = position


class DimensionNotDivisible(ValueError):
    pass


class InvalidT(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class TimestepOutOfRange(ValueError):
    pass


class TimestepOrder(ValueError):
    pass


class OddDim(ValueError):
    pass


class MissingSkips(ValueError):
    pass


class CountMismatch(ValueError):
    pass


class OverlappingSpans(ValueError):
    pass


class SpanOutOfBounds(ValueError):
    pass


class LayoutMaskMismatch(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


class InsufficientData(ValueError):
    pass


class PrefixNotAtBOI(ValueError):
    pass


class UnparseableCaption(ValueError):
    pass
