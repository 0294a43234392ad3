class GeometryError(ValueError):
    """Raster or coordinate does not fit the declared (H, W)."""


class ParseError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class StateError(RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""
