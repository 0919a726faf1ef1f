"""File formats: scenes (COLMAP text, synthetic JSON), images, PLY and checkpoints."""


class DataError(ValueError):
    """Malformed or missing input data; messages carry file and line context."""
