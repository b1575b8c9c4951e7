"""Exception hierarchy shared by every DiScene module."""


class DiSceneError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(DiSceneError, ValueError):
    """Two tensors or sets that must agree in shape do not."""


class GridMismatchError(ShapeMismatchError):
    """Two voxel grids were compared under different GridSpecs."""


class EmptySetError(DiSceneError, ValueError):
    """An operation that needs at least one element received none."""


class InvalidClassError(DiSceneError, ValueError):
    """A class id is outside the valid range."""


class NonFiniteError(DiSceneError, ValueError):
    """An input contains NaN or infinite values."""


class SceneFormatError(DiSceneError):
    """A scene file or dataset manifest could not be parsed."""


class CheckpointFormatError(DiSceneError):
    """A model checkpoint could not be parsed or does not fit its config."""


class SceneGenerationError(DiSceneError, RuntimeError):
    """Procedural scene generation gave up after too many attempts."""
