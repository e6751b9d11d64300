"""Exception types shared across the package."""


class Cap3dError(Exception):
    """Base class for all package-specific errors."""


class FormatError(Cap3dError):
    """A file or byte stream does not match its documented format.

    ``line`` is 1-based and refers to the offending line/row when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LabelFormatError(FormatError):
    """Malformed KITTI label line."""


class CalibrationError(FormatError):
    """Missing or malformed calibration data."""


class PointCloudFormatError(FormatError):
    """Velodyne binary blob with an invalid length."""


class DatasetError(Cap3dError):
    """A frame of a dataset could not be read; message names the frame."""


class EvaluationError(Cap3dError):
    """Inconsistent inputs to an evaluation routine (e.g. missing frame)."""


class DegenerateComponentError(Cap3dError):
    """A mixture component collapsed (total responsibility ~ 0)."""

    def __init__(self, component, iteration=None):
        msg = f"mixture component {component} is degenerate"
        if iteration is not None:
            msg += f" at iteration {iteration}"
        super().__init__(msg)
        self.component = component
        self.iteration = iteration


class NumericalError(Cap3dError):
    """A numerically unrepresentable intermediate value was encountered."""
