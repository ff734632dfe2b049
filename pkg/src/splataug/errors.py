"""Exception hierarchy shared by every module."""


class SplatAugError(Exception):
    """Base class; CLI maps subclasses to exit codes."""

    exit_code = 2


class InvalidInputError(SplatAugError, ValueError):
    pass


class DegenerateGeometryError(SplatAugError, ValueError):
    pass


class BehindCameraError(SplatAugError, ValueError):
    pass


class RenderError(SplatAugError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EmptyMaskError(InvalidInputError):
    pass


class DegenerateOutputError(SplatAugError, ArithmeticError):
    exit_code = 3


class ParseError(SplatAugError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FormatError(SplatAugError, ValueError):
    pass


class LoadError(SplatAugError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ConflictError(SplatAugError, ValueError):
    pass


class AugmentationError(SplatAugError, RuntimeError):
    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class TrainingError(SplatAugError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint
