"""Exception hierarchy shared by every module of the package."""


class PoseAugError(Exception):
    """Base class for all package errors."""


class ShapeError(PoseAugError, ValueError):
    pass


class ContractError(PoseAugError, RuntimeError):
    """An API was called outside its precondition (e.g. non-scalar backward)."""


class InvalidBatchError(PoseAugError, ValueError):
    pass


class NonFiniteError(PoseAugError, FloatingPointError):
    pass


class TopologyError(PoseAugError, ValueError):
    pass


class DegenerateBoneError(PoseAugError, ValueError):
    pass


class ProjectionDomainError(PoseAugError, ValueError):
    pass


class InvalidRatioError(PoseAugError, ValueError):
    pass


class AlignmentError(PoseAugError, ValueError):
    pass


class ConfigError(PoseAugError, ValueError):
    pass


class DatasetError(PoseAugError, ValueError):
    """Raised while loading a dataset; ``index`` names the offending record."""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"record {index}: {message}")
        self.index = index


class JointCountError(DatasetError):
    pass


class CameraError(DatasetError):
    pass


class NonFiniteRecordError(DatasetError):
    pass


class DepthError(DatasetError):
    pass


class TrainingAbort(PoseAugError, RuntimeError):
    pass
