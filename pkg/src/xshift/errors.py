"""Exception hierarchy.

``DataError`` and its subclasses are problems with the inputs (exit status 2
from the CLI). ``ArgumentError`` is a caller mistake (exit status 1).
"""


class XShiftError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(XShiftError, ValueError):
    """An argument is out of its documented range."""


class DataError(XShiftError):
    """Input data is malformed or unusable."""


class ShapeError(DataError):
    pass


class HarmonizationError(DataError):
    def __init__(self, label, dataset_id=None):
        self.label = label
        self.dataset_id = dataset_id
        where = f" in dataset {dataset_id!r}" if dataset_id else ""
        super().__init__(f"unknown raw label {label!r}{where} and no ignore rule")


class CycleError(DataError):
    pass


class ManifestError(DataError):
    pass


class MissingClass(DataError):
    """Labels contain a single class, so a rank metric cannot be computed."""


class MissingHead(DataError):
    """The model has no output for the requested task."""


class MissingTask(DataError):
    """The test labels do not cover the requested task."""


class DegenerateOperatingPoint(DataError):
    pass


class EmptyEnsemble(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class NoValidCells(DataError):
    pass


class TrainingError(DataError):
    def __init__(self, message, iteration):
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")


class ConfigError(DataError):
    pass
