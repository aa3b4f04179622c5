"""Exception hierarchy.

Two roots map onto CLI exit codes: :class:`ValidationError` (bad inputs,
exit 2) and :class:`ComputeError` (a stage could not produce a result,
exit 3).
"""


class CtxExposureError(Exception):
    pass


class ValidationError(CtxExposureError, ValueError):
    pass


class ComputeError(CtxExposureError, RuntimeError):
    pass


class InvalidCoordinateError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class SchemaError(ValidationError):
    """A CSV input does not match its declared schema."""

    def __init__(self, message, path=None, column=None, row=None):
        self.path = path
        self.column = column
        self.row = row
        where = []
        if path is not None:
            where.append(f"file={path}")
        if column is not None:
            where.append(f"column={column}")
        if row is not None:
            where.append(f"row={row}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class InvalidRecordError(ValidationError):
    pass


class IncoherentRateTableError(ValidationError):
    pass


class IncompleteTableError(ValidationError):
    pass


class IncompleteRateTableError(IncompleteTableError):
    pass


class DegenerateRateError(ComputeError):
    pass


class ImpossibleObservationError(ComputeError):
    pass


class EmptySupportError(ComputeError):
    pass


class LevelMismatchError(ValidationError):
    pass


class InsufficientDataError(ComputeError):
    pass


class DegenerateVarianceError(ComputeError):
    pass


class DegenerateInputError(ComputeError):
    pass


class InvalidResampleError(ValidationError):
    pass


class ParticipantError(ComputeError):
    """Wraps a per-record failure with the offending person id attached."""

    def __init__(self, person_id, cause):
        self.person_id = person_id
        self.cause = cause
        super().__init__(f"person {person_id}: {cause}")
