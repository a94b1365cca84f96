"""Exception types shared across the pipeline."""


class ShiftCloudError(Exception):
    pass


class ConfigError(ShiftCloudError, ValueError):
    """Bad configuration values or mismatched inputs."""


class DataError(ShiftCloudError):
    """Malformed or missing input data (files, sequences, checkpoints)."""


class ParseError(DataError):
    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class DegenerateProjectionError(ShiftCloudError, ArithmeticError):
    """Projection of a point lying in the camera's Z = 0 plane."""


class DegenerateFrameError(ShiftCloudError):
    """A frame produced no usable points; callers drop the sample."""


class EndOfTrajectory(ShiftCloudError):
    """No future frame far enough ahead; callers drop the sample."""


class OutOfTrack(ShiftCloudError):
    """Position lies beyond the extent of the track."""


class InvalidPose(ShiftCloudError):
    pass


class InvalidInput(ShiftCloudError, ValueError):
    pass


class CheckpointVersionError(DataError):
    pass
