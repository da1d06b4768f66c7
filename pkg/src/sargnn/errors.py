"""Exception hierarchy shared by every sargnn module."""


class SarGnnError(Exception):
    """Base class for all errors raised by sargnn."""


class InvalidInputError(SarGnnError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(InvalidInputError):
    """Tensor or graph dimensions do not line up."""


class IntegrityError(SarGnnError):
    """Internal data is inconsistent (non-finite values, broken provenance, mixed dims)."""


class StratificationError(InvalidInputError):
    """A class has too few samples to be split."""


class CorruptionError(SarGnnError):
    """A model file failed its structural or checksum validation."""


class UnsupportedVersionError(SarGnnError):
    """A model file was written by an unknown format version."""

    def __init__(self, found: int, supported: int):
        super().__init__(
            f"unsupported model format version {found} (this build reads version {supported})"
        )
        self.found = found
        self.supported = supported


class DivergedError(SarGnnError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, sample: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, sample {sample}")
        self.epoch = epoch
        self.sample = sample
        self.loss = loss


class DatasetIOError(SarGnnError, OSError):
    """A file could not be read or written."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason
