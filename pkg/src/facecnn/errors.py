"""Exception types raised across the toolkit."""


class FaceCNNError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(FaceCNNError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class DomainError(FaceCNNError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ContractError(FaceCNNError, RuntimeError):
    """A caller violated an operation's usage contract."""


class MalformedNameError(DomainError):
    def __init__(self, filename, reason="expected 'age_gender[_race[_datestamp]].ext'"):
        super().__init__(f"malformed UTK filename {filename!r}: {reason}")
        self.filename = filename


class ImageDecodeError(FaceCNNError, OSError):
    def __init__(self, path, reason=""):
        msg = f"cannot decode image {str(path)!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.path = path


class TrainingDivergedError(FaceCNNError, ArithmeticError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


class CheckpointError(FaceCNNError, OSError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
