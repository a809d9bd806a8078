"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A precondition on an argument was violated."""


class CorruptCheckpoint(IOError):
    """A checkpoint file failed validation (magic, version, CRC, truncation)."""


class CorruptBitstream(IOError):
    """A coded bitstream is malformed or inconsistent with the decoder state."""


class FitError(RuntimeError):
    """A curve fit is degenerate (singular system or disjoint ranges)."""


class TrainingDiverged(RuntimeError):
    """Training aborted because the loss became non-finite."""
