"""Exception types shared across the package."""


class TumorSimError(Exception):
    pass


class VolumeFormatError(TumorSimError, ValueError):
    """Malformed or unsupported on-disk volume (sidecar, header, payload size)."""


class NonFiniteError(TumorSimError, ValueError):
    """A NaN or Inf was found where finite intensities are required."""

    def __init__(self, index, where="data"):
        self.index = int(index)
        super().__init__(f"non-finite value in {where} at linear index {self.index}")


class ShapeMismatchError(TumorSimError, ValueError):
    pass


class VerificationError(TumorSimError):
    """Digest or invariant check failed on persisted outputs."""
