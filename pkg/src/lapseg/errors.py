"""Exception types raised across the package."""


class LapsegError(Exception):
    """Base class for all package-specific errors."""


# --- dataset / manifest ---

class MissingMask(LapsegError):
    """An image file has no matching mask file."""


class UnreadableImage(LapsegError):
    """An image or mask file exists but cannot be decoded."""


class EmptyDataset(LapsegError):
    """A scan produced zero image/mask pairs."""


class DimensionMismatch(LapsegError):
    """Raw image and raw mask sizes differ for the same record."""


class BadRatios(LapsegError):
    """Split ratios are negative or do not sum to 1."""


class CropLargerThanImage(LapsegError):
    """A sampled crop window exceeds the current image extent."""


# --- model ---

class ShapeError(LapsegError):
    """A tensor does not satisfy the expected shape contract."""


class StrideSetMismatch(LapsegError):
    """Two feature pyramids disagree on their stride key sets."""


class SkipShapeMismatch(LapsegError):
    """A skip feature map is not exactly twice the decoder input size."""


class WeightsUnavailable(LapsegError):
    """Pretrained weights were requested but cannot be obtained."""


class IncompatibleStrides(LapsegError):
    """A backbone cannot provide the requested pyramid levels."""


class NonFiniteActivation(LapsegError):
    """A forward pass produced NaN or Inf values."""


# --- metrics / loss ---

class ShapeMismatch(LapsegError):
    """Prediction and target arrays have different shapes."""


class NonBinaryTarget(LapsegError):
    """A target mask contains values other than 0 and 1."""


class EmptyList(LapsegError):
    """An aggregation was requested over zero items."""


# --- training ---

class NonFiniteLoss(LapsegError):
    """Training loss became NaN or Inf; carries the offending batch index."""

    def __init__(self, message, epoch=None, batch_index=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


class ConfigHashMismatch(UserWarning):
    """Checkpoint sidecar config differs from the flags supplied on the CLI."""
