"""Exception hierarchy shared across the package."""


class CosineMetricError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CosineMetricError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CosineMetricError, ValueError):
    """A documented precondition of an operation was violated."""


class DegenerateBatchError(ContractError):
    """Batch statistics are undefined for the given batch."""


class LabelError(ContractError):
    """Class label outside the valid range."""


class NoTripletError(ContractError):
    """The batch contains no valid (anchor, positive, negative) triplet."""


class DegenerateVarianceError(ContractError):
    """Shared magnet-loss variance collapsed to (near) zero."""


class ZeroNormError(ContractError):
    """Cosine distance requested for a zero-length vector."""


class TrainingError(CosineMetricError, RuntimeError):
    """Training diverged or could not proceed."""


class FormatError(CosineMetricError, ValueError):
    """Base class for binary/image file parse errors."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class SizeOverflowError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TrailingDataError(FormatError):
    pass


class MissingTensorError(CosineMetricError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing tensor"


class TensorShapeMismatchError(ShapeError):
    pass


class ImageFormatError(FormatError):
    """Base class for PPM/PGM decoding errors."""


class ImageHeaderError(ImageFormatError):
    pass


class ImageMaxvalError(ImageFormatError):
    pass


class ImageTruncatedError(ImageFormatError, TruncatedError):
    pass


class EmptyDatasetError(CosineMetricError, ValueError):
    pass
