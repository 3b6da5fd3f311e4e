"""Exception types shared across the package.

Every error carries a stable ``code`` string so callers (and the CLI) can
match on the failure kind without parsing messages.
"""


class TMError(Exception):
    """Base class; ``code`` identifies the failure kind."""

    code = "error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class FormatError(TMError):
    code = "format-error"


class TruncatedFileError(TMError):
    code = "truncated-file"


class EmptyVectorError(TMError):
    code = "empty-vector"


class EmptyDatasetError(TMError):
    code = "empty-dataset"


class ImageTooSmallError(TMError):
    code = "image-too-small"


class ShapeError(TMError):
    code = "shape-error"


class InsufficientTransformationsError(TMError):
    code = "insufficient-transformations"


class InsufficientSamplesError(TMError):
    code = "insufficient-samples"


class BatchTooSmallError(TMError):
    code = "batch-too-small"


class EmptyLayerError(TMError):
    code = "empty-layer"


class EmptyReportError(TMError):
    code = "empty-report"


class UnsupportedLayerError(TMError):
    code = "unsupported-layer"


class NoActivationsError(TMError):
    code = "no-activations"


class PreconditionViolatedError(TMError):
    code = "precondition-violated"


class WriteError(TMError):
    code = "write-error"


class ProviderError(TMError):
    code = "provider-error"
