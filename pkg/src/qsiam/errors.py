"""Exception hierarchy shared by all qsiam modules."""


class QSiamError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(QSiamError, ValueError):
    pass


class UnsupportedLayerError(QSiamError, ValueError):
    pass


class ParameterError(QSiamError, ValueError):
    pass


class ContainerError(QSiamError):
    """Weight container that is malformed, truncated or does not match the network."""


class IngestionError(QSiamError):
    """Unreadable frame, sequence directory or ground-truth line."""


class FoldingError(QSiamError, ValueError):
    """A (PE, SIMD) pair does not evenly fold a layer."""


class FitError(QSiamError):
    pass
