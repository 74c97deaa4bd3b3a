"""Exception hierarchy shared by every module."""


class PerfBPError(Exception):
    """Base class for errors raised by perfbp."""


class ShapeError(PerfBPError, ValueError):
    """Tensor, layer or cache shapes do not line up."""


class NonFiniteError(PerfBPError, FloatingPointError):
    """A computation produced NaN or Inf."""


class ConfigError(PerfBPError, ValueError):
    pass


class DataError(PerfBPError, ValueError):
    pass


class CheckpointError(PerfBPError):
    pass
