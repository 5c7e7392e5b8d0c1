"""Exception hierarchy shared by every ravnet module."""


class RavNetError(Exception):
    """Base class for all errors raised by ravnet."""


class ShapeError(RavNetError, ValueError):
    pass


class DomainError(RavNetError, ValueError):
    pass


class EmptyInputError(RavNetError, ValueError):
    pass


class ConfigError(RavNetError, ValueError):
    pass


class TapeError(RavNetError, RuntimeError):
    pass


class DeterminismError(RavNetError, RuntimeError):
    pass


class StateError(RavNetError, RuntimeError):
    pass


class DivergenceError(RavNetError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class IoError(RavNetError, OSError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class FormatError(RavNetError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
