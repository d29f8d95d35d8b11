"""Exception hierarchy shared across the package."""


class QKVError(Exception):
    """Base class for every error raised by qkvguide."""


class ShapeError(QKVError, ValueError):
    pass


class ConfigError(QKVError, ValueError):
    """Invalid configuration value.

    ``field`` carries the dotted config key when one is known, so the CLI can
    report it verbatim.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class InputError(QKVError, ValueError):
    pass


class NumericalError(QKVError, ArithmeticError):
    """A public operation produced a non-finite value."""


class LogicError(QKVError, RuntimeError):
    pass
