# errors.py


class MSPFError(Exception):
    pass


class ShapeError(MSPFError, ValueError):
    """Tensor extents do not satisfy an operation's contract."""


class DomainError(MSPFError, ValueError):
    """Input lies outside the mathematical domain of an operation."""


class ContractError(MSPFError, ValueError):
    pass


class TrackingError(MSPFError, RuntimeError):
    """A tensor is not recorded on the tape it was asked about."""


class ConfigError(MSPFError, ValueError):
    pass


class InputError(MSPFError, ValueError):
    """Invalid user-supplied data (images, ranges, directories)."""


class FormatError(MSPFError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(MSPFError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""

    def __init__(self, message, index=None, name=None):
        details = []
        if name is not None:
            details.append(f"name={name}")
        if index is not None:
            details.append(f"index={index}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.index = index
        self.name = name
