"""
Error Types
Exception hierarchy shared by every module
"""


class CMTError(Exception):
    """Base class for all toolkit errors"""


class ShapeError(CMTError, ValueError):
    """Operand extents do not agree"""


class DomainError(CMTError, ValueError):
    """Value outside the domain of an operation (log of <= 0, NaN, empty axis)"""


class ContractError(CMTError, ValueError):
    """A documented precondition was violated by the caller"""


class GenerationError(CMTError, RuntimeError):
    """Scene configuration cannot be realized"""


class FormatError(CMTError, ValueError):
    """Malformed binary or text file"""

    def __init__(self, message: str, offset: int = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(CMTError, ValueError):
    """Checkpoint does not fit the model it is loaded into"""


class ConfigError(CMTError, ValueError):
    """Unknown or malformed configuration entry"""


class DivergenceError(CMTError, RuntimeError):
    """Training produced a non-finite loss"""
