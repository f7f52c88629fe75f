"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError/ContractError -> 2,
InputError/FormatError -> 3.
"""


class ElastisegError(Exception):
    """Base class for package errors."""


class DimensionError(ElastisegError):
    """Tensor shapes do not satisfy an operation's contract."""


class ContractError(ElastisegError):
    """An API precondition was violated (non-scalar loss, bad permutation, ...)."""


class ConfigError(ElastisegError):
    """An invalid configuration: bad subnet config, unknown scorer/key, ..."""


class InputError(ElastisegError):
    """Invalid or empty input data (empty eval set, empty mask, ...)."""


class FormatError(ElastisegError):
    """A file does not conform to the expected on-disk format."""


class TrainingFault(ElastisegError):
    """Training produced a non-finite loss; message carries step context."""
