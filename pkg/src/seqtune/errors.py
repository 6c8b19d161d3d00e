"""Exception hierarchy shared by every module.

The CLI maps :class:`ConfigurationError` to exit code 1 and everything else
derived from :class:`SeqtuneError` to exit code 2.
"""


class SeqtuneError(Exception):
    pass


class ConfigurationError(SeqtuneError, ValueError):
    """Invalid user-supplied configuration such as a bad schedule or model."""


class DimensionError(SeqtuneError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(SeqtuneError, RuntimeError):
    """A precondition of an API call was violated by the caller."""


class EvaluationError(SeqtuneError, ValueError):
    """A metric is undefined for the given inputs (e.g. AUC with one class)."""


class DataFormatError(SeqtuneError, ValueError):
    """A file on disk does not follow its documented format."""


class ChecksumError(DataFormatError):
    pass


class ShapeMismatchError(DataFormatError):
    """Stored parameter shapes disagree with the requested configuration."""
