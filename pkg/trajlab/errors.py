"""
Exception hierarchy for trajlab.

Every error raised on purpose by the package derives from TrajLabError so the
CLI can map it onto an exit code.
"""


class TrajLabError(Exception):
    """Base class for all trajlab errors"""


class ContractViolation(TrajLabError, ValueError):
    """A precondition of an operation was violated (masked-invalid action, bad shape, bad parameter)"""


class TrainingDivergence(ContractViolation):
    """A loss or gradient became non-finite during training"""


class NetworkLookupError(TrajLabError, KeyError):
    """Unknown link id, token or observation"""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class DatasetValidationError(TrajLabError, ValueError):
    """A trajectory does not validate against the active network"""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataFormatError(TrajLabError, ValueError):
    """A file could not be parsed (CSV row, checkpoint, edge list)"""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(TrajLabError, ValueError):
    """Unknown or invalid configuration key, reported as section.key"""


class ManifestError(TrajLabError):
    """A run manifest references a missing artifact or a hash does not verify"""
