"""Exception classes shared by every subsystem.

The CLI prints ``error: <ClassName>: <message>`` and exits nonzero, so the
class name is the machine-parsable error class.
"""


class SemnavError(Exception):
    pass


class ContractViolation(SemnavError, ValueError):
    """A precondition of a public operation was not met."""


class ConfigurationError(SemnavError, ValueError):
    """A configuration value is infeasible or inconsistent."""


class DiagnosticError(SemnavError, RuntimeError):
    """A runtime check failed (nondeterminism, masked gold action, ...)."""


class DatasetError(SemnavError, FileNotFoundError):
    """A dataset, split or checkpoint could not be found or read."""
