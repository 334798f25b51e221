"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage/configuration problems
exit 2, data problems exit 3, integrity problems exit 4.
"""


class MambaFuseError(Exception):
    """Base class for all package errors."""


class ShapeError(MambaFuseError):
    """Operands have incompatible shapes; message names both shapes."""


class GraphError(MambaFuseError):
    """Autodiff contract violation (non-scalar loss, repeated backward)."""


class ConfigurationError(MambaFuseError):
    """A configuration value is out of contract."""


class DataError(MambaFuseError):
    """Dataset or input file problem."""


class IntegrityError(MambaFuseError):
    """Checkpoint container is inconsistent or corrupted."""


class CapabilityError(MambaFuseError):
    """Requested analysis needs a model feature that is disabled."""
