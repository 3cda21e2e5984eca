"""Exception hierarchy shared by every module of the package."""


class KVRunaheadError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(KVRunaheadError, ValueError):
    """Model or experiment configuration violates an invariant."""


class DimensionError(KVRunaheadError, ValueError):
    """Matrix shapes do not line up."""


class CacheAlignmentError(KVRunaheadError, ValueError):
    """Cached prefix length is inconsistent with the key/value rows."""


class InputError(KVRunaheadError, ValueError):
    """Malformed context or partition/context mismatch."""


class InfeasiblePartitionError(KVRunaheadError, ValueError):
    """A context cannot be split as requested (e.g. fewer tokens than workers)."""


class ArityError(KVRunaheadError, ValueError):
    """Ratio vector length does not match the process count."""


class SearchError(KVRunaheadError, RuntimeError):
    """Partition search found no feasible point."""


class PartitionLookupError(KVRunaheadError, LookupError):
    """Lookup table is empty or unusable for the query."""


class ProtocolError(KVRunaheadError, RuntimeError):
    """Worker message protocol violated (missing, duplicate or misrouted message)."""


class AssemblyError(KVRunaheadError, ValueError):
    """Per-worker outputs do not match the partition they came from."""


class CalibrationError(KVRunaheadError, ValueError):
    """Not enough data to fit a cost coefficient."""


class BudgetExceededError(KVRunaheadError, RuntimeError):
    """Exhaustive enumeration would exceed the configured budget."""


class ClampWarning(UserWarning):
    """Lookup query fell outside the table range and was clamped."""
