"""Exception hierarchy shared by all boxsam modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError and anything unexpected -> 4.
"""


class BoxSAMError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BoxSAMError):
    """Invalid or inconsistent configuration (bad field values, shape laws)."""


class DataError(BoxSAMError):
    """Invalid input data or dataset state (non-binary mask, missing file)."""


class ChecksumError(DataError):
    """Checkpoint payload does not match its recorded checksum."""


class UndefinedMetricError(DataError):
    """Metric is undefined for this input (e.g. F-measure on an empty GT)."""


class NumericError(BoxSAMError):
    """Non-finite values encountered where finite numbers are required."""
