"""Exception types shared across the package."""


class FormatError(ValueError):
    """A binary store or config file is malformed.

    Raised for bad magic bytes, unsupported versions, truncated streams,
    checksum mismatches, and invariant violations detected on load.
    """


class ConfigError(ValueError):
    """A flat key/value config file contains unknown or invalid entries."""
