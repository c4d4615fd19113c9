"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid configuration: bad file, dimension mismatch, window geometry."""


class DataError(Exception):
    """Data that cannot be valid: counts above pulse number, unnormalized inputs."""


class MemoryBudgetError(ConfigError):
    """Requested dense output exceeds the memory budget; use the streaming API."""
