"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Invalid run configuration or inconsistent parameters."""


class DataError(ValueError):
    """Input data (traces, calibration, spectra) unusable for the request."""


class EntropySafetyError(RuntimeError):
    """An output request exceeds what the entropy accounting allows."""
