"""Post-processing toolkit for a vacuum-fluctuation random number generator.

Modules: signal_sim (trace synthesis), spectral (block DFT and PSD),
binning, entropy, extract (hashing and pipeline), analysis (diagnostics)
and cli.
"""

from .errors import ConfigError, DataError, EntropySafetyError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "EntropySafetyError", "__version__"]
