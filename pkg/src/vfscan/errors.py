"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, out-of-range sites, bad ratios."""


class LoadError(ValueError):
    """Malformed model/batch/report file; message names the offending field."""


class AnalysisError(RuntimeError):
    """Analysis cannot proceed (e.g. empty error list for an EDM)."""
