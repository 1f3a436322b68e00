"""Per-user inference of badge influence from event streams and covariates."""

__version__ = "0.1.0"
