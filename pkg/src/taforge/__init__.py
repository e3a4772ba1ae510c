"""Rehosting, static analysis and stateful fuzzing of TrustZone trusted applications."""

__version__ = "0.1.0"
