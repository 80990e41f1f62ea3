"""Multi-flow, multi-server age-of-information scheduling simulator."""

__version__ = "0.1.0"
