"""Clock estimation under GPS time-synchronization attacks."""

__version__ = "0.1.0"
