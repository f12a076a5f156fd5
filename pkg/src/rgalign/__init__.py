"""Region-global vision-language alignment at desk scale."""

__version__ = "0.1.0"
