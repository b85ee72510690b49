"""A desk-scale composable analysis facility."""

__version__ = "0.1.0"
