"""Closed-form distributed Volt-Var / Volt-Watt dispatch for radial feeders."""

from importlib.resources import files

__version__ = "0.1.0"


def data_path(name: str):
    """Path to a feeder, scenario or profile shipped with the package."""
    return files(__name__) / "data" / name
