"""Averaged-model simulator of a series-shunt hybrid distribution transformer."""
from ._backend import has_compiled, resolve as resolve_backend
from .simengine import ScenarioSpec, SimResult, run

__all__ = ["ScenarioSpec", "SimResult", "run", "has_compiled", "resolve_backend"]
__version__ = "0.1.0"
