"""Individualized differentially private SGD with ordered importance weighting.

Submodules are imported lazily by callers so that thread-count environment
variables can be applied before numpy loads.
"""

__version__ = "0.1.0"
