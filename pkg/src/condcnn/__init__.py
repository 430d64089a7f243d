"""Conditionally parameterized temporal convolutions for multichannel
time-series classification.

Import submodules directly (``from condcnn import autodiff, layers, ...``);
this top-level module stays import-light so the CLI can pin the numeric
thread count before numpy loads.
"""

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "layers",
    "condconv",
    "archspec",
    "data",
    "training",
    "analysis",
    "storage",
    "errors",
    "cli",
]
