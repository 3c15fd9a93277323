"""Channel pruning toolkit for small convolutional networks.

Submodules are imported lazily so light-weight entry points (FLOPs
counting, model inspection) stay fast.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "graph",
    "models",
    "modelio",
    "criteria",
    "strategies",
    "training",
    "reid",
    "datasets",
    "scenarios",
    "reporting",
    "config",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
