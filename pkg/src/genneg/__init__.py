"""Oracle-assisted classifier guidance for score-based diffusion models.

Submodules are imported lazily so the CLI can cap BLAS threads via
GENNEG_THREADS before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("nets", "diffusion", "oracles", "datasets", "guidance",
               "pipeline", "analytic", "plots", "errors", "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
