"""Contrastive representation learning in the Poincare ball.

Submodules are imported lazily so the CLI can cap BLAS thread counts via
``PCON_THREADS`` before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "autograd",
    "adversarial",
    "ball",
    "cli",
    "config",
    "data",
    "losses",
    "models",
    "oracles",
    "report",
    "selftest",
    "train",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
