"""Reference-based super-resolution with gated double attention.

Submodules import lazily so the CLI can pin BLAS thread counts via
environment variables before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor", "gradcheck", "rng", "trace", "errors",
    "attention", "blocks", "model", "losses", "metrics",
    "data", "train", "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        mod = importlib.import_module(f".{name}", __name__)
        globals()[name] = mod
        return mod
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
