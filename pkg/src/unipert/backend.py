"""Kernel backend selection.

The hot kernels ship in two equivalent implementations: numba @njit loops
and vectorized numpy. `UNIPERT_BACKEND` picks one at process start:

    auto   - numba if importable, else numpy (default)
    numba  - require numba, fail loudly if missing
    numpy  - force the pure-numpy path

`use()` switches at runtime (tests and the backend benchmark rely on it).
"""

import os

ENV_VAR = "UNIPERT_BACKEND"
_CHOICES = ("auto", "numba", "numpy")


def has_numba() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def _resolve(choice: str) -> str:
    if choice not in _CHOICES:
        raise ValueError(f"{ENV_VAR} must be one of {_CHOICES}, got {choice!r}")
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        import numba  # noqa: F401  (raises if unavailable)

        return "numba"
    return "numba" if has_numba() else "numpy"


_active = _resolve(os.environ.get(ENV_VAR, "auto").strip().lower())


def active() -> str:
    """Name of the backend currently serving kernel calls."""
    return _active


def use(choice: str) -> str:
    """Switch backends; returns the previous one so callers can restore it."""
    global _active
    previous = _active
    _active = _resolve(choice)
    return previous
