"""Lightweight event capture for audit-mode forward passes.

Instrumented code calls :func:`emit` unconditionally; events are recorded
only while a :func:`capture` block is active, so the cost outside audits is
one attribute check.
"""

from __future__ import annotations

import contextlib

_events: list | None = None


def emit(kind: str, **meta) -> None:
    if _events is not None:
        _events.append({"kind": kind, **meta})


def active() -> bool:
    return _events is not None


@contextlib.contextmanager
def capture():
    """Collect events emitted inside the block into the yielded list."""
    global _events
    prev = _events
    _events = []
    try:
        yield _events
    finally:
        _events = prev
