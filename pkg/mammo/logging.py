"""Logging for the pipeline: one ``mammo`` namespace plus a stage/task/fold context.

Library modules use ``log = get_logger(__name__)``. The library stays silent until the
CLI calls :func:`configure`. Code running a stage or a training fold wraps itself in
:func:`log_context`, and every line logged inside carries those fields::

    14:02:11 INFO    [stage=train task=baseline fold=3] mammo.training: ...
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Dict, Iterator, Tuple

_ROOT = "mammo"
_FORMAT = "%(asctime)s %(levelname)-7s [%(context)s] %(name)s: %(message)s"

_CONTEXT: ContextVar[Tuple[Tuple[str, object], ...]] = ContextVar("mammo_log_context",
                                                                 default=())

logging.getLogger(_ROOT).addHandler(logging.NullHandler())


def get_logger(name: str) -> logging.Logger:
    """Return a logger under the ``mammo`` namespace."""
    if name == "__main__" or not name.startswith(_ROOT):
        name = f"{_ROOT}.{name}"
    return logging.getLogger(name)


def current_context() -> Dict[str, object]:
    return dict(_CONTEXT.get())


def format_context() -> str:
    return " ".join(f"{k}={v}" for k, v in _CONTEXT.get()) or "-"


@contextmanager
def log_context(**fields) -> Iterator[None]:
    """Add ``fields`` (``None`` values dropped) to every record logged inside the block."""
    outer = tuple((k, v) for k, v in _CONTEXT.get() if k not in fields)
    token = _CONTEXT.set(outer + tuple((k, v) for k, v in fields.items() if v is not None))
    try:
        yield
    finally:
        _CONTEXT.reset(token)


class ContextFilter(logging.Filter):
    """Sets ``record.context`` from the active :func:`log_context` fields."""

    def filter(self, record: logging.LogRecord) -> bool:
        record.context = format_context()
        return True


def configure(level: int = logging.INFO) -> None:
    """Enable console logging for the ``mammo`` namespace (for CLIs/scripts)."""
    logger = logging.getLogger(_ROOT)
    logger.setLevel(level)
    if not any(isinstance(h, logging.StreamHandler) for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.addFilter(ContextFilter())
        handler.setFormatter(logging.Formatter(_FORMAT, datefmt="%H:%M:%S"))
        logger.addHandler(handler)
