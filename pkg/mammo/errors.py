"""Exception hierarchy.

Every error derives from :class:`MammoError` *and* from the builtin it refines, so
callers can catch either ``MammoError`` or e.g. ``ValueError``.
"""

from __future__ import annotations


class MammoError(Exception):
    """Base class for every error raised by this package."""


# -- ingest -----------------------------------------------------------------
class UnreadableFile(MammoError, OSError):
    pass


class MissingPixelData(MammoError, ValueError):
    pass


class NonPositiveWidth(MammoError, ValueError):
    pass


class SchemaMismatch(MammoError, ValueError):
    pass


class EmptyJoin(MammoError, ValueError):
    pass


class IoFailure(MammoError, OSError):
    pass


class EmptyManifest(MammoError, ValueError):
    pass


# -- splits -----------------------------------------------------------------
class InsufficientClassMembers(MammoError, ValueError):
    pass


# -- models / training ------------------------------------------------------
class ShapeMismatch(MammoError, ValueError):
    pass


class MissingTensor(MammoError, KeyError):
    pass


class TaskMismatch(MammoError, ValueError):
    pass


class EmptyClass(MammoError, ValueError):
    pass


class NonFiniteLoss(MammoError, ValueError):
    pass


class DivergedLoss(MammoError, RuntimeError):
    pass


# -- evaluation / explain ---------------------------------------------------
class LengthMismatch(MammoError, ValueError):
    pass


class SingleClass(MammoError, ValueError):
    pass


class DegenerateVariance(MammoError, ValueError):
    pass


class InvalidClass(MammoError, ValueError):
    pass


class NonFiniteGradient(MammoError, RuntimeError):
    pass


# -- orchestration ----------------------------------------------------------
class ConfigInvalid(MammoError, ValueError):
    pass


class StageFailed(MammoError, RuntimeError):
    """A pipeline stage raised; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
