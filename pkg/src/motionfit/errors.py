"""Exception hierarchy shared across the package.

Every error raised by motionfit derives from :class:`MotionFitError`, so
callers can catch one type at an API boundary.  The concrete classes mirror
the failure modes of the individual subsystems.
"""


class MotionFitError(Exception):
    """Base class for all motionfit errors."""


# --- body model ---------------------------------------------------------

class DegenerateRotation(MotionFitError):
    """6D rotation input cannot be orthonormalized (zero or parallel columns)."""


class ModelMismatch(MotionFitError):
    """Motion state dimensions do not match the loaded skeleton."""


class BehindCamera(MotionFitError):
    """A joint has nonpositive depth and cannot be projected."""

    def __init__(self, message, frame=None, joint=None):
        super().__init__(message)
        self.frame = frame
        self.joint = joint


# --- keypoints ----------------------------------------------------------

class ParseError(MotionFitError):
    """Malformed keypoint file; carries the offending line number."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class LayoutError(MotionFitError):
    """Keypoint group sizes or layouts are inconsistent."""


# --- objective ----------------------------------------------------------

class InvalidInterval(MotionFitError):
    """Interval with lo > hi."""


class DegenerateBone(MotionFitError):
    """Zero-length bone; no direction defined."""


class DegenerateHull(MotionFitError):
    """Fewer than three effective (non-collinear) hull points."""


class LimitsIncomplete(MotionFitError):
    """A biomechanical limit entry is missing for a named bone or joint."""


# --- optimizer ----------------------------------------------------------

class NotDescent(MotionFitError):
    """Line search was given a non-descent direction."""


class NoTrace(MotionFitError):
    """Shape freezing requested with an empty iterate trace."""


class InitMismatch(MotionFitError):
    """Initialization file frame count differs from the keypoint sequence."""


# --- quantize -----------------------------------------------------------

class EmptyCodebook(MotionFitError):
    """Codebook with no codes."""


class BadIndex(MotionFitError):
    """Code index out of range for the codebook."""


class BadSequence(MotionFitError):
    """Malformed index sequence (missing or misplaced EOS)."""


# --- metrics ------------------------------------------------------------

class ShapeError(MotionFitError):
    """Array shapes inconsistent with the operation's contract."""


class TooFewSamples(MotionFitError):
    """Not enough items to evaluate the metric."""


class MissingPrompt(MotionFitError):
    """An item lacks the prompt feature required by the metric."""


class MissingPositive(MotionFitError):
    """A generated item lacks its designated positive dataset item."""


class EmptySequence(MotionFitError):
    """Joint sequence with no frames."""


class EmptySubset(MotionFitError):
    """Joint subset selection is empty."""
