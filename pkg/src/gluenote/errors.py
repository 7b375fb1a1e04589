"""Exception types shared across the package."""


class GlueNoteError(Exception):
    """Base class for all package errors."""


class MidiParseError(GlueNoteError):
    """Malformed Standard MIDI File. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class EmptySequenceError(GlueNoteError):
    pass


class ValidationError(GlueNoteError, ValueError):
    pass


class DecodeError(GlueNoteError, ValueError):
    pass


class CheckpointError(GlueNoteError):
    pass


class TrainingDivergence(GlueNoteError, FloatingPointError):
    def __init__(self, message, step=None, dump_path=None):
        self.step = step
        self.dump_path = dump_path
        super().__init__(message)


class DanglingNoteWarning(UserWarning):
    """Note-on events without a matching note-off were closed at end of track."""
