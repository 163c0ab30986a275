from __future__ import annotations

from typing import Optional


class SpeakStreamError(Exception):
    """Base class for every error raised by the speakstream package.

    ``code`` is the stable machine-readable name reported by the CLI.
    """

    code: str = "speakstream_error"


class EmptyInputError(SpeakStreamError):
    code = "empty_input"


class InvalidConfigError(SpeakStreamError):
    code = "invalid_config"


class InvalidBinError(SpeakStreamError):
    code = "invalid_bin"


class InvalidInputError(SpeakStreamError):
    code = "invalid_input"


class EmptyReferenceError(SpeakStreamError):
    code = "empty_reference"


class AlignmentMismatchError(SpeakStreamError):
    code = "alignment_mismatch"


class MalformedSequenceError(SpeakStreamError):
    code = "malformed_sequence"


class InvalidTokenError(SpeakStreamError):
    code = "invalid_token"


class CacheDesyncError(SpeakStreamError):
    code = "cache_desync"


class EmptyLossError(SpeakStreamError):
    code = "empty_loss"


class NumericalError(SpeakStreamError):
    code = "numerical_error"

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class InvalidPhaseError(SpeakStreamError):
    code = "invalid_phase"


class SegmentOverrunError(SpeakStreamError):
    code = "segment_overrun"

    def __init__(self, segment: int, limit: int):
        super().__init__(f"segment {segment} exceeded {limit} frames without EOS")
        self.segment = segment
        self.limit = limit


class NoSpeechDetectedError(SpeakStreamError):
    code = "no_speech_detected"


class FormatError(SpeakStreamError):
    code = "format_error"


class ChecksumError(FormatError):
    code = "checksum_mismatch"
